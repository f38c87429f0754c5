"""
Data
Training-time bias-phrase sampling, </bias> tag insertion, the synthetic long-tail
task generator and the dataset / bias-list file formats.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from config import FORMAT_VERSION
from errors import ConfigError, ContractError, ParseError
from numerics import make_rng
from vocabulary import BIAS_TAG, Vocabulary

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Span = Tuple[int, int]

# First code point of the synthetic character inventory (CJK unified ideographs)
CJK_BASE = 0x4E00


class SamplerConfig(BaseModel):
    p_keep: float = Field(default=0.5, ge=0.0, le=1.0, description="Probability a reference contributes phrases")
    n_phrases: int = Field(default=1, ge=1, description="Max phrases drawn from a kept reference")
    n_order: int = Field(default=4, ge=1, description="Max n-gram order of a drawn phrase")
    seed: int = Field(default=0, ge=0, description="Seed when no generator is supplied")


def sample_bias_phrases(batch_references: Sequence[Sequence[Hashable]], config: SamplerConfig,
                        rng: Optional[np.random.Generator] = None
                        ) -> Tuple[List[Tuple[Hashable, ...]], List[List[Span]]]:
    """
    Draw a training bias list from the batch references.

    Each reference is kept with probability p_keep; a kept reference yields
    k ~ U[1, n_phrases] contiguous n-grams with n ~ U[1, n_order] (capped at
    the reference length). Returns the de-duplicated phrase list and, per
    reference, the source span of every drawn phrase.
    """
    rng = rng if rng is not None else make_rng(config.seed)
    phrases: List[Tuple[Hashable, ...]] = []
    seen = set()
    annotations: List[List[Span]] = []

    for index, reference in enumerate(batch_references):
        spans: List[Span] = []
        annotations.append(spans)
        if len(reference) < 1:
            logger.warning(f"Skipping empty reference {index} in bias-phrase sampling")
            continue
        if rng.random() >= config.p_keep:
            continue
        k = int(rng.integers(1, config.n_phrases + 1))
        for _ in range(k):
            n = min(int(rng.integers(1, config.n_order + 1)), len(reference))
            start = int(rng.integers(0, len(reference) - n + 1))
            spans.append((start, start + n))
            phrase = tuple(reference[start:start + n])
            if phrase not in seen:
                seen.add(phrase)
                phrases.append(phrase)
    return phrases, annotations


def insert_bias_tags(reference: Sequence[Any], phrase_spans: Sequence[Span], tag: Any = BIAS_TAG) -> List[Any]:
    """Insert `tag` right after the last token of every span"""
    spans = sorted((int(s), int(e)) for s, e in phrase_spans)
    previous_end = 0
    for start, end in spans:
        if not 0 <= start < end <= len(reference):
            raise ContractError(f"Span [{start}, {end}) outside reference of length {len(reference)}")
        if start < previous_end:
            raise ContractError(f"Span [{start}, {end}) overlaps a previous span")
        previous_end = end

    tagged: List[Any] = []
    ends = {end for _, end in spans}
    for i, token in enumerate(reference):
        tagged.append(token)
        if i + 1 in ends:
            tagged.append(tag)
    return tagged


def strip_bias_tags(tokens: Sequence[Any], tag: Any = BIAS_TAG) -> List[Any]:
    return [t for t in tokens if t != tag]


class Utterance(BaseModel):
    id: str = Field(description="Utterance identifier")
    reference: List[str] = Field(description="Reference tokens (characters)")
    features: List[List[float]] = Field(description="Feature frames")
    entities: List[Tuple[int, int]] = Field(default_factory=list, description="Entity spans [start, end)")

    @model_validator(mode="after")
    def validate_entities(self):
        previous_end = 0
        for start, end in sorted(self.entities):
            if not 0 <= start < end <= len(self.reference):
                raise ValueError(f"entity span [{start}, {end}) outside reference of length {len(self.reference)}")
            if start < previous_end:
                raise ValueError(f"entity span [{start}, {end}) overlaps another span")
            previous_end = end
        return self

    def entity_surfaces(self) -> List[str]:
        return ["".join(self.reference[s:e]) for s, e in self.entities]

    def feature_array(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


class SynthTaskConfig(BaseModel):
    seed: int = Field(default=0, ge=0)
    n_groups: int = Field(default=30, ge=2, description="Pronunciation groups (homophone sets)")
    group_size: int = Field(default=4, ge=2, description="Characters per group; member 0 is a head token")
    feature_dim: int = Field(default=16, ge=1)
    homophone_spread: float = Field(default=0.3, ge=0.0, description="Feature distance inside a group")
    noise: float = Field(default=0.3, ge=0.0, description="Additive Gaussian noise on every frame")
    frames_per_token: int = Field(default=1, ge=1)
    zipf_exponent: float = Field(default=1.1, gt=0.0)
    n_train: int = Field(default=1000, ge=1)
    n_test: int = Field(default=300, ge=1)
    utt_len_min: int = Field(default=4, ge=1)
    utt_len_max: int = Field(default=12, ge=1)
    n_train_entities: int = Field(default=100, ge=0)
    n_test_entities: int = Field(default=50, ge=1)
    entity_len_min: int = Field(default=2, ge=2, le=16)
    entity_len_max: int = Field(default=4, ge=2, le=16)
    train_entity_rate: float = Field(default=0.5, ge=0.0, le=1.0)
    test_entity_rate: float = Field(default=0.6, ge=0.0, le=1.0)
    test_entity_train_occurrences: int = Field(default=1, ge=0, le=3,
                                                description="Training utterances each test entity is injected into")
    distinct_entity_onsets: bool = Field(default=False,
                                         description="Test entities start with pairwise different characters")

    @field_validator("entity_len_max")
    @classmethod
    def validate_entity_range(cls, v, info):
        low = info.data.get("entity_len_min", 2)
        if v < low:
            raise ValueError("entity_len_max must be >= entity_len_min")
        return v

    @model_validator(mode="after")
    def validate_utterance_range(self):
        if self.utt_len_max < self.utt_len_min:
            raise ValueError("utt_len_max must be >= utt_len_min")
        return self


@dataclass
class SynthDataset:
    vocabulary: Vocabulary
    train: List[Utterance]
    test: List[Utterance]
    test_entities: List[str]
    train_entities: List[str]

    def summary(self) -> Dict[str, Any]:
        lengths = [len(e) for e in self.test_entities]
        covered = {s for u in self.test for s in u.entity_surfaces()}
        return {
            "format_version": FORMAT_VERSION,
            "vocab_size": len(self.vocabulary),
            "n_train": len(self.train),
            "n_test": len(self.test),
            "n_train_entities": len(self.train_entities),
            "n_test_entities": len(self.test_entities),
            "entity_length_min": min(lengths) if lengths else None,
            "entity_length_max": max(lengths) if lengths else None,
            "test_entities_covered": sum(1 for e in self.test_entities if e in covered),
            "test_utterances_with_entity": sum(1 for u in self.test if u.entities),
        }


def _count_occurrences(sequence: Sequence[str], phrase: Sequence[str]) -> int:
    n = len(phrase)
    return sum(1 for i in range(len(sequence) - n + 1) if list(sequence[i:i + n]) == list(phrase))


class _SynthGenerator:
    def __init__(self, config: SynthTaskConfig):
        self.config = config
        self.rng = make_rng(config.seed)
        c = config
        self.tokens = [chr(CJK_BASE + i) for i in range(c.n_groups * c.group_size)]
        self.head = [self.tokens[g * c.group_size] for g in range(c.n_groups)]
        self.tail = [self.tokens[g * c.group_size + m] for g in range(c.n_groups) for m in range(1, c.group_size)]

        centers = self.rng.normal(size=(c.n_groups, c.feature_dim))
        offsets = self.rng.normal(size=(c.n_groups, c.group_size, c.feature_dim)) * c.homophone_spread
        self.embedding = {
            self.tokens[g * c.group_size + m]: centers[g] + offsets[g, m]
            for g in range(c.n_groups) for m in range(c.group_size)
        }
        ranks = np.arange(1, c.n_groups + 1, dtype=np.float64)
        weights = ranks ** -c.zipf_exponent
        self.head_probs = weights / weights.sum()

    def entity(self) -> str:
        c = self.config
        n = int(self.rng.integers(c.entity_len_min, c.entity_len_max + 1))
        return "".join(self.tail[i] for i in self.rng.integers(0, len(self.tail), size=n))

    def inventories(self) -> Tuple[List[str], List[str]]:
        c = self.config
        attempts = 50 * (c.n_test_entities + c.n_train_entities) + 1000
        test: List[str] = []
        while len(test) < c.n_test_entities:
            attempts -= 1
            if attempts < 0:
                raise ConfigError("Could not draw enough distinct test entities; enlarge the token inventory")
            e = self.entity()
            # no test entity may contain another, so injected occurrences stay countable
            if any(e in t or t in e for t in test):
                continue
            if c.distinct_entity_onsets and any(t[0] == e[0] for t in test):
                continue
            test.append(e)
        train: List[str] = []
        while len(train) < c.n_train_entities:
            attempts -= 1
            if attempts < 0:
                raise ConfigError("Could not draw enough train entities disjoint from the test inventory")
            e = self.entity()
            if e in train or any(t in e for t in test):
                continue
            train.append(e)
        return test, train

    def filler(self, n: int) -> List[str]:
        picks = self.rng.choice(len(self.head), size=n, p=self.head_probs)
        return [self.head[i] for i in picks]

    def utterance(self, uid: str, entity: Optional[str]) -> Utterance:
        c = self.config
        length = int(self.rng.integers(c.utt_len_min, c.utt_len_max + 1))
        spans: List[Span] = []
        if entity is None:
            reference = self.filler(length)
        else:
            chars = list(entity)
            length = max(length, len(chars))
            start = int(self.rng.integers(0, length - len(chars) + 1))
            reference = self.filler(start) + chars + self.filler(length - start - len(chars))
            spans.append((start, start + len(chars)))
        frames = []
        for token in reference:
            for _ in range(c.frames_per_token):
                frames.append(self.embedding[token] + c.noise * self.rng.normal(size=c.feature_dim))
        return Utterance(id=uid, reference=reference, features=np.asarray(frames).tolist(), entities=spans)


def generate_synth_dataset(config: SynthTaskConfig) -> SynthDataset:
    """Seeded synthetic task: Zipf head text, rare tail-token entities, noisy token-embedding features"""
    c = config
    if c.entity_len_max > c.utt_len_max:
        raise ConfigError(f"entity_len_max {c.entity_len_max} exceeds utt_len_max {c.utt_len_max}")
    n_test_with_entity = int(round(c.test_entity_rate * c.n_test))
    if n_test_with_entity < c.n_test_entities:
        raise ConfigError(f"{n_test_with_entity} entity-bearing test utterances cannot cover "
                          f"{c.n_test_entities} test entities")
    if c.n_test_entities * c.test_entity_train_occurrences > c.n_train:
        raise ConfigError("Not enough training utterances to inject test entities")

    gen = _SynthGenerator(c)
    test_entities, train_entities = gen.inventories()

    # Entity assignment for training utterances
    train_slots: List[Optional[str]] = [None] * c.n_train
    order = gen.rng.permutation(c.n_train)
    cursor = 0
    for entity in test_entities:
        for _ in range(c.test_entity_train_occurrences):
            train_slots[int(order[cursor])] = entity
            cursor += 1
    for i in order[cursor:]:
        if train_entities and gen.rng.random() < c.train_entity_rate:
            train_slots[int(i)] = train_entities[int(gen.rng.integers(0, len(train_entities)))]
    train = [gen.utterance(f"train-{i:05d}", e) for i, e in enumerate(train_slots)]

    # Test: cycle the inventory first so every test entity appears
    test_slots: List[Optional[str]] = [None] * c.n_test
    carriers = sorted(int(i) for i in gen.rng.choice(c.n_test, size=n_test_with_entity, replace=False))
    for rank, i in enumerate(carriers):
        if rank < len(test_entities):
            test_slots[i] = test_entities[rank]
        else:
            test_slots[i] = test_entities[int(gen.rng.integers(0, len(test_entities)))]
    test = [gen.utterance(f"test-{i:05d}", e) for i, e in enumerate(test_slots)]

    for entity in test_entities:
        occurrences = sum(_count_occurrences(u.reference, list(entity)) for u in train)
        if occurrences > 3:
            raise ConfigError(f"Test entity {entity!r} occurs {occurrences} times in training data")

    vocabulary = Vocabulary(gen.tokens)
    logger.info(f"Generated synthetic task: {len(train)} train / {len(test)} test utterances, "
                f"{len(test_entities)} test entities, vocabulary {len(vocabulary)}")
    return SynthDataset(vocabulary=vocabulary, train=train, test=test,
                        test_entities=test_entities, train_entities=train_entities)


def save_dataset(path: PathLike, utterances: Sequence[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utterance in utterances:
            f.write(json.dumps(utterance.model_dump(), ensure_ascii=False) + "\n")


def load_dataset(path: PathLike) -> List[Utterance]:
    utterances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                raise ParseError("blank dataset line", line_number)
            try:
                utterances.append(Utterance.model_validate(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line_number)
            except ValidationError as e:
                raise ParseError(f"invalid utterance: {e.errors()[0]['msg']}", line_number)
    return utterances


def save_bias_list(path: PathLike, phrases: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for phrase in phrases:
            f.write(phrase + "\n")


def load_bias_list(path: PathLike) -> List[str]:
    """One phrase per line; blank or repeated lines are rejected"""
    phrases: List[str] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            phrase = line.rstrip("\n").rstrip("\r")
            if not phrase.strip():
                raise ParseError("blank bias-list line", line_number)
            if phrase in seen:
                raise ParseError(f"duplicate bias phrase {phrase!r}", line_number)
            seen.add(phrase)
            phrases.append(phrase)
    return phrases


def write_task(out_dir: PathLike, config: SynthTaskConfig) -> Dict[str, Any]:
    """Generate the task and write train/test JSON-lines, entities.txt, vocab.txt and summary.json"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = generate_synth_dataset(config)
    save_dataset(out / "train.jsonl", dataset.train)
    save_dataset(out / "test.jsonl", dataset.test)
    save_bias_list(out / "entities.txt", dataset.test_entities)
    dataset.vocabulary.save(out / "vocab.txt")
    summary = dataset.summary()
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, ensure_ascii=False)
    logger.info(f"Wrote synthetic task to {out}")
    return summary


def load_task(data_dir: PathLike) -> Tuple[Vocabulary, List[Utterance], List[Utterance], List[str]]:
    root = Path(data_dir)
    return (Vocabulary.load(root / "vocab.txt"), load_dataset(root / "train.jsonl"),
            load_dataset(root / "test.jsonl"), load_bias_list(root / "entities.txt"))
