#!/usr/bin/env python3
"""
Test script to verify bias-phrase sampling, tag insertion, the synthetic task and the data files
"""

import json
from collections import Counter

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import chisquare

from data import (SamplerConfig, SynthTaskConfig, Utterance, generate_synth_dataset, insert_bias_tags,
                  load_bias_list, load_dataset, load_task, sample_bias_phrases, save_bias_list, save_dataset,
                  strip_bias_tags, write_task)
from errors import ConfigError, ContractError, ParseError
from numerics import make_rng
from vocabulary import BIAS_TAG

SMALL_TASK = dict(seed=3, n_groups=10, group_size=4, feature_dim=4, n_train=60, n_test=30,
                  utt_len_min=4, utt_len_max=8, n_train_entities=10, n_test_entities=8)


def test_sampler_defaults():
    config = SamplerConfig()
    assert (config.p_keep, config.n_phrases, config.n_order) == (0.5, 1, 4)


def test_sampler_never_keeps_with_zero_probability():
    references = [list("ABCDEF"), list("GHI")]
    phrases, spans = sample_bias_phrases(references, SamplerConfig(p_keep=0.0), make_rng(0))
    assert phrases == []
    assert spans == [[], []]


def test_sampler_one_unigram_per_reference():
    references = [list("ABCDEF"), list("GHI"), list("J")]
    phrases, spans = sample_bias_phrases(references, SamplerConfig(p_keep=1.0, n_phrases=1, n_order=1), make_rng(1))
    assert [len(s) for s in spans] == [1, 1, 1]
    for reference, (span,) in zip(references, spans):
        start, end = span
        assert end - start == 1
        assert tuple(reference[start:end]) in phrases
    assert spans[2] == [(0, 1)]


def test_sampler_deduplicates_and_skips_empty_references():
    references = [list("AAAA"), [], list("AAAA")]
    phrases, spans = sample_bias_phrases(references, SamplerConfig(p_keep=1.0, n_phrases=3, n_order=1), make_rng(2))
    assert phrases == [("A",)]
    assert spans[1] == []


def test_sampler_statistics():
    rng = make_rng(2024)
    config = SamplerConfig(p_keep=0.5, n_phrases=1, n_order=4)
    kept = 0
    orders = Counter()
    for _ in range(10_000):
        _, spans = sample_bias_phrases([list("ABCDEFGHIJ")], config, rng)
        if spans[0]:
            kept += 1
            orders.update(end - start for start, end in spans[0])
    assert 0.48 <= kept / 10_000 <= 0.52
    observed = [orders[n] for n in range(1, 5)]
    assert chisquare(observed).pvalue > 0.01


def test_insert_bias_tags():
    assert insert_bias_tags(list("ABCDE"), []) == list("ABCDE")
    assert insert_bias_tags(list("ABCDE"), [(1, 3)]) == ["A", "B", "C", BIAS_TAG, "D", "E"]
    tagged = insert_bias_tags(list("ABCDE"), [(2, 4), (0, 2)])
    assert tagged == ["A", "B", BIAS_TAG, "C", "D", BIAS_TAG, "E"]
    assert len(tagged) == 5 + 2
    assert strip_bias_tags(tagged) == list("ABCDE")
    with pytest.raises(ContractError):
        insert_bias_tags(list("ABCDE"), [(0, 3), (2, 4)])
    with pytest.raises(ContractError):
        insert_bias_tags(list("ABC"), [(1, 4)])


def test_utterance_rejects_bad_spans():
    with pytest.raises(ValidationError):
        Utterance(id="x", reference=list("AB"), features=[[0.0]], entities=[(1, 3)])
    with pytest.raises(ValidationError):
        Utterance(id="x", reference=list("ABCD"), features=[[0.0]], entities=[(0, 2), (1, 3)])


def test_synth_dataset_contract():
    dataset = generate_synth_dataset(SynthTaskConfig(**SMALL_TASK))
    assert len(dataset.train) == 60 and len(dataset.test) == 30
    assert len(dataset.test_entities) == 8
    for entity in dataset.test_entities:
        assert 2 <= len(entity) <= 4
        train_hits = sum(1 for u in dataset.train for i in range(len(u.reference))
                         if "".join(u.reference[i:i + len(entity)]) == entity)
        assert train_hits <= 3
    summary = dataset.summary()
    assert summary["test_entities_covered"] == 8
    assert summary["test_utterances_with_entity"] == 18
    for utterance in dataset.train + dataset.test:
        assert all(token in dataset.vocabulary for token in utterance.reference)
        assert len(utterance.features) == len(utterance.reference)


def test_distinct_entity_onsets():
    dataset = generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "distinct_entity_onsets": True}))
    onsets = [entity[0] for entity in dataset.test_entities]
    assert len(onsets) == 8 and len(set(onsets)) == 8
    # four tail tokens cannot start five test entities
    with pytest.raises(ConfigError):
        generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "n_groups": 4, "group_size": 2,
                                                  "n_test_entities": 5, "distinct_entity_onsets": True}))


def test_noise_free_features_are_token_embeddings():
    dataset = generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "noise": 0.0}))
    frames = {}
    for utterance in dataset.train:
        for token, frame in zip(utterance.reference, utterance.features):
            if token in frames:
                assert frame == frames[token]
            frames[token] = frame


def test_same_seed_writes_identical_files(tmp_path):
    config = SynthTaskConfig(**SMALL_TASK)
    write_task(tmp_path / "a", config)
    write_task(tmp_path / "b", config)
    for name in ("train.jsonl", "test.jsonl", "entities.txt", "vocab.txt", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "seed": 4}))
    assert [u.reference for u in other.train] != [u.reference for u in load_dataset(tmp_path / "a" / "train.jsonl")]


def test_inconsistent_task_config():
    with pytest.raises(ConfigError):
        generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "entity_len_max": 6, "utt_len_max": 5}))
    with pytest.raises(ConfigError):
        generate_synth_dataset(SynthTaskConfig(**{**SMALL_TASK, "n_test_entities": 25}))
    with pytest.raises(ValidationError):
        SynthTaskConfig(entity_len_max=17)
    with pytest.raises(ValidationError):
        SynthTaskConfig(entity_len_min=4, entity_len_max=3)


def test_dataset_round_trip(tmp_path):
    rng = make_rng(6)
    utterances = []
    for i in range(5):
        n = int(rng.integers(1, 6))
        utterances.append(Utterance(id=f"u{i}", reference=[chr(0x4E00 + int(t)) for t in rng.integers(0, 20, n)],
                                    features=rng.normal(size=(n, 3)).tolist(), entities=[(0, 1)] if i % 2 else []))
    path = tmp_path / "data.jsonl"
    save_dataset(path, utterances)
    assert load_dataset(path) == utterances


def test_dataset_parse_errors(tmp_path):
    good = json.dumps({"id": "a", "reference": ["x"], "features": [[0.0]], "entities": []})
    path = tmp_path / "bad.jsonl"
    for body, line in [(good + "\n\n", 2), (good + "\n{oops\n", 2),
                       ('{"id": "b", "reference": ["x"], "features": [[0.0]], "entities": [[0, 5]]}\n', 1)]:
        path.write_text(body, encoding="utf-8")
        with pytest.raises(ParseError) as excinfo:
            load_dataset(path)
        assert excinfo.value.line_number == line
        assert str(excinfo.value).startswith(f"line {line}: ")


def test_bias_list_files(tmp_path):
    path = tmp_path / "bias.txt"
    path.write_text("", encoding="utf-8")
    assert load_bias_list(path) == []
    save_bias_list(path, ["许茹芸", "王小五"])
    assert load_bias_list(path) == ["许茹芸", "王小五"]
    path.write_text("许茹芸\n王小五\n许茹芸\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        load_bias_list(path)
    assert excinfo.value.line_number == 3
    path.write_text("许茹芸\n\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_bias_list(path)


def test_load_task_matches_written_task(tmp_path):
    summary = write_task(tmp_path, SynthTaskConfig(**SMALL_TASK))
    vocabulary, train, test, surfaces = load_task(tmp_path)
    assert summary["n_train"] == len(train) == 60
    assert summary["vocab_size"] == len(vocabulary) == 3 + 40
    assert len(surfaces) == 8
    assert json.loads((tmp_path / "summary.json").read_text(encoding="utf-8")) == summary


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
