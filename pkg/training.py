"""
Training
Teacher-forced training over the synthetic task, first-order optimizers with
global-norm clipping, checkpoints, and the ablation workflow that trains and
evaluates a ladder of model configurations.
"""

import json
import logging
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, TypedDict

import numpy as np
import pandas as pd
from langgraph.graph import END, StateGraph
from pydantic import BaseModel, Field, ValidationError

from bias_attention import QueryMode
from bias_encoder import BiasPhrase, EncoderVariant, Granularity, phrases_from_surfaces
from config import FORMAT_VERSION
from contextual_decoder import DecodeSettings, DeepClasModel, ModelDims, decode_dataset
from data import SamplerConfig, Utterance, insert_bias_tags, sample_bias_phrases
from errors import ConfigError, DivergenceError, LoadError, NumericError
from fusion import FusionMethod, FusionSettings
from losses import (LossBreakdown, attention_loss, attention_loss_grad_logits, bias_loss,
                    bias_loss_grad_logits, build_bias_targets, total_loss)
from metrics import DEFAULT_BUCKETS, parse_buckets, score_corpus
from numerics import ParamStore, make_rng
from prefix_tree import PrefixTree
from storage import read_json, write_json
from vocabulary import Vocabulary

logger = logging.getLogger(__name__)


class OptimizerConfig(BaseModel):
    kind: Literal["sgd", "adam"] = Field(default="sgd", description="Update rule")
    lr: float = Field(default=0.05, gt=0.0, description="Learning rate")
    clip: float = Field(default=5.0, gt=0.0, description="Global gradient-norm clip")
    epochs: int = Field(default=15, ge=1)
    batch_size: int = Field(default=8, ge=1)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)


class ModelConfig(BaseModel):
    name: str = Field(default="model", description="Rung / run name")
    dims: ModelDims = Field(default_factory=ModelDims)
    encoder: EncoderVariant = Field(default_factory=EncoderVariant)
    query_mode: QueryMode = Field(default=QueryMode.D_ONLY)
    granularity: Granularity = Field(default=Granularity.COARSE)
    bias_loss: bool = Field(default=True, description="Train with the bias-attention loss")
    fusion: FusionSettings = Field(default_factory=FusionSettings)
    trie: bool = Field(default=False, description="Prefix-tree gating at decode time")
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: int = Field(default=0, ge=0)

    def training_key(self) -> str:
        """Identity of everything that affects training (decode-time settings excluded)"""
        return json.dumps(self.model_dump(mode="json", exclude={"name", "fusion", "trie"}), sort_keys=True)


class Checkpoint(BaseModel):
    version: int = Field(default=FORMAT_VERSION)
    kind: str = Field(default="checkpoint")
    config: ModelConfig
    vocabulary: List[str]
    step: int = 0
    loss_history: List[float] = Field(default_factory=list, description="Mean total loss per epoch")
    params: Dict[str, Any]


def build_model(config: ModelConfig, vocab_size: int) -> DeepClasModel:
    return DeepClasModel(vocab_size, config.dims, config.encoder, config.query_mode, config.granularity)


def clip_gradients(params: ParamStore, clip: float) -> float:
    """Scale gradients so their global norm is at most `clip`; returns the norm before clipping"""
    norm = params.global_grad_norm()
    if norm > clip:
        scale = clip / norm
        for name in params.names():
            params.grad(name)[...] *= scale
    return norm


def optimizer_step(params: ParamStore, lr: float, clip: float = 5.0) -> ParamStore:
    """Clip, take a plain gradient step, zero the gradients"""
    clip_gradients(params, clip)
    for name in params.names():
        params[name][...] -= lr * params.grad(name)
    params.zero_grad()
    return params


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config

    def step(self, params: ParamStore) -> None:
        raise NotImplementedError


class SGDOptimizer(Optimizer):
    def step(self, params: ParamStore) -> None:
        optimizer_step(params, self.config.lr, self.config.clip)


class AdamOptimizer(Optimizer):
    def __init__(self, config: OptimizerConfig):
        super().__init__(config)
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        c = self.config
        clip_gradients(params, c.clip)
        self.t += 1
        for name in params.names():
            g = params.grad(name)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / (1.0 - c.beta1 ** self.t)
            v_hat = self.v[name] / (1.0 - c.beta2 ** self.t)
            params[name][...] -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
        params.zero_grad()


def make_optimizer(config: OptimizerConfig) -> Optimizer:
    return AdamOptimizer(config) if config.kind == "adam" else SGDOptimizer(config)


def teacher_forced_loss(model: DeepClasModel, params: ParamStore, vocabulary: Vocabulary, features,
                        reference: Sequence[int], phrases: Sequence[BiasPhrase],
                        use_bias_loss: bool = True, scale: float = 1.0) -> LossBreakdown:
    """
    Unroll the decoder on `reference` (token ids, tags included) plus <eos>,
    return the loss and accumulate `scale` times its gradient into `params`.
    """
    audio = model.encode_audio(params, features)
    memory = model.encode_bias(params, phrases)
    targets = [int(t) for t in reference] + [vocabulary.eos_id]
    bias_targets = build_bias_targets(reference, phrases, model.granularity) + [0]

    state = model.initial_state(vocabulary.sos_id)
    outputs = []
    for token in targets:
        out = model.step(params, audio, memory, state)
        outputs.append(out)
        state = out.next_state(token)

    l_att = attention_loss([o.probs for o in outputs], targets)
    l_bias = bias_loss([o.alpha for o in outputs], bias_targets) if use_bias_loss else 0.0

    d_frames = np.zeros_like(audio.frames)
    d_entries = np.zeros_like(memory.entries)
    d_hidden = np.zeros(model.dims.decoder_dim)
    d_cell = np.zeros(model.dims.decoder_dim)
    for t in range(len(targets) - 1, -1, -1):
        out = outputs[t]
        d_logits = scale * attention_loss_grad_logits(out.probs, targets[t])
        d_bias = scale * bias_loss_grad_logits(out.alpha, bias_targets[t]) if use_bias_loss else None
        d_hidden, d_cell, df, de = model.step_backward(params, out.cache, d_logits, d_bias, d_hidden, d_cell)
        d_frames += df
        d_entries += de
    model.audio_encoder.backward(params, audio, d_frames)
    model.bias_encoder.backward(params, memory, d_entries)
    return total_loss(l_att, l_bias)


def prepare_batch(batch_refs: Sequence[Sequence[int]], vocabulary: Vocabulary, sampler: SamplerConfig,
                  rng: np.random.Generator) -> Tuple[List[BiasPhrase], List[List[int]]]:
    """Sample the batch bias list and tag every occurrence in the references"""
    sampled, _ = sample_bias_phrases(batch_refs, sampler, rng)
    phrases = [BiasPhrase.from_tokens(p, vocabulary) for p in sampled]
    if not phrases:
        return phrases, [list(r) for r in batch_refs]
    tree = PrefixTree(phrases)
    tagged = []
    for ref in batch_refs:
        spans = [(o.start, o.end) for o in tree.find_occurrences(ref)]
        tagged.append(insert_bias_tags(ref, spans, tag=vocabulary.bias_tag_id))
    return phrases, tagged


def train(dataset: Sequence[Utterance], vocabulary: Vocabulary, config: ModelConfig,
          params: Optional[ParamStore] = None) -> Checkpoint:
    if not dataset:
        raise ConfigError("Training needs at least one utterance")
    features = [u.feature_array() for u in dataset]
    if any(f.shape[1] != config.dims.feature_dim for f in features):
        raise ConfigError(f"Feature dim of the data does not match dims.feature_dim={config.dims.feature_dim}")
    references = [vocabulary.encode(u.reference) for u in dataset]

    model = build_model(config, len(vocabulary))
    if params is None:
        params = model.initialize(ParamStore(make_rng(config.seed)))
    data_rng = make_rng(config.seed + 1)
    optimizer = make_optimizer(config.optimizer)
    opt = config.optimizer

    logger.info(f"🚀 Training {config.name}: {len(dataset)} utterances, {opt.epochs} epochs, "
                f"batch {opt.batch_size}, {opt.kind} lr {opt.lr}")
    step = 0
    history: List[float] = []
    for epoch in range(opt.epochs):
        order = data_rng.permutation(len(dataset))
        epoch_total = 0.0
        for start in range(0, len(order), opt.batch_size):
            batch = [int(i) for i in order[start:start + opt.batch_size]]
            phrases, tagged = prepare_batch([references[i] for i in batch], vocabulary, config.sampler, data_rng)
            scale = 1.0 / len(batch)
            l_att = l_bias = 0.0
            try:
                for i, ref in zip(batch, tagged):
                    breakdown = teacher_forced_loss(model, params, vocabulary, features[i], ref, phrases,
                                                    use_bias_loss=config.bias_loss, scale=scale)
                    l_att += scale * breakdown.l_att
                    l_bias += scale * breakdown.l_bias
            except NumericError as e:
                raise DivergenceError(f"Training diverged at step {step}: {e}") from e
            if not np.isfinite(l_att + l_bias):
                raise DivergenceError(f"Loss became non-finite at step {step} (l_att={l_att}, l_bias={l_bias})")
            step_loss = total_loss(l_att, l_bias)
            optimizer.step(params)
            step += 1
            epoch_total += step_loss.total * len(batch)
            logger.info(json.dumps({"step": step, "l_att": step_loss.l_att, "l_bias": step_loss.l_bias,
                                    "total": step_loss.total}))
        history.append(epoch_total / len(dataset))
        logger.info(f"✅ Epoch {epoch + 1}/{opt.epochs}: mean loss {history[-1]:.4f}")

    return Checkpoint(config=config, vocabulary=list(vocabulary.tokens), step=step,
                      loss_history=history, params=params.to_dict())


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    if not write_json(path, checkpoint.model_dump(mode="json")):
        raise OSError(f"Could not write checkpoint {path}")


def load_checkpoint(path) -> Checkpoint:
    document = read_json(path)
    if document is None:
        raise LoadError(f"Could not read checkpoint {path}")
    if document.get("version") != FORMAT_VERSION:
        raise LoadError(f"Checkpoint version {document.get('version')} != supported {FORMAT_VERSION}")
    try:
        return Checkpoint.model_validate(document)
    except ValidationError as e:
        raise LoadError(f"Malformed checkpoint {path}: {e.errors()[0]['msg']}")


def load_model(checkpoint: Checkpoint) -> Tuple[DeepClasModel, ParamStore, Vocabulary]:
    vocabulary = Vocabulary(checkpoint.vocabulary)
    model = build_model(checkpoint.config, len(vocabulary))
    params = ParamStore.from_dict(checkpoint.params)
    expected = model.initialize(ParamStore(make_rng(0)))
    if expected.names() != params.names() or any(expected[n].shape != params[n].shape for n in params.names()):
        raise LoadError("Checkpoint parameters do not match its model config")
    return model, params, vocabulary


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class AblationLadder(BaseModel):
    name: str = Field(default="ladder")
    base: Dict[str, Any] = Field(default_factory=dict, description="Settings shared by every rung")
    rungs: List[Dict[str, Any]] = Field(description="Per-rung overrides of `base`, each with a name")
    decode: DecodeSettings = Field(default_factory=DecodeSettings)
    buckets: str = Field(default=DEFAULT_BUCKETS)

    def model_configs(self) -> List[ModelConfig]:
        configs = []
        for rung in self.rungs:
            try:
                configs.append(ModelConfig.model_validate(_deep_merge(self.base, rung)))
            except ValidationError as e:
                raise ConfigError(f"Rung {rung.get('name', '?')}: {e.errors()[0]['msg']}")
        names = [c.name for c in configs]
        if len(set(names)) != len(names):
            raise ConfigError("Rung names must be unique")
        return configs


class AblationState(TypedDict):
    rungs: List[ModelConfig]
    index: int
    train_set: List[Utterance]
    test_set: List[Utterance]
    vocabulary: Vocabulary
    bias_list: List[str]
    decode: DecodeSettings
    buckets: str
    threads: int
    trained: Dict[str, Checkpoint]
    current: Optional[Checkpoint]
    rows: List[Dict[str, Any]]


def train_rung(state: AblationState) -> AblationState:
    config = state["rungs"][state["index"]]
    key = config.training_key()
    trained = dict(state["trained"])
    if key in trained:
        logger.info(f"♻️ {config.name}: reusing a model trained with identical settings")
    else:
        trained[key] = train(state["train_set"], state["vocabulary"], config)
    return {**state, "trained": trained, "current": trained[key]}


def _row(rung: str, bias: str, config: ModelConfig, beta: Optional[float], report) -> Dict[str, Any]:
    row = {"rung": rung, "bias": bias, "fusion": config.fusion.method.value if bias == "Y" else "none",
           "beta": beta, "trie": config.trie if bias == "Y" else False,
           "cer": report.cer, "recall": report.recall, "precision": report.precision, "f1": report.f1,
           "n": report.n, "N_r": report.N_r, "N_t": report.N_t}
    for name, bucket in report.buckets.items():
        row[f"recall[{name}]"] = bucket.recall
        row[f"precision[{name}]"] = bucket.precision
        row[f"f1[{name}]"] = bucket.f1
    return row


def evaluate_rung(state: AblationState) -> AblationState:
    config = state["rungs"][state["index"]]
    checkpoint = state["current"]
    model, params, vocabulary = load_model(checkpoint)
    phrases = phrases_from_surfaces(state["bias_list"], vocabulary)
    references = {u.id: u.reference for u in state["test_set"]}
    buckets = parse_buckets(state["buckets"])

    def evaluate(settings: DecodeSettings):
        results = decode_dataset(model, params, vocabulary, state["test_set"], phrases, settings,
                                 threads=state["threads"])
        return score_corpus(references, {r.id: r.tokens for r in results}, state["bias_list"], buckets)

    base = state["decode"]
    rows = list(state["rows"])
    rows.append(_row(config.name, "N", config, None,
                     evaluate(base.model_copy(update={"bias": False, "fusion": FusionMethod.NONE,
                                                      "beta": 0.0, "trie": False}))))
    fusion_on = config.fusion.method != FusionMethod.NONE
    betas = list(config.fusion.beta_sweep) if fusion_on else [None]
    for beta in betas:
        settings = base.model_copy(update={"bias": True, "fusion": config.fusion.method,
                                           "beta": beta or 0.0, "trie": config.trie})
        rows.append(_row(config.name, "Y", config, beta, evaluate(settings)))
    logger.info(f"📊 {config.name}: {len(betas) + 1} rows")
    return {**state, "rows": rows, "index": state["index"] + 1}


def next_rung(state: AblationState) -> str:
    return "train" if state["index"] < len(state["rungs"]) else END


def create_ablation_graph():
    """Create the train -> evaluate -> next rung workflow"""

    workflow = StateGraph(AblationState)

    workflow.add_node("train", train_rung)
    workflow.add_node("evaluate", evaluate_rung)

    workflow.set_entry_point("train")
    workflow.add_edge("train", "evaluate")
    workflow.add_conditional_edges("evaluate", next_rung, {"train": "train", END: END})

    return workflow.compile()


def run_ablation(ladder: AblationLadder, train_set: Sequence[Utterance], test_set: Sequence[Utterance],
                 vocabulary: Vocabulary, bias_list: Sequence[str], threads: int = 1) -> pd.DataFrame:
    """Train and evaluate every rung; one bias=N row plus bias=Y rows (one per beta for fusion rungs)"""
    rungs = ladder.model_configs()
    if not rungs:
        raise ConfigError("Ablation ladder has no rungs")
    graph = create_ablation_graph()
    initial_state = {
        "rungs": rungs,
        "index": 0,
        "train_set": list(train_set),
        "test_set": list(test_set),
        "vocabulary": vocabulary,
        "bias_list": list(bias_list),
        "decode": ladder.decode,
        "buckets": ladder.buckets,
        "threads": threads,
        "trained": {},
        "current": None,
        "rows": [],
    }
    result = graph.invoke(initial_state, config={"recursion_limit": 2 * len(rungs) + 5})
    return pd.DataFrame(result["rows"])


def ablation_document(ladder: AblationLadder, table: pd.DataFrame) -> Dict[str, Any]:
    records = json.loads(table.to_json(orient="records"))
    return {"kind": "ablation", "version": FORMAT_VERSION, "ladder": ladder.name, "rows": records}
