"""
Contextual Decoder
Audio encoder, audio attention, the recurrent decoder step that consumes both the
acoustic and the bias context vectors, and beam search with optional probability
fusion and prefix-tree gating.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from bias_attention import BiasAttention, QueryMode, compose_query, split_query_grad
from bias_encoder import (BiasEncoder, BiasMemory, BiasPhrase, EncoderVariant, Granularity,
                          RecurrentCell, RecurrentLayer)
from errors import ConfigError, DimensionError, LengthError, NumericError
from fusion import FusionConfig, FusionMethod, fuse
from numerics import FLOAT, AdditiveAttention, ParamStore, softmax
from prefix_tree import PrefixTree, TrieCursor
from vocabulary import Vocabulary

logger = logging.getLogger(__name__)

DEFAULT_BEAM = 10


class ModelDims(BaseModel):
    feature_dim: int = Field(default=16, ge=1, description="Width of one input feature frame")
    embed_dim: int = Field(default=16, ge=1, description="Decoder token embedding width")
    audio_hidden: int = Field(default=16, ge=1, description="Audio encoder width per direction")
    decoder_dim: int = Field(default=32, ge=1, description="Decoder state width")
    attention_dim: int = Field(default=32, ge=1, description="Audio attention hidden width")
    bias_attention_dim: int = Field(default=32, ge=1, description="Bias attention hidden width")


@dataclass
class EncodedAudio:
    frames: np.ndarray
    cache: Any = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class DecoderStepState:
    d: np.ndarray
    cell: np.ndarray
    prev_token: int
    c_x: Optional[np.ndarray] = None
    c_z: Optional[np.ndarray] = None


@dataclass
class StepOutput:
    probs: np.ndarray
    logits: np.ndarray
    alpha: np.ndarray
    audio_weights: np.ndarray
    d: np.ndarray
    cell: np.ndarray
    c_x: np.ndarray
    c_z: np.ndarray
    cache: Any = None

    def next_state(self, token: int) -> DecoderStepState:
        return DecoderStepState(d=self.d, cell=self.cell, prev_token=int(token), c_x=self.c_x, c_z=self.c_z)


class AudioEncoder:
    """One bidirectional recurrent layer over the feature frames, no subsampling"""

    def __init__(self, feature_dim: int, hidden_dim: int):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.forward_layer = RecurrentLayer("audio.fwd", feature_dim, hidden_dim)
        self.backward_layer = RecurrentLayer("audio.bwd", feature_dim, hidden_dim, reverse=True)

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def register(self, params: ParamStore) -> None:
        self.forward_layer.register(params)
        self.backward_layer.register(params)

    def encode(self, params: ParamStore, features) -> EncodedAudio:
        X = np.asarray(features, dtype=FLOAT)
        if X.ndim != 2 or X.shape[0] == 0:
            raise LengthError("Audio encoder needs a non-empty sequence of feature frames")
        if X.shape[1] != self.feature_dim:
            raise DimensionError(f"Feature dim {X.shape[1]} != {self.feature_dim}")
        fwd, fwd_cache = self.forward_layer.forward(params, X)
        bwd, bwd_cache = self.backward_layer.forward(params, X)
        return EncodedAudio(frames=np.hstack([fwd, bwd]), cache=(fwd_cache, bwd_cache))

    def backward(self, params: ParamStore, audio: EncodedAudio, d_frames: np.ndarray) -> None:
        fwd_cache, bwd_cache = audio.cache
        H = self.hidden_dim
        self.forward_layer.backward(params, fwd_cache, d_frames[:, :H])
        self.backward_layer.backward(params, bwd_cache, d_frames[:, H:])


class DeepClasModel:
    """
    Holds the component layout and the parameter names of a full model.

    Per decode step: audio attention with d_{t-1}, query composition, bias
    attention, then the decoder cell over [d_{t-1} : y_{t-1} : c_x : c_z] and
    the output softmax.
    """

    def __init__(self, vocab_size: int, dims: ModelDims, variant: EncoderVariant,
                 query_mode: QueryMode = QueryMode.D_ONLY,
                 granularity: Granularity = Granularity.COARSE):
        self.vocab_size = vocab_size
        self.dims = dims
        self.variant = variant
        self.query_mode = QueryMode(query_mode)
        self.granularity = Granularity(granularity)

        self.audio_encoder = AudioEncoder(dims.feature_dim, dims.audio_hidden)
        C = self.audio_encoder.output_dim
        self.audio_attention = AdditiveAttention("audio_att", C, dims.decoder_dim, dims.attention_dim)
        self.bias_encoder = BiasEncoder(variant, vocab_size)
        Z = self.bias_encoder.dim
        query_dim = self.query_mode.query_dim(dims.decoder_dim, dims.embed_dim, C)
        self.bias_attention = BiasAttention(Z, query_dim, dims.bias_attention_dim)
        self.cell = RecurrentCell("dec.cell", dims.embed_dim + C + Z, dims.decoder_dim)

    @property
    def context_dim(self) -> int:
        return self.audio_encoder.output_dim

    def initialize(self, params: ParamStore) -> ParamStore:
        d = self.dims
        self.audio_encoder.register(params)
        self.audio_attention.register(params)
        params.create("dec.embed", (self.vocab_size, d.embed_dim), fan_in=d.embed_dim)
        self.bias_encoder.register(params)
        self.bias_attention.register(params)
        self.cell.register(params)
        params.create("dec.out.W", (self.vocab_size, d.decoder_dim), fan_in=d.decoder_dim)
        params.create("dec.out.b", (self.vocab_size,), fan_in=d.decoder_dim)
        logger.info(f"Initialized model with {params.num_parameters()} parameters")
        return params

    def encode_audio(self, params: ParamStore, features) -> EncodedAudio:
        return self.audio_encoder.encode(params, features)

    def encode_bias(self, params: ParamStore, phrases: Sequence[BiasPhrase]) -> BiasMemory:
        return self.bias_encoder.encode(params, phrases, self.granularity)

    def no_bias_memory(self, params: ParamStore) -> BiasMemory:
        return self.bias_encoder.encode(params, [], self.granularity)

    def initial_state(self, sos_id: int) -> DecoderStepState:
        return DecoderStepState(d=np.zeros(self.dims.decoder_dim, dtype=FLOAT),
                                cell=np.zeros(self.dims.decoder_dim, dtype=FLOAT),
                                prev_token=int(sos_id))

    def step(self, params: ParamStore, audio: EncodedAudio, memory: BiasMemory,
             state: DecoderStepState, mask: Optional[np.ndarray] = None) -> StepOutput:
        audio_weights, c_x, _, audio_cache = self.audio_attention.forward(params, audio.frames, state.d)
        y_emb = params["dec.embed"][state.prev_token]
        query = compose_query(state.d, y_emb, c_x, self.query_mode)
        bias_out = self.bias_attention.attend(params, memory, query, mask)
        x = np.concatenate([y_emb, c_x, bias_out.c_z])
        (cell, d), cell_cache = self.cell.forward(params, x, (state.cell, state.d))
        logits = params["dec.out.W"] @ d + params["dec.out.b"]
        probs = softmax(logits)
        cache = (state.prev_token, audio_cache, bias_out.cache, cell_cache, d)
        return StepOutput(probs=probs, logits=logits, alpha=bias_out.alpha, audio_weights=audio_weights,
                          d=d, cell=cell, c_x=c_x, c_z=bias_out.c_z, cache=cache)

    def step_backward(self, params: ParamStore, cache, d_logits: np.ndarray,
                      d_bias_logits: Optional[np.ndarray], d_hidden: np.ndarray, d_cell: np.ndarray):
        """
        Adjoint of `step`. Takes gradients w.r.t. the output logits, the bias
        attention logits and the step's (d, cell) from later steps; returns
        (d_d_prev, d_cell_prev, d_frames, d_entries).
        """
        prev_token, audio_cache, bias_cache, cell_cache, d = cache
        E = self.dims.embed_dim
        C = self.context_dim

        params.accumulate("dec.out.W", np.outer(d_logits, d))
        params.accumulate("dec.out.b", d_logits)
        d_hidden_total = d_hidden + params["dec.out.W"].T @ d_logits

        d_x, d_cell_prev, d_d_prev = self.cell.backward(params, cell_cache, d_cell, d_hidden_total)
        d_y = d_x[:E].copy()
        d_cx = d_x[E:E + C].copy()
        d_cz = d_x[E + C:]

        d_entries, d_query = self.bias_attention.backward(params, bias_cache, d_context=d_cz,
                                                          d_logits=d_bias_logits)
        q_d, q_y, q_cx = split_query_grad(d_query, self.query_mode, self.dims.decoder_dim, E)
        d_d_prev = d_d_prev + q_d
        if q_y is not None:
            d_y += q_y
        if q_cx is not None:
            d_cx += q_cx

        d_frames, d_audio_query = self.audio_attention.backward(params, audio_cache, d_context=d_cx)
        d_d_prev = d_d_prev + d_audio_query
        params.grad("dec.embed")[prev_token] += d_y
        return d_d_prev, d_cell_prev, d_frames, d_entries


def _dims_from_params(params: ParamStore) -> Tuple[int, int]:
    W = params["audio.fwd.W"]
    hidden = W.shape[0] // 4
    return W.shape[1] - hidden, hidden


def encode_audio(features, params: ParamStore) -> EncodedAudio:
    feature_dim, hidden = _dims_from_params(params)
    return AudioEncoder(feature_dim, hidden).encode(params, features)


def audio_attend(audio: EncodedAudio, d_prev: np.ndarray, params: ParamStore) -> Tuple[np.ndarray, np.ndarray]:
    W_h = params["audio_att.W_h"]
    layer = AdditiveAttention("audio_att", W_h.shape[1], params["audio_att.W_q"].shape[1], W_h.shape[0])
    weights, c_x, _, _ = layer.forward(params, audio.frames, np.asarray(d_prev, dtype=FLOAT))
    return weights, c_x


def decoder_step(state: DecoderStepState, c_x: np.ndarray, c_z: np.ndarray,
                 params: ParamStore) -> Tuple[np.ndarray, np.ndarray]:
    """Decoder recurrence over [d : y_emb : c_x : c_z], then the output softmax; returns (d, P_m)"""
    W = params["dec.cell.W"]
    hidden = W.shape[0] // 4
    cell = RecurrentCell("dec.cell", W.shape[1] - hidden, hidden)
    x = np.concatenate([params["dec.embed"][state.prev_token], np.asarray(c_x, dtype=FLOAT),
                        np.asarray(c_z, dtype=FLOAT)])
    (_, d), _ = cell.forward(params, x, (state.cell, state.d))
    return d, softmax(params["dec.out.W"] @ d + params["dec.out.b"])


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    state: DecoderStepState
    trie_cursor: Optional[TrieCursor] = None
    alphas: Tuple[np.ndarray, ...] = ()

    def output_tokens(self, eos_id: int) -> List[int]:
        if self.tokens and self.tokens[-1] == eos_id:
            return list(self.tokens[:-1])
        return list(self.tokens)


def default_max_len(audio: EncodedAudio) -> int:
    return 2 * audio.K + 10


def beam_search(model: DeepClasModel, params: ParamStore, audio: EncodedAudio, memory: BiasMemory,
                beam: int, config: FusionConfig, trie: Optional[PrefixTree] = None,
                sos_id: int = 0, eos_id: int = 1, max_len: Optional[int] = None) -> List[Hypothesis]:
    """Ranked, distinct hypotheses (summed log probability, no length normalization)"""
    if beam < 1:
        raise ConfigError(f"Beam width must be at least 1, got {beam}")
    max_len = max_len or default_max_len(audio)

    alive = [Hypothesis(tokens=(), log_prob=0.0, state=model.initial_state(sos_id),
                        trie_cursor=trie.initial_cursor() if trie is not None else None)]
    finished: List[Hypothesis] = []

    for _ in range(max_len):
        candidates = []
        outputs = []
        for h_index, hyp in enumerate(alive):
            allowed = trie.mask(hyp.trie_cursor, memory) if trie is not None else None
            out = model.step(params, audio, memory, hyp.state, mask=allowed)
            fused = fuse(out.probs, out.alpha, config, allowed=allowed)
            total = float(fused.scores.sum())
            if abs(total - 1.0) > 1e-9:
                raise NumericError(f"Expansion distribution sums to {total!r}")
            outputs.append((out, fused))
            with np.errstate(divide="ignore"):
                log_scores = np.log(fused.scores)
            # one child per emitted symbol: the best of the slots that emit it
            emitted = set()
            for idx in np.argsort(-log_scores, kind="stable"):
                if len(emitted) == beam or not np.isfinite(log_scores[idx]):
                    break
                symbol = fused.index_meaning[idx]
                if symbol in emitted:
                    continue
                emitted.add(symbol)
                candidates.append((hyp.log_prob + float(log_scores[idx]), h_index, int(idx)))

        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_alive = []
        for score, h_index, idx in candidates[:beam]:
            hyp = alive[h_index]
            out, fused = outputs[h_index]
            symbol = fused.index_meaning[idx]
            child = Hypothesis(tokens=hyp.tokens + (symbol,), log_prob=score,
                               state=out.next_state(symbol),
                               trie_cursor=trie.advance(hyp.trie_cursor, symbol) if trie is not None else None,
                               alphas=hyp.alphas + (out.alpha,))
            (finished if symbol == eos_id else next_alive).append(child)
        alive = next_alive

        if not alive:
            break
        if finished and max(h.log_prob for h in finished) >= alive[0].log_prob:
            break
    else:
        logger.debug(f"Beam search hit max length {max_len}; keeping {len(alive)} unfinished hypotheses")
        finished.extend(alive)

    finished.sort(key=lambda h: -h.log_prob)
    return finished


class BiasScope(str, Enum):
    ALL = "all"
    UTTERANCE = "utterance"


class DecodeSettings(BaseModel):
    beam: int = Field(default=DEFAULT_BEAM, description="Beam width")
    bias: bool = Field(default=True, description="Attend to the bias list (bias=Y) or only to no-bias (bias=N)")
    fusion: FusionMethod = Field(default=FusionMethod.NONE, description="Probability fusion method")
    beta: float = Field(default=0.0, ge=0.0, le=1.0, description="Bias coefficient for fusion")
    trie: bool = Field(default=False, description="Gate bias entries with the prefix tree")
    bias_scope: BiasScope = Field(default=BiasScope.ALL,
                                  description="Whole bias list, or only the entities of each utterance")
    max_len: Optional[int] = Field(default=None, description="Override of 2K+10")


@dataclass
class DecodeResult:
    id: str
    tokens: List[str]
    log_prob: float
    steps: List[str] = field(default_factory=list)
    alphas: List[np.ndarray] = field(default_factory=list, repr=False)
    memory: Optional[BiasMemory] = field(default=None, repr=False)

    def to_json_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "hypothesis": self.tokens, "log_prob": self.log_prob}


class Decoder:
    """Decodes utterances with shared read-only parameters and bias memory"""

    def __init__(self, model: DeepClasModel, params: ParamStore, vocabulary: Vocabulary,
                 settings: DecodeSettings):
        self.model = model
        self.params = params
        self.vocabulary = vocabulary
        self.settings = settings

    def prepare(self, phrases: Sequence[BiasPhrase]) -> Tuple[BiasMemory, Optional[PrefixTree], FusionConfig]:
        s = self.settings
        if not s.bias:
            memory = self.model.no_bias_memory(self.params)
            return memory, None, FusionConfig(beta=0.0, method=FusionMethod.NONE)
        memory = self.model.encode_bias(self.params, phrases)
        trie = None
        if s.trie:
            v = self.vocabulary
            trie = PrefixTree(phrases, skip_symbols=(v.sos_id, v.eos_id, v.bias_tag_id))
        config = FusionConfig(beta=s.beta, method=s.fusion, symbol_of_entry=tuple(memory.symbol_of_entry()))
        return memory, trie, config

    def decode(self, utterance_id: str, features, phrases: Sequence[BiasPhrase],
               prepared=None) -> DecodeResult:
        memory, trie, config = prepared if prepared is not None else self.prepare(phrases)
        audio = self.model.encode_audio(self.params, features)
        v = self.vocabulary
        ranked = beam_search(self.model, self.params, audio, memory, self.settings.beam, config, trie,
                             sos_id=v.sos_id, eos_id=v.eos_id, max_len=self.settings.max_len)
        best = ranked[0]
        return DecodeResult(id=utterance_id, tokens=v.decode(best.output_tokens(v.eos_id)),
                            log_prob=best.log_prob, steps=v.decode(best.tokens),
                            alphas=list(best.alphas), memory=memory)


def utterance_phrases(utterance, vocabulary: Vocabulary) -> List[BiasPhrase]:
    """Distinct entity phrases of one utterance, in order of appearance"""
    seen = set()
    phrases = []
    for start, end in utterance.entities:
        surface = "".join(utterance.reference[start:end])
        if surface not in seen:
            seen.add(surface)
            phrases.append(BiasPhrase.from_surface(surface, vocabulary))
    return phrases


def decode_utterance(model: DeepClasModel, params: ParamStore, vocabulary: Vocabulary, utterance,
                     phrases: Sequence[BiasPhrase], settings: DecodeSettings) -> DecodeResult:
    decoder = Decoder(model, params, vocabulary, settings)
    if settings.bias_scope == BiasScope.UTTERANCE:
        phrases = utterance_phrases(utterance, vocabulary)
    return decoder.decode(utterance.id, utterance.features, phrases)


def decode_dataset(model: DeepClasModel, params: ParamStore, vocabulary: Vocabulary, utterances,
                   phrases: Sequence[BiasPhrase], settings: DecodeSettings, threads: int = 1) -> List[DecodeResult]:
    """Decode every utterance; results keep input order regardless of `threads`"""
    decoder = Decoder(model, params, vocabulary, settings)
    shared = decoder.prepare(phrases) if settings.bias_scope == BiasScope.ALL else None

    def run(utterance) -> DecodeResult:
        if shared is not None:
            return decoder.decode(utterance.id, utterance.features, phrases, prepared=shared)
        return decoder.decode(utterance.id, utterance.features, utterance_phrases(utterance, vocabulary))

    logger.info(f"Decoding {len(utterances)} utterances (beam {settings.beam}, threads {threads})")
    if threads <= 1:
        return [run(u) for u in utterances]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, utterances))


def attention_map(result: DecodeResult) -> Dict[str, Any]:
    """Bias-attention matrix of a decoded utterance: one row per emitted step (including <eos>)"""
    labels = result.memory.labels() if result.memory is not None else ["<no-bias>"]
    return {
        "id": result.id,
        "tokens": result.steps,
        "bias_entries": labels,
        "alpha": [[float(a) for a in row] for row in result.alphas],
    }
