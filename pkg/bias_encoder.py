"""
Bias Encoder
Encodes the bias-phrase list into an attention memory, one entry per phrase
(coarse) or one entry per phrase character (fine), preceded by the learnable
no-bias entry. Also hosts the gated recurrent cell and the self-attention
block reused by the audio encoder and the decoder.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from errors import DimensionError, LengthError, LoadError, VocabularyError
from numerics import FLOAT, ParamStore, sigmoid
from vocabulary import Vocabulary

logger = logging.getLogger(__name__)

CellState = Tuple[np.ndarray, np.ndarray]


class RecurrentCell:
    """
    Gated recurrent cell with explicit (cell, hidden) state

    Gate pre-activations are W [h_prev : x] + b, gates ordered input, forget,
    output, candidate.
    """

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int):
        self.prefix = prefix
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim

    def register(self, params: ParamStore) -> None:
        fan_in = self.input_dim + self.hidden_dim
        params.create(f"{self.prefix}.W", (4 * self.hidden_dim, fan_in), fan_in=fan_in)
        params.create(f"{self.prefix}.b", (4 * self.hidden_dim,), fan_in=fan_in)

    def initial_state(self) -> CellState:
        return np.zeros(self.hidden_dim, dtype=FLOAT), np.zeros(self.hidden_dim, dtype=FLOAT)

    def forward(self, params: ParamStore, x: np.ndarray, state: CellState):
        cell, hidden = state
        if x.shape != (self.input_dim,) or hidden.shape != (self.hidden_dim,) or cell.shape != (self.hidden_dim,):
            raise DimensionError(
                f"{self.prefix}: input {x.shape} / state {cell.shape},{hidden.shape} do not match "
                f"({self.input_dim},) / ({self.hidden_dim},)")
        H = self.hidden_dim
        z = np.concatenate([hidden, x])
        a = params[f"{self.prefix}.W"] @ z + params[f"{self.prefix}.b"]
        i = sigmoid(a[:H])
        f = sigmoid(a[H:2 * H])
        o = sigmoid(a[2 * H:3 * H])
        g = np.tanh(a[3 * H:])
        new_cell = f * cell + i * g
        squashed = np.tanh(new_cell)
        new_hidden = o * squashed
        cache = (z, cell, i, f, o, g, squashed)
        return (new_cell, new_hidden), cache

    def backward(self, params: ParamStore, cache, d_cell: np.ndarray, d_hidden: np.ndarray):
        """Return (d_x, d_cell_prev, d_hidden_prev)"""
        z, cell, i, f, o, g, squashed = cache
        H = self.hidden_dim
        d_o = d_hidden * squashed
        d_c = d_cell + d_hidden * o * (1.0 - squashed * squashed)
        d_i = d_c * g
        d_g = d_c * i
        d_f = d_c * cell
        d_cell_prev = d_c * f
        d_a = np.concatenate([
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_o * o * (1.0 - o),
            d_g * (1.0 - g * g),
        ])
        params.accumulate(f"{self.prefix}.W", np.outer(d_a, z))
        params.accumulate(f"{self.prefix}.b", d_a)
        d_z = params[f"{self.prefix}.W"].T @ d_a
        return d_z[H:], d_cell_prev, d_z[:H]


def recurrent_step(x_t: np.ndarray, state: CellState, params: ParamStore,
                   prefix: str = "bias.fwd") -> CellState:
    """One gated update of the cell registered under `prefix`; returns (cell, hidden)"""
    W = params[f"{prefix}.W"]
    hidden_dim = W.shape[0] // 4
    cell = RecurrentCell(prefix, W.shape[1] - hidden_dim, hidden_dim)
    new_state, _ = cell.forward(params, np.asarray(x_t, dtype=FLOAT), state)
    return new_state


class RecurrentLayer:
    """A recurrent cell unrolled over a sequence, optionally right-to-left"""

    def __init__(self, prefix: str, input_dim: int, hidden_dim: int, reverse: bool = False):
        self.cell = RecurrentCell(prefix, input_dim, hidden_dim)
        self.reverse = reverse

    def register(self, params: ParamStore) -> None:
        self.cell.register(params)

    def forward(self, params: ParamStore, inputs: np.ndarray):
        """inputs (n, input_dim) -> outputs (n, hidden_dim) aligned with input positions"""
        n = inputs.shape[0]
        order = range(n - 1, -1, -1) if self.reverse else range(n)
        outputs = np.zeros((n, self.cell.hidden_dim), dtype=FLOAT)
        caches = []
        state = self.cell.initial_state()
        for t in order:
            state, cache = self.cell.forward(params, inputs[t], state)
            outputs[t] = state[1]
            caches.append((t, cache))
        return outputs, caches

    def backward(self, params: ParamStore, caches, d_outputs: np.ndarray) -> np.ndarray:
        d_inputs = np.zeros((d_outputs.shape[0], self.cell.input_dim), dtype=FLOAT)
        d_cell = np.zeros(self.cell.hidden_dim, dtype=FLOAT)
        d_hidden = np.zeros(self.cell.hidden_dim, dtype=FLOAT)
        for t, cache in reversed(caches):
            d_x, d_cell, d_hidden = self.cell.backward(params, cache, d_cell, d_outputs[t] + d_hidden)
            d_inputs[t] = d_x
        return d_inputs


class SelfAttentionBlock:
    """Single-head scaled dot-product self-attention plus tanh feed-forward, both residual"""

    def __init__(self, prefix: str, dim: int, ff_dim: int):
        self.prefix = prefix
        self.dim = dim
        self.ff_dim = ff_dim

    def register(self, params: ParamStore) -> None:
        p, d = self.prefix, self.dim
        for name in ("W_q", "W_k", "W_v", "W_o"):
            params.create(f"{p}.{name}", (d, d), fan_in=d)
        params.create(f"{p}.W_1", (self.ff_dim, d), fan_in=d)
        params.create(f"{p}.b_1", (self.ff_dim,), fan_in=d)
        params.create(f"{p}.W_2", (d, self.ff_dim), fan_in=self.ff_dim)
        params.create(f"{p}.b_2", (d,), fan_in=self.ff_dim)

    def forward(self, params: ParamStore, X: np.ndarray):
        if X.ndim != 2 or X.shape[0] == 0:
            raise LengthError("Self-attention needs a non-empty input sequence")
        if X.shape[1] != self.dim:
            raise DimensionError(f"{self.prefix}: input dim {X.shape[1]} != {self.dim}")
        p = self.prefix
        Q = X @ params[f"{p}.W_q"].T
        K = X @ params[f"{p}.W_k"].T
        V = X @ params[f"{p}.W_v"].T
        scores = Q @ K.T / np.sqrt(self.dim)
        scores = scores - scores.max(axis=1, keepdims=True)
        A = np.exp(scores)
        A = A / A.sum(axis=1, keepdims=True)
        O = A @ V
        Y1 = X + O @ params[f"{p}.W_o"].T
        Hh = np.tanh(Y1 @ params[f"{p}.W_1"].T + params[f"{p}.b_1"])
        Y = Y1 + Hh @ params[f"{p}.W_2"].T + params[f"{p}.b_2"]
        cache = (X, Q, K, V, A, O, Y1, Hh)
        return Y, A, cache

    def backward(self, params: ParamStore, cache, d_Y: np.ndarray) -> np.ndarray:
        p = self.prefix
        X, Q, K, V, A, O, Y1, Hh = cache

        params.accumulate(f"{p}.W_2", d_Y.T @ Hh)
        params.accumulate(f"{p}.b_2", d_Y.sum(axis=0))
        d_pre = (d_Y @ params[f"{p}.W_2"]) * (1.0 - Hh * Hh)
        params.accumulate(f"{p}.W_1", d_pre.T @ Y1)
        params.accumulate(f"{p}.b_1", d_pre.sum(axis=0))
        d_Y1 = d_Y + d_pre @ params[f"{p}.W_1"]

        d_X = d_Y1.copy()
        params.accumulate(f"{p}.W_o", d_Y1.T @ O)
        d_O = d_Y1 @ params[f"{p}.W_o"]

        d_A = d_O @ V.T
        d_V = A.T @ d_O
        d_scores = A * (d_A - np.sum(d_A * A, axis=1, keepdims=True)) / np.sqrt(self.dim)
        d_Q = d_scores @ K
        d_K = d_scores.T @ Q

        params.accumulate(f"{p}.W_q", d_Q.T @ X)
        params.accumulate(f"{p}.W_k", d_K.T @ X)
        params.accumulate(f"{p}.W_v", d_V.T @ X)
        d_X += d_Q @ params[f"{p}.W_q"] + d_K @ params[f"{p}.W_k"] + d_V @ params[f"{p}.W_v"]
        return d_X


def self_attention_block(inputs: Sequence[np.ndarray], params: ParamStore,
                         prefix: str = "bias.sa") -> List[np.ndarray]:
    """Apply the self-attention block registered under `prefix` to a sequence of vectors"""
    if len(inputs) == 0:
        raise LengthError("Self-attention needs a non-empty input sequence")
    X = np.vstack([np.asarray(x, dtype=FLOAT) for x in inputs])
    ff_dim = params[f"{prefix}.W_1"].shape[0]
    block = SelfAttentionBlock(prefix, X.shape[1], ff_dim)
    Y, _, _ = block.forward(params, X)
    return list(Y)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table (length, dim)"""
    pe = np.zeros((length, dim), dtype=FLOAT)
    position = np.arange(length)[:, None]
    div_term = np.exp(np.arange(0, dim, 2) * -(np.log(10000.0) / dim))
    pe[:, 0::2] = np.sin(position * div_term)
    pe[:, 1::2] = np.cos(position * div_term[:dim // 2])
    return pe


class EncoderKind(str, Enum):
    RECURRENT = "recurrent"
    BIDIRECTIONAL = "bidirectional"
    SELF_ATTENTION = "self_attention"


class Granularity(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


class EncoderVariant(BaseModel):
    kind: EncoderKind = Field(default=EncoderKind.RECURRENT, description="Bias encoder architecture")
    embed_dim: int = Field(default=16, ge=1, description="Character embedding width")
    hidden_dim: int = Field(default=32, ge=2, description="Width of each memory entry")
    ff_dim: int = Field(default=32, ge=1, description="Feed-forward width (self-attention only)")
    positional_encoding: bool = Field(default=True, description="Add sinusoidal positions (self-attention only)")

    @model_validator(mode="after")
    def validate_widths(self):
        if self.kind == EncoderKind.BIDIRECTIONAL and self.hidden_dim % 2:
            raise ValueError("bidirectional bias encoder needs an even hidden_dim")
        return self


@dataclass(frozen=True)
class BiasPhrase:
    tokens: Tuple[int, ...]
    surface: str

    def __post_init__(self):
        if not self.tokens:
            raise LengthError("Bias phrase must contain at least one token")
        if len(self.tokens) != len(self.surface):
            raise VocabularyError(f"Phrase {self.surface!r} does not round-trip to {len(self.tokens)} tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def chars(self) -> Tuple[str, ...]:
        return tuple(self.surface)

    @classmethod
    def from_surface(cls, surface: str, vocabulary: Vocabulary) -> "BiasPhrase":
        return cls(tuple(vocabulary.encode(list(surface))), surface)

    @classmethod
    def from_tokens(cls, tokens: Sequence[int], vocabulary: Vocabulary) -> "BiasPhrase":
        return cls(tuple(int(t) for t in tokens), "".join(vocabulary.decode(tokens)))


def phrases_from_surfaces(surfaces: Sequence[str], vocabulary: Vocabulary) -> List[BiasPhrase]:
    """Build phrases from bias-list lines, rejecting duplicates"""
    seen = set()
    phrases = []
    for surface in surfaces:
        if surface in seen:
            raise LoadError(f"Duplicate bias phrase {surface!r}")
        seen.add(surface)
        phrases.append(BiasPhrase.from_surface(surface, vocabulary))
    return phrases


@dataclass
class BiasMemory:
    """Encoded bias list; entry 0 is always the no-bias vector"""
    entries: np.ndarray
    owners: List[Optional[Tuple[int, Optional[int]]]]
    granularity: Granularity
    phrases: Tuple[BiasPhrase, ...]
    cache: Any = field(default=None, repr=False, compare=False)

    no_bias_index: int = 0

    def __len__(self) -> int:
        return self.entries.shape[0]

    def entry_index(self, phrase_index: int, position: Optional[int] = None) -> int:
        """Memory row for (phrase, position) (position ignored in coarse mode)"""
        if self.granularity == Granularity.COARSE:
            return phrase_index + 1
        offset = 1 + sum(len(p) for p in self.phrases[:phrase_index])
        return offset + int(position)

    def symbol_of_entry(self) -> List[Optional[int]]:
        """Vocabulary id each entry emits; coarse entries emit their first character"""
        symbols: List[Optional[int]] = [None]
        for owner in self.owners[1:]:
            phrase_index, position = owner
            symbols.append(self.phrases[phrase_index].tokens[position if position is not None else 0])
        return symbols

    def labels(self) -> List[str]:
        out = ["<no-bias>"]
        for phrase_index, position in self.owners[1:]:
            phrase = self.phrases[phrase_index]
            out.append(phrase.surface if position is None else f"{phrase.surface}[{position}]")
        return out


class BiasEncoder:
    """Character embedding + encoder variant + no-bias vector, parameters under `bias.*`"""

    def __init__(self, variant: EncoderVariant, vocab_size: int):
        self.variant = variant
        self.vocab_size = vocab_size
        E, Z = variant.embed_dim, variant.hidden_dim
        self.layers: List[RecurrentLayer] = []
        self.block: Optional[SelfAttentionBlock] = None
        if variant.kind == EncoderKind.RECURRENT:
            self.layers = [RecurrentLayer("bias.fwd", E, Z)]
        elif variant.kind == EncoderKind.BIDIRECTIONAL:
            self.layers = [RecurrentLayer("bias.fwd", E, Z // 2),
                           RecurrentLayer("bias.bwd", E, Z // 2, reverse=True)]
        else:
            self.block = SelfAttentionBlock("bias.sa", Z, variant.ff_dim)

    @property
    def dim(self) -> int:
        return self.variant.hidden_dim

    def register(self, params: ParamStore) -> None:
        E, Z = self.variant.embed_dim, self.variant.hidden_dim
        params.create("bias.embed", (self.vocab_size, E), fan_in=E)
        params.create("bias.no_bias", (Z,), fan_in=Z)
        for layer in self.layers:
            layer.register(params)
        if self.block is not None:
            params.create("bias.in.W", (Z, E), fan_in=E)
            params.create("bias.in.b", (Z,), fan_in=E)
            self.block.register(params)

    def _encode_phrase(self, params: ParamStore, phrase: BiasPhrase):
        tokens = np.asarray(phrase.tokens)
        if np.any(tokens < 0) or np.any(tokens >= self.vocab_size):
            raise VocabularyError(f"Phrase {phrase.surface!r} has tokens outside vocabulary of size {self.vocab_size}")
        X = params["bias.embed"][tokens]
        if self.block is not None:
            X0 = X @ params["bias.in.W"].T + params["bias.in.b"]
            if self.variant.positional_encoding:
                X0 = X0 + positional_encoding(len(tokens), self.dim)
            Y, _, block_cache = self.block.forward(params, X0)
            return Y, Y[-1], ("self_attention", tokens, X, block_cache)

        outputs = []
        layer_caches = []
        for layer in self.layers:
            out, caches = layer.forward(params, X)
            outputs.append(out)
            layer_caches.append(caches)
        if len(self.layers) == 1:
            fine = outputs[0]
            coarse = outputs[0][-1]
        else:
            fine = np.hstack(outputs)
            coarse = np.concatenate([outputs[0][-1], outputs[1][0]])
        return fine, coarse, ("recurrent", tokens, X, layer_caches)

    def encode(self, params: ParamStore, phrases: Sequence[BiasPhrase], granularity: Granularity) -> BiasMemory:
        granularity = Granularity(granularity)
        rows = [params["bias.no_bias"].copy()]
        owners: List[Optional[Tuple[int, Optional[int]]]] = [None]
        caches = []
        for k, phrase in enumerate(phrases):
            fine, coarse, cache = self._encode_phrase(params, phrase)
            caches.append(cache)
            if granularity == Granularity.COARSE:
                rows.append(coarse)
                owners.append((k, None))
            else:
                rows.extend(fine)
                owners.extend((k, j) for j in range(len(phrase)))
        return BiasMemory(entries=np.vstack(rows), owners=owners, granularity=granularity,
                          phrases=tuple(phrases), cache=caches)

    def backward(self, params: ParamStore, memory: BiasMemory, d_entries: np.ndarray) -> None:
        """Accumulate gradients of the memory rows into the encoder parameters"""
        params.accumulate("bias.no_bias", d_entries[0])
        row = 1
        for phrase, cache in zip(memory.phrases, memory.cache):
            n = len(phrase)
            kind, tokens, X, inner = cache
            if memory.granularity == Granularity.FINE:
                d_fine = d_entries[row:row + n]
                row += n
                d_coarse = None
            else:
                d_fine = None
                d_coarse = d_entries[row]
                row += 1

            if kind == "self_attention":
                d_Y = np.zeros((n, self.dim), dtype=FLOAT) if d_fine is None else d_fine.copy()
                if d_coarse is not None:
                    d_Y[-1] += d_coarse
                d_X0 = self.block.backward(params, inner, d_Y)
                params.accumulate("bias.in.W", d_X0.T @ X)
                params.accumulate("bias.in.b", d_X0.sum(axis=0))
                d_X = d_X0 @ params["bias.in.W"]
            else:
                d_X = np.zeros_like(X)
                widths = [layer.cell.hidden_dim for layer in self.layers]
                offset = 0
                for li, (layer, caches) in enumerate(zip(self.layers, inner)):
                    w = widths[li]
                    if d_fine is not None:
                        d_out = d_fine[:, offset:offset + w].copy()
                    else:
                        d_out = np.zeros((n, w), dtype=FLOAT)
                        # coarse: forward layer's last step, backward layer's first step
                        d_out[-1 if not layer.reverse else 0] += d_coarse[offset:offset + w]
                    d_X += layer.backward(params, caches, d_out)
                    offset += w
            embed_grad = np.zeros_like(params["bias.embed"])
            np.add.at(embed_grad, tokens, d_X)
            params.accumulate("bias.embed", embed_grad)


def _encoder_for(variant: EncoderVariant, params: ParamStore) -> BiasEncoder:
    return BiasEncoder(variant, params["bias.embed"].shape[0])


def encode_coarse(phrases: Sequence[BiasPhrase], variant: EncoderVariant, params: ParamStore) -> BiasMemory:
    """One final-state embedding per phrase, after the no-bias entry"""
    return _encoder_for(variant, params).encode(params, phrases, Granularity.COARSE)


def encode_fine(phrases: Sequence[BiasPhrase], variant: EncoderVariant, params: ParamStore) -> BiasMemory:
    """One embedding per phrase character, after the no-bias entry"""
    return _encoder_for(variant, params).encode(params, phrases, Granularity.FINE)
