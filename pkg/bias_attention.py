"""
Bias attention: scores bias-memory entries against the decoder query.
Covers the baseline query (decoder state only) and the augmented queries that
also splice in the previous-token embedding and the acoustic context.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Tuple

import numpy as np

from bias_encoder import BiasMemory
from errors import DimensionError
from numerics import FLOAT, AdditiveAttention, ParamStore

PREFIX = "bias_att"


class QueryMode(str, Enum):
    D_ONLY = "d_only"
    D_PLUS_Y = "d_plus_y"
    D_PLUS_Y_PLUS_CX = "d_plus_y_plus_cx"

    def query_dim(self, decoder_dim: int, embed_dim: int, context_dim: int) -> int:
        if self == QueryMode.D_ONLY:
            return decoder_dim
        if self == QueryMode.D_PLUS_Y:
            return decoder_dim + embed_dim
        return decoder_dim + embed_dim + context_dim


def compose_query(d_prev: np.ndarray, y_prev_embedding: np.ndarray, c_x: np.ndarray,
                  mode: QueryMode) -> np.ndarray:
    """Concatenate the components selected by `mode`, in order d, y, c_x"""
    mode = QueryMode(mode)
    parts = [np.asarray(d_prev, dtype=FLOAT)]
    if mode in (QueryMode.D_PLUS_Y, QueryMode.D_PLUS_Y_PLUS_CX):
        parts.append(np.asarray(y_prev_embedding, dtype=FLOAT))
    if mode == QueryMode.D_PLUS_Y_PLUS_CX:
        parts.append(np.asarray(c_x, dtype=FLOAT))
    for part in parts:
        if part.ndim != 1:
            raise DimensionError(f"Query components must be vectors, got shape {part.shape}")
    return np.concatenate(parts)


def split_query_grad(d_query: np.ndarray, mode: QueryMode, decoder_dim: int,
                     embed_dim: int) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Split a query gradient back into (d, y, c_x) parts; unused parts are None"""
    mode = QueryMode(mode)
    d_d = d_query[:decoder_dim]
    d_y = d_cx = None
    if mode in (QueryMode.D_PLUS_Y, QueryMode.D_PLUS_Y_PLUS_CX):
        d_y = d_query[decoder_dim:decoder_dim + embed_dim]
    if mode == QueryMode.D_PLUS_Y_PLUS_CX:
        d_cx = d_query[decoder_dim + embed_dim:]
    return d_d, d_y, d_cx


@dataclass
class BiasAttentionOut:
    alpha: np.ndarray
    c_z: np.ndarray
    logits: np.ndarray
    cache: Any = None


class BiasAttention(AdditiveAttention):
    """Additive attention over the bias memory; W_q width follows the query mode"""

    def __init__(self, memory_dim: int, query_dim: int, hidden_dim: int = 32):
        super().__init__(PREFIX, memory_dim, query_dim, hidden_dim)

    def attend(self, params: ParamStore, memory: BiasMemory, query: np.ndarray,
               mask: Optional[np.ndarray] = None) -> BiasAttentionOut:
        if mask is not None and not np.asarray(mask, dtype=bool)[memory.no_bias_index]:
            raise DimensionError("The no-bias entry can never be masked")
        alpha, c_z, logits, cache = self.forward(params, memory.entries, query, mask)
        return BiasAttentionOut(alpha=alpha, c_z=c_z, logits=logits, cache=cache)


def bias_attend(memory: BiasMemory, query: np.ndarray, mask: Optional[np.ndarray],
                params: ParamStore) -> BiasAttentionOut:
    W_q = params[f"{PREFIX}.W_q"]
    layer = BiasAttention(memory.entries.shape[1], W_q.shape[1], W_q.shape[0])
    return layer.attend(params, memory, np.asarray(query, dtype=FLOAT), mask)
