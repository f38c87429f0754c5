"""
Probability fusion of the bias-attention scores with the model distribution.

Bias scores are scaled by beta, model scores by 1 - beta * (1 - P_b[0]);
the scaled bias slots are then appended (pointer generator), appended and
grouped by symbol (merged pointer generator) or added onto their symbols'
vocabulary positions (interpolation).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from errors import ConfigError, ContractError, DimensionError, NumericError
from numerics import FLOAT

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9


class FusionMethod(str, Enum):
    NONE = "none"
    POINTER_GENERATOR = "pointer_generator"
    POINTER_GENERATOR_MERGED = "pointer_generator_merged"
    INTERPOLATION = "interpolation"


class FusionSettings(BaseModel):
    """Declarative fusion settings as they appear in model and ladder configs"""
    method: FusionMethod = Field(default=FusionMethod.NONE, description="How bias scores join the output")
    beta: float = Field(default=0.0, ge=0.0, le=1.0, description="Bias coefficient")
    beta_sweep: Tuple[float, ...] = Field(default=(0.1, 0.2, 0.3),
                                          description="Values evaluated by the ablation for fusion rungs")

    @field_validator("beta_sweep")
    @classmethod
    def validate_sweep(cls, v):
        if any(not 0.0 <= b <= 1.0 for b in v):
            raise ValueError("every beta in beta_sweep must lie in [0, 1]")
        return v


@dataclass(frozen=True)
class FusionConfig:
    beta: float
    method: FusionMethod
    symbol_of_entry: Optional[Tuple[Optional[int], ...]] = None

    @property
    def active(self) -> bool:
        return self.method != FusionMethod.NONE and self.beta != 0.0


@dataclass
class FusedDistribution:
    scores: np.ndarray
    index_meaning: List[int]
    vocab_size: int

    def vocab_marginal(self, vocab_size: int) -> np.ndarray:
        """Total probability per vocabulary symbol, summed over every index that emits it"""
        if vocab_size < self.vocab_size:
            raise DimensionError(f"vocab_size {vocab_size} is smaller than the model vocabulary {self.vocab_size}")
        symbols = np.asarray([resolve_emission(self, i) for i in range(len(self.index_meaning))], dtype=int)
        marginal = np.zeros(vocab_size, dtype=FLOAT)
        np.add.at(marginal, symbols, self.scores)
        return marginal


def _validate(config: FusionConfig, n_entries: int) -> None:
    if not 0.0 <= config.beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {config.beta}")
    method = FusionMethod(config.method)
    if method == FusionMethod.NONE:
        return
    symbols = config.symbol_of_entry
    if symbols is None or len(symbols) != n_entries or any(s is None for s in symbols[1:]):
        raise ConfigError("symbol_of_entry must map every non-no-bias memory entry to a vocabulary symbol")


def fuse(P_m: np.ndarray, P_b: np.ndarray, config: FusionConfig,
         allowed: Optional[np.ndarray] = None) -> FusedDistribution:
    """Combine model and bias distributions; disallowed entries hand their mass to no-bias"""
    P_m = np.asarray(P_m, dtype=FLOAT)
    P_b = np.asarray(P_b, dtype=FLOAT)
    if P_m.ndim != 1 or P_b.ndim != 1 or P_b.size == 0:
        raise DimensionError(f"fuse expects two vectors, got {P_m.shape} and {P_b.shape}")
    _validate(config, P_b.size)
    V = P_m.size
    identity = list(range(V))
    if not config.active:
        return FusedDistribution(scores=P_m, index_meaning=identity, vocab_size=V)

    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != P_b.shape:
            raise DimensionError(f"allowed mask {allowed.shape} for {P_b.size} entries")
        gated = np.where(allowed, P_b, 0.0)
        gated[0] = P_b[0] + P_b[~allowed].sum()
        P_b = gated

    beta = config.beta
    scaled_model = (1.0 - beta * (1.0 - P_b[0])) * P_m
    slots = beta * P_b[1:]
    symbols = [int(s) for s in config.symbol_of_entry[1:]]
    method = FusionMethod(config.method)

    if method == FusionMethod.POINTER_GENERATOR:
        scores = np.concatenate([scaled_model, slots])
        meaning = identity + symbols
    elif method == FusionMethod.POINTER_GENERATOR_MERGED:
        order: List[int] = []
        totals = {}
        for symbol, score in zip(symbols, slots):
            if symbol not in totals:
                order.append(symbol)
                totals[symbol] = 0.0
            totals[symbol] += score
        scores = np.concatenate([scaled_model, np.asarray([totals[s] for s in order], dtype=FLOAT)])
        meaning = identity + order
    else:
        scores = scaled_model.copy()
        np.add.at(scores, np.asarray(symbols, dtype=int), slots)
        meaning = identity

    total = float(scores.sum())
    if abs(total - 1.0) > SUM_TOLERANCE or np.any(scores < 0.0):
        raise NumericError(f"Fused distribution is not a distribution (sum {total!r})")
    return FusedDistribution(scores=scores, index_meaning=meaning, vocab_size=V)


def resolve_emission(fused: FusedDistribution, chosen_index: int) -> int:
    """Vocabulary symbol emitted when index `chosen_index` of the fused distribution is chosen"""
    if not 0 <= chosen_index < len(fused.index_meaning):
        raise ContractError(f"Index {chosen_index} outside fused distribution of size {len(fused.index_meaning)}")
    return fused.index_meaning[chosen_index]


def config_for_memory(settings: FusionSettings, symbol_of_entry: Sequence[Optional[int]],
                      beta: Optional[float] = None) -> FusionConfig:
    return FusionConfig(beta=settings.beta if beta is None else beta, method=settings.method,
                        symbol_of_entry=tuple(symbol_of_entry))
