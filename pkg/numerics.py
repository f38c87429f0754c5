"""
Dense numerics for the contextual biasing model
Float64 vectors/matrices, activations, a parameter store with gradient buffers,
the additive attention layer and a central finite-difference gradient checker
"""

import hashlib
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit
from scipy.special import softmax as _scipy_softmax

from errors import DeterminismError, DimensionError, LengthError, NumericError

logger = logging.getLogger(__name__)

FLOAT = np.float64

# Additive logit for masked attention entries; keeps every value finite.
MASK_LOGIT = -1e30


def make_rng(seed: int) -> np.random.Generator:
    """Portable seeded generator (PCG64); same seed gives the same stream everywhere"""
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_vector(values, what: str = "vector") -> np.ndarray:
    """Convert to a finite float64 1-D array"""
    arr = np.asarray(values, dtype=FLOAT)
    if arr.ndim != 1:
        raise DimensionError(f"{what} must be 1-D, got shape {arr.shape}")
    check_finite(arr, what)
    return arr


def check_finite(arr: np.ndarray, what: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or Inf")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) over a non-empty finite vector"""
    z = np.asarray(logits, dtype=FLOAT)
    if z.ndim != 1:
        raise DimensionError(f"softmax expects a 1-D vector, got shape {z.shape}")
    if z.size == 0:
        raise LengthError("softmax of an empty vector")
    check_finite(z, "logits")
    return _scipy_softmax(z)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs"""
    return probs * (d_probs - np.dot(probs, d_probs))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DimensionError(message)


def additive_attention_logits(memory: np.ndarray, query: np.ndarray, W_h: np.ndarray,
                              W_q: np.ndarray, v: np.ndarray, b: np.ndarray
                              ) -> Tuple[np.ndarray, np.ndarray]:
    """Logits v·tanh(W_h h_i + W_q q + b) for every memory row; also returns the tanh activations"""
    memory = np.atleast_2d(np.asarray(memory, dtype=FLOAT))
    query = np.asarray(query, dtype=FLOAT)
    hidden = v.shape[0]
    _require(W_h.ndim == 2 and W_h.shape == (hidden, memory.shape[1]),
             f"W_h shape {W_h.shape} does not map memory dim {memory.shape[1]} to {hidden}")
    _require(W_q.ndim == 2 and W_q.shape == (hidden, query.shape[0]),
             f"W_q shape {W_q.shape} does not map query dim {query.shape[0]} to {hidden}")
    _require(b.shape == (hidden,), f"bias shape {b.shape} does not match hidden dim {hidden}")
    activation = np.tanh(memory @ W_h.T + (W_q @ query + b))
    return activation @ v, activation


def additive_attention_logit(h_i, query, W_h, W_q, v, b) -> float:
    """Single additive attention score v·tanh(W_h h_i + W_q q + b)"""
    h_i = as_vector(h_i, "memory vector")
    logits, _ = additive_attention_logits(h_i[None, :], as_vector(query, "query"),
                                          np.asarray(W_h, dtype=FLOAT), np.asarray(W_q, dtype=FLOAT),
                                          as_vector(v, "v"), as_vector(b, "b"))
    return float(logits[0])


def context_vector(weights, memory) -> np.ndarray:
    """Weighted sum of memory vectors"""
    weights = np.asarray(weights, dtype=FLOAT)
    memory = np.asarray(memory, dtype=FLOAT)
    if memory.ndim == 1:
        memory = memory[:, None]
    if weights.ndim != 1 or memory.ndim != 2 or weights.shape[0] != memory.shape[0]:
        raise DimensionError(
            f"{weights.shape[0] if weights.ndim == 1 else weights.shape} weights for "
            f"{memory.shape[0]} memory vectors")
    return weights @ memory


class ParamStore:
    """Named float64 parameters, each paired with a gradient buffer of the same shape"""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        self._rng = rng
        self._values: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def create(self, name: str, shape: Tuple[int, ...], fan_in: Optional[int] = None,
               init: str = "uniform") -> np.ndarray:
        """Register a parameter, uniform in ±1/sqrt(fan_in) or zeros"""
        if name in self._values:
            raise ValueError(f"Parameter {name} already exists")
        if init == "zeros":
            value = np.zeros(shape, dtype=FLOAT)
        elif init == "uniform":
            if self._rng is None:
                raise ValueError("ParamStore needs an rng for uniform initialization")
            bound = 1.0 / np.sqrt(fan_in if fan_in else shape[-1])
            value = self._rng.uniform(-bound, bound, size=shape).astype(FLOAT)
        else:
            raise ValueError(f"Unknown init {init}")
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=FLOAT)
        if value.shape != self._values[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name][...] = value

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, gradient: np.ndarray) -> None:
        self._grads[name] += gradient

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def global_grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self._grads.values())))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> "ParamStore":
        clone = ParamStore(self._rng)
        for name, value in self._values.items():
            clone._values[name] = value.copy()
            clone._grads[name] = self._grads[name].copy()
        return clone

    def digest(self) -> str:
        """SHA-256 over parameter names and raw bytes, in registration order"""
        h = hashlib.sha256()
        for name, value in self._values.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def to_dict(self) -> Dict[str, list]:
        return {name: value.tolist() for name, value in self._values.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, list], rng: Optional[np.random.Generator] = None) -> "ParamStore":
        store = cls(rng)
        for name, value in data.items():
            arr = np.asarray(value, dtype=FLOAT)
            check_finite(arr, name)
            store._values[name] = arr
            store._grads[name] = np.zeros_like(arr)
        return store


class AdditiveAttention:
    """
    Additive attention over a memory matrix (one row per entry)

    Parameters are registered under `<prefix>.W_h`, `.W_q`, `.b`, `.v`.
    """

    def __init__(self, prefix: str, memory_dim: int, query_dim: int, hidden_dim: int):
        self.prefix = prefix
        self.memory_dim = memory_dim
        self.query_dim = query_dim
        self.hidden_dim = hidden_dim

    def register(self, params: ParamStore) -> None:
        p = self.prefix
        params.create(f"{p}.W_h", (self.hidden_dim, self.memory_dim), fan_in=self.memory_dim)
        params.create(f"{p}.W_q", (self.hidden_dim, self.query_dim), fan_in=self.query_dim)
        params.create(f"{p}.b", (self.hidden_dim,), fan_in=self.hidden_dim)
        params.create(f"{p}.v", (self.hidden_dim,), fan_in=self.hidden_dim)

    def forward(self, params: ParamStore, memory: np.ndarray, query: np.ndarray,
                mask: Optional[np.ndarray] = None):
        """Returns (weights, context, logits, cache)"""
        p = self.prefix
        if memory.ndim != 2 or memory.shape[0] == 0:
            raise DimensionError(f"Attention memory must be a non-empty matrix, got {memory.shape}")
        logits, activation = additive_attention_logits(
            memory, query, params[f"{p}.W_h"], params[f"{p}.W_q"], params[f"{p}.v"], params[f"{p}.b"])
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (memory.shape[0],):
                raise DimensionError(f"Mask of shape {mask.shape} for {memory.shape[0]} entries")
            logits = logits + np.where(mask, 0.0, MASK_LOGIT)
        weights = softmax(logits)
        context = weights @ memory
        cache = (memory, query, activation, weights)
        return weights, context, logits, cache

    def backward(self, params: ParamStore, cache, d_weights: Optional[np.ndarray] = None,
                 d_context: Optional[np.ndarray] = None,
                 d_logits: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; return (d_memory, d_query)"""
        p = self.prefix
        memory, query, activation, weights = cache
        d_memory = np.zeros_like(memory)
        total_d_weights = np.zeros_like(weights)
        if d_weights is not None:
            total_d_weights += d_weights
        if d_context is not None:
            total_d_weights += memory @ d_context
            d_memory += np.outer(weights, d_context)
        g_logits = softmax_backward(weights, total_d_weights)
        if d_logits is not None:
            g_logits = g_logits + d_logits

        v = params[f"{p}.v"]
        W_h = params[f"{p}.W_h"]
        W_q = params[f"{p}.W_q"]
        params.accumulate(f"{p}.v", activation.T @ g_logits)
        d_pre = np.outer(g_logits, v) * (1.0 - activation * activation)
        params.accumulate(f"{p}.W_h", d_pre.T @ memory)
        d_memory += d_pre @ W_h
        d_pre_sum = d_pre.sum(axis=0)
        params.accumulate(f"{p}.W_q", np.outer(d_pre_sum, query))
        params.accumulate(f"{p}.b", d_pre_sum)
        d_query = W_q.T @ d_pre_sum
        return d_memory, d_query


class GradCheckReport(BaseModel):
    per_parameter: Dict[str, float] = Field(description="Max relative error per parameter")
    max_rel_error: float = Field(description="Max relative error over all checked entries")
    rel_tol: float = Field(description="Tolerance the check was run with")
    passed: bool = Field(description="max_rel_error below rel_tol")


def grad_check(loss_fn: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-4,
               rel_tol: float = 1e-3, atol: float = 1e-7,
               names: Optional[Iterable[str]] = None) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences

    `loss_fn(params)` must return the loss and accumulate its analytic
    gradient into `params` (it is called after `params.zero_grad()`).
    Relative error is |a-n| / max(|a|, |n|, 1e-8); entries where both
    magnitudes are below `atol` count as exact.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    params.zero_grad()
    base = loss_fn(params)
    analytic = {name: params.grad(name).copy() for name in params.names()}
    params.zero_grad()
    again = loss_fn(params)
    if base != again:
        raise DeterminismError(f"loss_fn returned {base} then {again} for identical parameters")

    per_parameter: Dict[str, float] = {}
    for name in (names if names is not None else params.names()):
        value = params[name]
        flat = value.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn(params)
            flat[i] = original - eps
            minus = loss_fn(params)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = grad_flat[i]
            if abs(a) < atol and abs(numeric) < atol:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_parameter[name] = worst
    params.zero_grad()

    max_rel = max(per_parameter.values(), default=0.0)
    if max_rel >= rel_tol:
        offenders = sorted(per_parameter.items(), key=lambda kv: -kv[1])[:3]
        logger.warning(f"Gradient check failed (max rel error {max_rel:.3e}); worst: {offenders}")
    return GradCheckReport(per_parameter=per_parameter, max_rel_error=max_rel,
                           rel_tol=rel_tol, passed=max_rel < rel_tol)
