"""
Training objectives: attention cross-entropy over the reference, bias loss over
the bias-attention scores, bias-target construction and the combined total.
"""

import math
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from bias_encoder import BiasPhrase, Granularity
from errors import AlignmentError, ConfigError, NumericError
from prefix_tree import PrefixTree

BiasTargets = List[int]


class LossBreakdown(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    l_att: float = Field(description="Attention (cross-entropy) loss")
    l_bias: float = Field(description="Bias-attention loss")
    l_ctc: Optional[float] = Field(default=None, description="CTC branch; not trained")
    lam: float = Field(default=0.0, alias="lambda", description="CTC weight, fixed at 0")
    total: float = Field(description="l_att + l_bias")


def phrase_offsets(phrases: Sequence[BiasPhrase]) -> List[int]:
    """First fine-grained memory row of each phrase (row 0 is no-bias)"""
    offsets = []
    row = 1
    for phrase in phrases:
        offsets.append(row)
        row += len(phrase)
    return offsets


def build_bias_targets(reference: Sequence[int], phrases: Sequence[BiasPhrase],
                       granularity: Granularity, tree: Optional[PrefixTree] = None) -> BiasTargets:
    """Target memory entry per reference position; leftmost-longest occurrences win, 0 elsewhere"""
    granularity = Granularity(granularity)
    targets = [0] * len(reference)
    if not phrases:
        return targets
    tree = tree or PrefixTree(phrases)
    offsets = phrase_offsets(phrases)
    for occ in tree.find_occurrences(reference):
        for j in range(len(occ)):
            if granularity == Granularity.COARSE:
                targets[occ.start + j] = occ.phrase_index + 1
            else:
                targets[occ.start + j] = offsets[occ.phrase_index] + j
    return targets


def attention_loss(step_distributions: Sequence[np.ndarray], reference: Sequence[int]) -> float:
    """-sum_t log P_t[reference_t]"""
    if len(step_distributions) != len(reference):
        raise AlignmentError(f"{len(step_distributions)} step distributions for {len(reference)} reference tokens")
    total = 0.0
    for probs, token in zip(step_distributions, reference):
        total -= math.log(float(probs[int(token)]))
    return total


def bias_loss(alphas: Sequence[np.ndarray], targets: BiasTargets) -> float:
    """-sum_t log alpha_t[k_t] (summed over steps)"""
    if len(alphas) != len(targets):
        raise AlignmentError(f"{len(alphas)} bias-attention steps for {len(targets)} targets")
    total = 0.0
    for t, (alpha, k) in enumerate(zip(alphas, targets)):
        if not 0 <= k < len(alpha):
            raise AlignmentError(f"step {t}: target entry {k} outside memory of {len(alpha)} entries")
        total -= math.log(float(alpha[k]))
    return total


def _one_hot_residual(probs: np.ndarray, index: int) -> np.ndarray:
    grad = np.array(probs, dtype=np.float64, copy=True)
    grad[index] -= 1.0
    return grad


def attention_loss_grad_logits(probs: np.ndarray, target: int) -> np.ndarray:
    """d(-log softmax(z)[target]) / dz"""
    return _one_hot_residual(probs, target)


def bias_loss_grad_logits(alpha: np.ndarray, target: int) -> np.ndarray:
    return _one_hot_residual(alpha, target)


def total_loss(l_att: float, l_bias: float, lam: float = 0.0) -> LossBreakdown:
    if lam != 0.0:
        raise ConfigError("Only lambda = 0 is supported (no CTC branch)")
    if not (math.isfinite(l_att) and math.isfinite(l_bias)):
        raise NumericError(f"Non-finite loss terms: l_att={l_att}, l_bias={l_bias}")
    return LossBreakdown(l_att=l_att, l_bias=l_bias, lam=lam, total=l_att + l_bias)
