"""
Metrics
Character error rate from a minimal edit alignment, and bias-word recall /
precision / F1 with per-length buckets.
"""

import logging
from collections import Counter
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from bias_encoder import BiasPhrase
from errors import AlignmentError, ConfigError
from prefix_tree import PrefixTree
from vocabulary import BIAS_TAG

logger = logging.getLogger(__name__)

DEFAULT_BUCKETS = "2-16,2-4,5-16"

Bucket = Tuple[str, int, int]


def edit_distance_counts(reference: Sequence, hypothesis: Sequence) -> Tuple[int, int, int]:
    """(S, D, I) of a minimal unit-cost alignment; the backtrace prefers substitutions"""
    n, m = len(reference), len(hypothesis)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1, dp[i, j - 1] + 1)

    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            if dp[i, j] == dp[i - 1, j - 1] + cost:
                S += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return S, D, I


class _PhraseMatcher:
    """Leftmost-longest phrase occurrence counting over character strings"""

    def __init__(self, bias_list: Sequence[str]):
        self.surfaces = list(dict.fromkeys(bias_list))
        self.index: Dict[str, int] = {}
        for surface in self.surfaces:
            for ch in surface:
                self.index.setdefault(ch, len(self.index))
        phrases = [BiasPhrase(tuple(self.index[ch] for ch in s), s) for s in self.surfaces]
        self.tree = PrefixTree(phrases)

    def counts(self, tokens: Sequence[str]) -> Counter:
        ids = [self.index.get(t, -1) if len(t) == 1 else -1 for t in tokens]
        return Counter(self.surfaces[o.phrase_index] for o in self.tree.find_occurrences(ids))


def count_bias_hits(reference: Sequence[str], hypothesis: Sequence[str],
                    bias_list: Sequence[str]) -> Tuple[int, int, int]:
    """(n, N_r, N_t): per-phrase min of reference/hypothesis occurrence counts, hypothesis and reference totals"""
    matcher = _PhraseMatcher(bias_list)
    ref_counts = matcher.counts(strip_tags(reference))
    hyp_counts = matcher.counts(strip_tags(hypothesis))
    n = sum(min(ref_counts[p], hyp_counts[p]) for p in matcher.surfaces)
    return n, sum(hyp_counts.values()), sum(ref_counts.values())


def strip_tags(tokens: Sequence[str]) -> List[str]:
    return [t for t in tokens if t != BIAS_TAG]


def ratio(numerator: float, denominator: float) -> Optional[float]:
    return None if denominator == 0 else numerator / denominator


def f1_score(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


class BiasReport(BaseModel):
    n: int = Field(default=0, description="Correctly recognized bias-word occurrences")
    N_r: int = Field(default=0, description="Bias-word occurrences in the hypotheses")
    N_t: int = Field(default=0, description="Bias-word occurrences in the references")
    recall: Optional[float] = None
    precision: Optional[float] = None
    f1: Optional[float] = None

    @classmethod
    def from_counts(cls, n: int, N_r: int, N_t: int) -> "BiasReport":
        recall = ratio(n, N_t)
        precision = ratio(n, N_r)
        return cls(n=n, N_r=N_r, N_t=N_t, recall=recall, precision=precision, f1=f1_score(precision, recall))


class MetricsReport(BaseModel):
    cer: Optional[float] = None
    S: int = 0
    D: int = 0
    I: int = 0
    N: int = 0
    recall: Optional[float] = None
    precision: Optional[float] = None
    f1: Optional[float] = None
    n: int = 0
    N_r: int = 0
    N_t: int = 0
    buckets: Dict[str, BiasReport] = Field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return self.model_dump()


class UtteranceScore(BaseModel):
    id: str
    S: int
    D: int
    I: int
    N: int
    ref_counts: Dict[str, int] = Field(default_factory=dict)
    hyp_counts: Dict[str, int] = Field(default_factory=dict)


def parse_buckets(spec: str) -> List[Bucket]:
    """"2-16,2-4,5-16" -> [("2-16", 2, 16), ...]"""
    buckets = []
    for item in (part.strip() for part in spec.split(",")):
        if not item:
            continue
        try:
            low, high = (int(x) for x in item.split("-"))
        except ValueError:
            raise ConfigError(f"Bucket {item!r} must look like LOW-HIGH")
        if low < 1 or high < low:
            raise ConfigError(f"Bucket {item!r} is empty")
        buckets.append((item, low, high))
    return buckets


def score_utterance(utterance_id: str, reference: Sequence[str], hypothesis: Sequence[str],
                    matcher: _PhraseMatcher) -> UtteranceScore:
    ref = strip_tags(reference)
    hyp = strip_tags(hypothesis)
    S, D, I = edit_distance_counts(ref, hyp)
    return UtteranceScore(id=utterance_id, S=S, D=D, I=I, N=len(ref),
                          ref_counts=dict(matcher.counts(ref)), hyp_counts=dict(matcher.counts(hyp)))


def bucketed_report(scores: Sequence[UtteranceScore], bias_list: Sequence[str],
                    buckets: Sequence[Bucket]) -> MetricsReport:
    """Aggregate per-utterance scores; each occurrence counts toward the buckets of its phrase length"""
    S = sum(s.S for s in scores)
    D = sum(s.D for s in scores)
    I = sum(s.I for s in scores)
    N = sum(s.N for s in scores)

    def totals(selected: Sequence[str]) -> Tuple[int, int, int]:
        n = N_r = N_t = 0
        for s in scores:
            for phrase in selected:
                r = s.ref_counts.get(phrase, 0)
                h = s.hyp_counts.get(phrase, 0)
                n += min(r, h)
                N_r += h
                N_t += r
        return n, N_r, N_t

    phrases = list(dict.fromkeys(bias_list))
    overall = BiasReport.from_counts(*totals(phrases))
    bucket_reports = {
        name: BiasReport.from_counts(*totals([p for p in phrases if low <= len(p) <= high]))
        for name, low, high in buckets
    }
    return MetricsReport(cer=ratio(S + D + I, N), S=S, D=D, I=I, N=N,
                         recall=overall.recall, precision=overall.precision, f1=overall.f1,
                         n=overall.n, N_r=overall.N_r, N_t=overall.N_t, buckets=bucket_reports)


def score_corpus(references: Mapping[str, Sequence[str]], hypotheses: Mapping[str, Sequence[str]],
                 bias_list: Sequence[str], buckets: Optional[Sequence[Bucket]] = None) -> MetricsReport:
    missing = sorted(set(references) ^ set(hypotheses))
    if missing:
        raise AlignmentError(f"Reference and hypothesis ids differ: {', '.join(missing[:10])}"
                             + (" ..." if len(missing) > 10 else ""))
    buckets = parse_buckets(DEFAULT_BUCKETS) if buckets is None else buckets
    matcher = _PhraseMatcher(bias_list)
    scores = [score_utterance(uid, references[uid], hypotheses[uid], matcher) for uid in references]
    report = bucketed_report(scores, bias_list, buckets)
    logger.info(f"Scored {len(scores)} utterances: CER {report.cer}, recall {report.recall}, "
                f"precision {report.precision}")
    return report
