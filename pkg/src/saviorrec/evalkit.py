"""Ranking metrics, popularity-bucketed reports and experiment analysis."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError
from .io import dumps

log = logging.getLogger(__name__)

PV_EDGES = (0, 100, 500, 1000, 5000, 10000, 20000, math.inf)


@dataclass(frozen=True)
class PvBucketing:
    """Half-open page-view intervals ``[edges[k], edges[k+1])``."""

    edges: tuple = PV_EDGES

    def __post_init__(self):
        e = self.edges
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError(f"bucket edges must be strictly increasing, got {e}")
        if e[0] != 0 or e[-1] != math.inf:
            raise ValueError("bucket edges must start at 0 and end at inf to partition the naturals")

    @property
    def labels(self) -> list[str]:
        def fmt(x):
            return "inf" if x == math.inf else str(int(x))
        return [f"[{fmt(a)},{fmt(b)})" for a, b in zip(self.edges, self.edges[1:])]

    def __len__(self):
        return len(self.edges) - 1

    def assign(self, pv) -> np.ndarray:
        pv = np.asarray(pv, dtype=np.float64)
        if np.any(pv < 0):
            raise ValueError("page views must be non-negative")
        return np.searchsorted(np.asarray(self.edges[1:-1], dtype=np.float64), pv, side="right")


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """O(P*N) pair-counting AUC; reference implementation for :func:`auc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes")
    wins = 0.0
    for s in pos:
        wins += np.count_nonzero(s > neg) + 0.5 * np.count_nonzero(s == neg)
    return wins / (pos.size * neg.size)


@dataclass
class BucketStat:
    auc: float | None
    samples: int
    clicks: int


@dataclass
class EvalReport:
    total_auc: float
    buckets: dict[str, BucketStat]
    metadata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return sum(b.samples for b in self.buckets.values())

    def to_dict(self) -> dict:
        return {
            "total_auc": self.total_auc,
            "buckets": {k: vars(v) for k, v in self.buckets.items()},
            "metadata": self.metadata,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        # JSON writers sort keys; restore interval order
        order = sorted(d["buckets"], key=lambda k: float(k[1:].split(",")[0]))
        return cls(d["total_auc"], {k: BucketStat(**d["buckets"][k]) for k in order},
                   d.get("metadata", {}), d.get("extras", {}))

    def to_jsonl(self) -> str:
        lines = [dumps({"bucket": "total", "auc": self.total_auc, "samples": self.sample_count,
                        "clicks": sum(b.clicks for b in self.buckets.values()), **self.metadata})]
        for label, b in self.buckets.items():
            lines.append(dumps({"bucket": label, "auc": b.auc, "samples": b.samples, "clicks": b.clicks}))
        return "\n".join(lines) + "\n"

    def format_table(self, name: str = "model") -> str:
        labels = list(self.buckets)
        header = ["Method", "Total AUC", *labels]
        row = [name, _pct(self.total_auc), *(_pct(self.buckets[k].auc) for k in labels)]
        return format_rows([header, row])


def _pct(x) -> str:
    return "undef" if x is None else f"{100 * x:.2f}"


def format_rows(rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def grouped_auc(scores, labels, item_pv, bucketing: PvBucketing | None = None,
                metadata: dict | None = None) -> EvalReport:
    """AUC overall and within each page-view bucket of the candidate item.

    Buckets lacking positives or negatives get ``auc=None``.
    """
    bucketing = bucketing or PvBucketing()
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    which = bucketing.assign(item_pv)
    buckets = {}
    for k, label in enumerate(bucketing.labels):
        mask = which == k
        y = labels[mask]
        try:
            value = auc(scores[mask], y)
        except UndefinedMetricError:
            value = None
        buckets[label] = BucketStat(value, int(mask.sum()), int(y.sum()))
    return EvalReport(auc(scores, labels), buckets, dict(metadata or {}))


def pooled_auc(scores, labels, item_pv, bucket_labels: list[str], bucketing: PvBucketing | None = None) -> float:
    """AUC over the union of the named buckets."""
    bucketing = bucketing or PvBucketing()
    which = bucketing.assign(item_pv)
    wanted = [bucketing.labels.index(b) for b in bucket_labels]
    mask = np.isin(which, wanted)
    return auc(np.asarray(scores)[mask], np.asarray(labels)[mask])


def layer_importance_report(codebook: np.ndarray, fusion_weight: np.ndarray) -> dict:
    """Per-layer importance of an alignment codebook and its fusion layer.

    ``codebook`` has shape (L, K, d); ``fusion_weight`` is the first fusion
    layer's (L*d, hidden) weight. Each family is the per-layer mean row L2
    norm, normalized to sum to one. A family whose norms are all zero is
    reported as zeros.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    n_layers, _, dim = codebook.shape
    fusion_weight = np.asarray(fusion_weight, dtype=np.float64)
    if fusion_weight.shape[0] != n_layers * dim:
        raise ValueError(f"fusion weight rows {fusion_weight.shape[0]} != L*d = {n_layers * dim}")
    code_norms = np.linalg.norm(codebook, axis=-1).mean(axis=1)
    slices = fusion_weight.reshape(n_layers, dim, -1)
    fusion_norms = np.linalg.norm(slices, axis=-1).mean(axis=1)

    def normalize(v, family):
        total = v.sum()
        if total == 0:
            log.warning("%s norms are all zero (untrained?); reporting zeros", family)
            return np.zeros_like(v)
        return v / total

    codebook_scores = normalize(code_norms, "codebook")
    return {
        "codebook_norm": code_norms.tolist(),
        "fusion_norm": fusion_norms.tolist(),
        "codebook": codebook_scores.tolist(),
        "fusion": normalize(fusion_norms, "fusion").tolist(),
        "codebook_max_min_ratio": _ratio(codebook_scores),
    }


def _ratio(v: np.ndarray) -> float | None:
    if v.min() <= 0:
        return None if v.max() <= 0 else math.inf
    return float(v.max() / v.min())


@dataclass
class AblationResult:
    rows: dict  # tag -> EvalReport
    failures: dict  # tag -> message
    stream_hashes: dict

    @property
    def complete(self) -> bool:
        return not self.failures

    def delta(self, tag: str, reference: str = "full") -> float | None:
        if tag not in self.rows or reference not in self.rows:
            return None
        return self.rows[tag].total_auc - self.rows[reference].total_auc

    def bucket_drops(self, tag: str, reference: str = "full") -> dict:
        """Per-bucket ``reference - tag`` AUC, None where either side is undefined."""
        ref, other = self.rows[reference].buckets, self.rows[tag].buckets
        return {k: None if ref[k].auc is None or other[k].auc is None else ref[k].auc - other[k].auc
                for k in ref}

    def records(self) -> list[dict]:
        out = []
        for tag, report in self.rows.items():
            rec = {"tag": tag, "total_auc": report.total_auc, "delta_vs_full": self.delta(tag),
                   "stream_hash": self.stream_hashes.get(tag),
                   "buckets": {k: b.auc for k, b in report.buckets.items()}}
            if tag in FEATURE_REMOVALS and "full" in self.rows:
                rec["bucket_drop_vs_full"] = self.bucket_drops(tag)
            out.append(rec)
        for tag, message in self.failures.items():
            out.append({"tag": tag, "failed": message})
        return out

    def format_table(self) -> str:
        labels = list(next(iter(self.rows.values())).buckets) if self.rows else []
        rows = [["Method", "Total AUC", "Delta", *labels]]
        for tag, report in self.rows.items():
            d = self.delta(tag)
            rows.append([tag, _pct(report.total_auc), "n/a" if d is None else f"{100 * d:+.2f}",
                         *(_pct(report.buckets[k].auc) for k in labels)])
        for tag, message in self.failures.items():
            rows.append([tag, "FAILED", message[:40], *([""] * len(labels))])
        return format_rows(rows)


FEATURE_REMOVALS = ("no_id", "no_stats", "no_mm")


def ablation_suite(tags, runner) -> AblationResult:
    """Run ``runner(tag) -> (EvalReport, stream_hash)`` for each tag, in order.

    A member that raises is recorded as a failure; the remaining members
    still run. ``full`` is the reference for deltas.
    """
    rows, failures, hashes = {}, {}, {}
    for tag in tags:
        try:
            report, stream_hash = runner(tag)
        except Exception as exc:  # noqa: BLE001 - partial results are the contract
            log.error("ablation member %s failed: %s", tag, exc)
            failures[tag] = f"{type(exc).__name__}: {exc}"
            continue
        rows[tag] = report
        hashes[tag] = stream_hash
    if len(set(hashes.values())) > 1:
        log.warning("ablation members saw different sample streams: %s", hashes)
    return AblationResult(rows, failures, hashes)
