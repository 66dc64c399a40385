"""Synthetic catalog, users and impression logs with a known click model.

Items carry a unit-norm latent style. Two modality vectors are independent
linear views of that style plus a shared nuisance factor and per-view noise,
so behavior-relevant structure is recoverable from content but not handed
over for free. Users carry a unit-norm interest vector. Clicks follow

    p* = sigmoid(w_interest * <interest_u, style_i>
                 + w_sequence * sum_j a_j <style_{s_j}, style_i>
                 + w_popularity * log(popularity_i) + bias)

where ``s_j`` are the user's most recent clicks and ``a_j`` are normalized
recency weights.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evalkit
from .errors import ConfigError, UndefinedMetricError

log = logging.getLogger(__name__)


@dataclass
class SynthConfig:
    n_items: int = 5000
    n_users: int = 500
    n_impressions: int = 200_000
    n_rounds: int = 400
    d_style: int = 8
    n_style_clusters: int = 12
    style_jitter: float = 0.3
    d_modality: int = 24
    d_nuisance: int = 8
    nuisance_scale: float = 0.3
    modality_noise: float = 0.3
    popularity_exponent: float = 1.1
    user_activity_sigma: float = 0.5
    n_max: int = 20
    w_interest: float = 1.0
    w_sequence: float = 8.0
    w_popularity: float = 0.3
    bias: float = -5.0
    recency_decay: float = 1.0
    sigma_base: float = 0.15
    sigma_base_cold: float = 6.0
    cold_pv_scale: float = 100.0
    profile_cardinalities: tuple = (4, 6)
    session_window: int = 50
    min_coclick: int = 2
    eval_fraction: float = 0.1
    cold_pv_threshold: float | None = None

    def validate(self) -> None:
        problems = []
        if self.d_style < 2:
            problems.append("d_style must be >= 2")
        if self.n_items < 10:
            problems.append("n_items must be >= 10")
        for name in ("n_users", "n_impressions", "n_rounds", "d_modality", "n_max", "session_window",
                     "min_coclick"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n_style_clusters < 0 or self.style_jitter < 0:
            problems.append("n_style_clusters and style_jitter must be >= 0")
        if self.popularity_exponent <= 0:
            problems.append("popularity_exponent must be > 0")
        if not 0 < self.eval_fraction < 1:
            problems.append("eval_fraction must be in (0, 1)")
        if self.sigma_base < 0 or self.sigma_base_cold < 0:
            problems.append("sigma_base and sigma_base_cold must be >= 0")
        if not 0 < self.recency_decay <= 1:
            problems.append("recency_decay must be in (0, 1]")
        if problems:
            raise ConfigError("invalid synthgen config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown synthgen config fields: {sorted(unknown)}")
        if "profile_cardinalities" in known:
            known["profile_cardinalities"] = tuple(known["profile_cardinalities"])
        return cls(**known)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_cardinalities"] = list(self.profile_cardinalities)
        return d


@dataclass
class Item:
    item_id: int
    style: np.ndarray
    modality_a: np.ndarray
    modality_b: np.ndarray
    popularity: float


@dataclass
class ItemCatalog:
    style: np.ndarray
    modality_a: np.ndarray
    modality_b: np.ndarray
    popularity: np.ndarray

    def __len__(self):
        return self.style.shape[0]

    def item(self, item_id: int) -> Item:
        return Item(item_id, self.style[item_id], self.modality_a[item_id], self.modality_b[item_id],
                    float(self.popularity[item_id]))

    def records(self):
        for i in range(len(self)):
            yield {"item_id": i, "style": self.style[i], "modality_a": self.modality_a[i],
                   "modality_b": self.modality_b[i], "popularity": float(self.popularity[i])}

    @classmethod
    def from_records(cls, records) -> "ItemCatalog":
        records = sorted(records, key=lambda r: r["item_id"])
        return cls(np.array([r["style"] for r in records], dtype=np.float64),
                   np.array([r["modality_a"] for r in records], dtype=np.float64),
                   np.array([r["modality_b"] for r in records], dtype=np.float64),
                   np.array([r["popularity"] for r in records], dtype=np.float64))


@dataclass
class UserSet:
    interest: np.ndarray
    profile: np.ndarray
    activity: np.ndarray

    def __len__(self):
        return self.interest.shape[0]

    def records(self):
        for u in range(len(self)):
            yield {"user_id": u, "interest": self.interest[u], "profile": self.profile[u],
                   "activity": float(self.activity[u])}

    @classmethod
    def from_records(cls, records) -> "UserSet":
        records = sorted(records, key=lambda r: r["user_id"])
        return cls(np.array([r["interest"] for r in records], dtype=np.float64),
                   np.array([r["profile"] for r in records], dtype=np.int64),
                   np.array([r["activity"] for r in records], dtype=np.float64))


@dataclass
class InteractionLog:
    """Impressions in timestamp order; ``sequence`` rows hold the user's last
    clicked item ids before the impression's round, oldest first, padded with -1."""

    user_id: np.ndarray
    item_id: np.ndarray
    clicked: np.ndarray
    timestamp: np.ndarray
    p_true: np.ndarray
    base_pctr: np.ndarray
    sequence: np.ndarray
    n_items: int
    n_rounds: int

    def __len__(self):
        return self.user_id.size

    @property
    def seq_len(self) -> np.ndarray:
        return (self.sequence >= 0).sum(axis=1)

    def item_pv(self) -> np.ndarray:
        """Realized page views (impression count) per item."""
        return np.bincount(self.item_id, minlength=self.n_items)

    def subset(self, mask) -> "InteractionLog":
        return InteractionLog(self.user_id[mask], self.item_id[mask], self.clicked[mask],
                              self.timestamp[mask], self.p_true[mask], self.base_pctr[mask],
                              self.sequence[mask], self.n_items, self.n_rounds)

    def split_time(self, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
        """Boolean masks for the training window and the final evaluation window."""
        cut = eval_cutoff(self.n_rounds, eval_fraction)
        return self.timestamp < cut, self.timestamp >= cut

    def records(self):
        for k in range(len(self)):
            seq = self.sequence[k]
            yield {"user_id": int(self.user_id[k]), "item_id": int(self.item_id[k]),
                   "clicked": int(self.clicked[k]), "timestamp": int(self.timestamp[k]),
                   "p_true": float(self.p_true[k]), "base_pctr": float(self.base_pctr[k]),
                   "sequence_snapshot": seq[seq >= 0].tolist()}

    @classmethod
    def from_records(cls, records, n_items: int, n_rounds: int, n_max: int) -> "InteractionLog":
        records = list(records)
        seq = np.full((len(records), n_max), -1, dtype=np.int64)
        for k, r in enumerate(records):
            s = r["sequence_snapshot"]
            if s:
                seq[k, :len(s)] = s
        col = lambda key, dtype: np.array([r[key] for r in records], dtype=dtype)  # noqa: E731
        return cls(col("user_id", np.int64), col("item_id", np.int64), col("clicked", np.int64),
                   col("timestamp", np.int64), col("p_true", np.float64), col("base_pctr", np.float64),
                   seq, n_items, n_rounds)


@dataclass
class PairSet:
    """Unordered co-click pairs stored canonically with ``pairs[:, 0] < pairs[:, 1]``."""

    pairs: np.ndarray
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.pairs.shape[0]

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.pairs}

    def __contains__(self, pair) -> bool:
        a, b = sorted(int(x) for x in pair)
        return (a, b) in self.as_set()


def eval_cutoff(n_rounds: int, eval_fraction: float) -> int:
    return int(round(n_rounds * (1.0 - eval_fraction)))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _clustered_unit(config: SynthConfig, seed: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors, isotropic or jittered around shared cluster centers."""
    d = config.d_style
    if config.n_style_clusters == 0:
        return _unit_rows(rng.normal(size=(n, d)))
    centers = _unit_rows(np.random.default_rng([seed, 5]).normal(size=(config.n_style_clusters, d)))
    which = rng.integers(0, config.n_style_clusters, size=n)
    return _unit_rows(centers[which] + rng.normal(size=(n, d)) * config.style_jitter / np.sqrt(d))


def generate_catalog(config: SynthConfig, seed: int) -> ItemCatalog:
    config.validate()
    rng = np.random.default_rng([seed, 1])
    n, d = config.n_items, config.d_style
    style = _clustered_unit(config, seed, n, rng)
    dm = config.d_modality
    # each view: style part, shared nuisance part and noise with expected
    # squared norms 1, nuisance_scale**2 and modality_noise**2
    nuisance = rng.normal(size=(n, config.d_nuisance)) * config.nuisance_scale / np.sqrt(config.d_nuisance)
    views = []
    for _ in range(2):
        to_view = rng.normal(size=(d, dm)) / np.sqrt(dm)
        nuisance_map = rng.normal(size=(config.d_nuisance, dm)) / np.sqrt(dm) * np.sqrt(config.d_nuisance)
        noise = rng.normal(size=(n, dm)) * config.modality_noise / np.sqrt(dm)
        views.append(style @ to_view + nuisance @ nuisance_map + noise)
    popularity = rng.pareto(config.popularity_exponent, size=n) + 1.0
    return ItemCatalog(style, views[0], views[1], popularity)


def generate_users(config: SynthConfig, seed: int) -> UserSet:
    config.validate()
    rng = np.random.default_rng([seed, 2])
    interest = _clustered_unit(config, seed, config.n_users, rng)
    profile = np.stack([rng.integers(0, c, size=config.n_users) for c in config.profile_cardinalities], axis=1)
    activity = rng.lognormal(0.0, config.user_activity_sigma, size=config.n_users)
    return UserSet(interest, profile.astype(np.int64), activity)


def click_logits(config: SynthConfig, catalog: ItemCatalog, users: UserSet, user_ids, item_ids,
                 seq_items: np.ndarray) -> np.ndarray:
    """Ground-truth click logits for a batch of impressions.

    ``seq_items`` rows are oldest-first recent clicks padded with -1.
    """
    style = catalog.style[item_ids]
    interest_term = np.einsum("nd,nd->n", users.interest[user_ids], style)
    mask = seq_items >= 0
    seq_style = catalog.style[np.where(mask, seq_items, 0)]
    sims = np.einsum("nkd,nd->nk", seq_style, style)
    # newest entry is rightmost among the valid ones
    age = mask.sum(axis=1, keepdims=True) - 1 - np.arange(seq_items.shape[1])[None, :]
    weights = np.where(mask, config.recency_decay ** np.maximum(age, 0), 0.0)
    total = weights.sum(axis=1)
    seq_term = np.divide((weights * sims).sum(axis=1), total, out=np.zeros_like(total), where=total > 0)
    return (config.w_interest * interest_term + config.w_sequence * seq_term
            + config.w_popularity * np.log(catalog.popularity[item_ids]) + config.bias)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_interactions(catalog: ItemCatalog, users: UserSet, config: SynthConfig,
                          seed: int) -> InteractionLog:
    config.validate()
    rng = np.random.default_rng([seed, 3])
    n = config.n_impressions
    user_ids = rng.choice(len(users), size=n, p=users.activity / users.activity.sum())
    item_ids = rng.choice(len(catalog), size=n, p=catalog.popularity / catalog.popularity.sum())
    rounds = np.sort(rng.integers(0, config.n_rounds, size=n))
    base_noise = rng.normal(size=n)
    cold_noise = rng.normal(size=n)
    uniforms = rng.random(size=n)

    pv = np.bincount(item_ids, minlength=len(catalog)).astype(np.float64)
    n_max = config.n_max
    buffers = np.full((len(users), n_max), -1, dtype=np.int64)
    sequence = np.empty((n, n_max), dtype=np.int64)
    p_true = np.empty(n)
    clicked = np.empty(n, dtype=np.int64)

    starts = np.searchsorted(rounds, np.arange(config.n_rounds + 1))
    for t in range(config.n_rounds):
        lo, hi = starts[t], starts[t + 1]
        if lo == hi:
            continue
        us, its = user_ids[lo:hi], item_ids[lo:hi]
        snap = _left_align(buffers[us])
        sequence[lo:hi] = snap
        p = _sigmoid(click_logits(config, catalog, users, us, its, snap))
        c = (uniforms[lo:hi] < p).astype(np.int64)
        p_true[lo:hi] = p
        clicked[lo:hi] = c
        for k in np.flatnonzero(c):
            row = buffers[us[k]]
            row[:-1] = row[1:].copy()
            row[-1] = its[k]

    logit = np.log(p_true) - np.log1p(-p_true)
    coldness = config.cold_pv_scale / (config.cold_pv_scale + pv[item_ids])
    noisy = logit + config.sigma_base * base_noise + config.sigma_base_cold * coldness * cold_noise
    base = np.clip(_sigmoid(noisy), 1e-6, 1 - 1e-6)
    if config.sigma_base == 0 and config.sigma_base_cold == 0:
        base = p_true.copy()
    log.info("generated %d impressions, CTR %.4f", n, clicked.mean())
    return InteractionLog(user_ids.astype(np.int64), item_ids.astype(np.int64), clicked, rounds.astype(np.int64),
                          p_true, base, sequence, len(catalog), config.n_rounds)


def _left_align(seq: np.ndarray) -> np.ndarray:
    """Move valid (>= 0) entries of each row to the front, keeping their order."""
    valid = seq >= 0
    order = np.argsort(~valid, axis=1, kind="stable")
    return np.take_along_axis(seq, order, axis=1)


def mine_coclick_pairs(log_: InteractionLog, min_count: int = 2, window: int = 50) -> PairSet:
    """Item pairs clicked by the same user within ``window`` rounds.

    A pair's count is the number of distinct users that co-clicked it.
    """
    if len(log_) == 0:
        raise ValueError("cannot mine pairs from an empty log")
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    clicks = np.flatnonzero(log_.clicked == 1)
    order = np.lexsort((log_.timestamp[clicks], log_.user_id[clicks]))
    clicks = clicks[order]
    users, items, times = log_.user_id[clicks], log_.item_id[clicks], log_.timestamp[clicks]
    counts: dict[tuple[int, int], int] = defaultdict(int)
    bounds = np.flatnonzero(np.diff(users)) + 1
    for idx in np.split(np.arange(users.size), bounds):
        if idx.size < 2:
            continue
        it, tm = items[idx], times[idx]
        seen: set[tuple[int, int]] = set()
        right = np.searchsorted(tm, tm + window, side="right")
        for a in range(idx.size):
            for b in range(a + 1, right[a]):
                i, j = it[a], it[b]
                if i != j:
                    seen.add((i, j) if i < j else (j, i))
        for pair in seen:
            counts[pair] += 1
    kept = sorted(p for p, c in counts.items() if c >= min_count)
    if not kept:
        return PairSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    return PairSet(np.array(kept, dtype=np.int64), np.array([counts[p] for p in kept], dtype=np.int64))


def next_click_transitions(log_: InteractionLog, from_round: int = 0) -> np.ndarray:
    """(query item, next clicked item) pairs from consecutive clicks of each user.

    Only transitions whose target click happens at or after ``from_round``
    are returned; repeated clicks on the same item are skipped.
    """
    clicks = np.flatnonzero(log_.clicked == 1)
    order = np.lexsort((clicks, log_.timestamp[clicks], log_.user_id[clicks]))
    clicks = clicks[order]
    users, items, times = log_.user_id[clicks], log_.item_id[clicks], log_.timestamp[clicks]
    same_user = users[1:] == users[:-1]
    keep = same_user & (times[1:] >= from_round) & (items[1:] != items[:-1])
    return np.stack([items[:-1][keep], items[1:][keep]], axis=1)


def bayes_auc(log_: InteractionLog) -> float:
    """AUC of the true click probabilities against realized clicks."""
    if log_.clicked.min() == log_.clicked.max():
        raise UndefinedMetricError("Bayes AUC needs both clicked and unclicked impressions")
    return evalkit.auc(log_.p_true, log_.clicked)


def cold_item_mask(pv: np.ndarray, threshold: float | None) -> np.ndarray:
    """Items whose total PV is below ``threshold`` (all items when None)."""
    pv = np.asarray(pv)
    return np.ones(pv.shape, dtype=bool) if threshold is None else pv < threshold


@dataclass
class World:
    config: SynthConfig
    seed: int
    catalog: ItemCatalog
    users: UserSet
    log: InteractionLog
    pairs: PairSet

    @property
    def train_mask(self) -> np.ndarray:
        return self.log.split_time(self.config.eval_fraction)[0]

    @property
    def eval_mask(self) -> np.ndarray:
        return self.log.split_time(self.config.eval_fraction)[1]

    def manifest(self) -> dict:
        bucketing = evalkit.PvBucketing()
        pv = self.log.item_pv()
        hist = np.bincount(bucketing.assign(pv), minlength=len(bucketing))
        eval_log = self.log.subset(self.eval_mask)
        eval_pv = pv[eval_log.item_id]
        bayes_eval = evalkit.grouped_auc(eval_log.p_true, eval_log.clicked, eval_pv)
        return {
            "seed": self.seed,
            "synthgen": self.config.to_dict(),
            "n_impressions": len(self.log),
            "ctr": float(self.log.clicked.mean()),
            "n_pairs": len(self.pairs),
            "bucket_labels": bucketing.labels,
            "item_bucket_histogram": hist.tolist(),
            "bayes_auc": bayes_auc(self.log),
            "bayes_auc_eval": bayes_eval.total_auc,
            "bayes_auc_eval_buckets": {k: v.auc for k, v in bayes_eval.buckets.items()},
            "bayes_auc_eval_low_pv": evalkit.pooled_auc(eval_log.p_true, eval_log.clicked, eval_pv,
                                                        bucketing.labels[:2]),
        }


def generate_world(config: SynthConfig, seed: int) -> World:
    """Catalog, users, full log and training-window co-click pairs for one seed."""
    catalog = generate_catalog(config, seed)
    users = generate_users(config, seed)
    log_ = generate_interactions(catalog, users, config, seed)
    train, _ = log_.split_time(config.eval_fraction)
    pairs = mine_coclick_pairs(log_.subset(train), config.min_coclick, config.session_window)
    return World(config, seed, catalog, users, log_, pairs)
