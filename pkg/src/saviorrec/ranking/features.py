"""Sample assembly for the CTR ranker.

Item statistics (impressions, clicks, smoothed CTR) are looked up as of the
start of the sample's round, so a sample never sees its own outcome or any
later event.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..synthgen import InteractionLog, UserSet

N_STATS = 3
_STAT_SCALE = 5.0
_PRIOR_WEIGHT = 5.0


class ItemStatsIndex:
    """Cumulative per-item counts at the start of every round."""

    def __init__(self, log: InteractionLog):
        n_items, n_rounds = log.n_items, log.n_rounds
        imps = np.zeros((n_items, n_rounds + 1))
        clicks = np.zeros((n_items, n_rounds + 1))
        np.add.at(imps, (log.item_id, log.timestamp + 1), 1.0)
        np.add.at(clicks, (log.item_id, log.timestamp + 1), log.clicked)
        self.impressions = np.cumsum(imps, axis=1)
        self.clicks = np.cumsum(clicks, axis=1)
        total = self.impressions[:, -1].sum()
        self.prior_ctr = float(self.clicks[:, -1].sum() / total) if total else 0.0

    def lookup(self, items: np.ndarray, rounds: np.ndarray) -> np.ndarray:
        """Stats for ``items`` at ``rounds`` (broadcast together); shape ``items.shape + (3,)``.

        Negative item ids (padding) yield zeros.
        """
        items = np.asarray(items)
        valid = items >= 0
        safe = np.where(valid, items, 0)
        rounds = np.broadcast_to(rounds, items.shape)
        imps = self.impressions[safe, rounds]
        clk = self.clicks[safe, rounds]
        ctr = (clk + _PRIOR_WEIGHT * self.prior_ctr) / (imps + _PRIOR_WEIGHT)
        out = np.stack([np.log1p(imps) / _STAT_SCALE, np.log1p(clk) / _STAT_SCALE, ctr], axis=-1)
        return out * valid[..., None]


@dataclass
class RankingData:
    """Column-oriented samples plus the frozen per-item inputs they index."""

    user_id: np.ndarray
    profile: np.ndarray
    item_id: np.ndarray
    sequence: np.ndarray
    timestamp: np.ndarray
    base_pctr: np.ndarray
    label: np.ndarray
    stats: ItemStatsIndex
    item_pv: np.ndarray
    n_users: int
    n_items: int
    profile_cardinalities: tuple

    def __len__(self):
        return self.item_id.size

    def subset(self, mask) -> "RankingData":
        return RankingData(self.user_id[mask], self.profile[mask], self.item_id[mask], self.sequence[mask],
                           self.timestamp[mask], self.base_pctr[mask], self.label[mask], self.stats,
                           self.item_pv, self.n_users, self.n_items, self.profile_cardinalities)

    def batch(self, index: np.ndarray) -> dict:
        seq = self.sequence[index]
        t = self.timestamp[index]
        return {
            "user_id": self.user_id[index],
            "profile": self.profile[index],
            "item_id": self.item_id[index],
            "sequence": seq,
            "mask": (seq >= 0).astype(np.float64),
            "cand_stats": self.stats.lookup(self.item_id[index], t),
            "seq_stats": self.stats.lookup(seq, t[:, None]),
            "base_pctr": self.base_pctr[index],
            "label": self.label[index],
        }


def build_ranking_data(log: InteractionLog, users: UserSet, profile_cardinalities) -> RankingData:
    return RankingData(log.user_id, users.profile[log.user_id], log.item_id, log.sequence, log.timestamp,
                       log.base_pctr, log.clicked.astype(np.float64), ItemStatsIndex(log), log.item_pv(),
                       len(users), log.n_items, tuple(profile_cardinalities))
