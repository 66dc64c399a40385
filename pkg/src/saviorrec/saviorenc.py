"""Behavior-aware multimodal item encoder trained on co-click pairs.

Each modality passes through its own MLP, the two outputs are fused and a
projection head maps the result to the item embedding. Training maximizes
the agreement of co-clicked items against in-batch negatives (InfoNCE over
cosine similarity).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DegenerateBatchError, DivergenceError
from .io import read_jsonl, write_jsonl
from .numerics import (
    MLP,
    Adagrad,
    Linear,
    Module,
    Tensor,
    backward,
    concat,
    l2_normalize,
    logsumexp,
    matmul,
    no_grad,
    param_rng,
    softmax,
    swapaxes,
)
from .numerics import checkpoint
from .synthgen import ItemCatalog, Item, PairSet

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    d_enc: int = 64
    d_fuse: int = 64
    d_z: int = 32
    fusion: str = "mlp"
    tau: float = 0.07
    epochs: int = 40
    batch_pairs: int = 256
    lr_start: float = 0.005
    lr_end: float = 0.0005

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.fusion not in ("mlp", "transformer"):
            raise ConfigError(f"fusion must be 'mlp' or 'transformer', got {self.fusion!r}")
        if self.batch_pairs < 2:
            raise ConfigError("batch_pairs must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class TokenFusion(Module):
    """One pre-norm-free transformer block over the two modality tokens, mean-pooled."""

    def __init__(self, d_enc: int, d_fuse: int, rng: np.random.Generator):
        self.query = Linear(d_enc, d_enc, rng)
        self.key = Linear(d_enc, d_enc, rng)
        self.value = Linear(d_enc, d_enc, rng)
        self.ffn = MLP([d_enc, d_fuse, d_fuse], rng)
        self.skip = Linear(d_enc, d_fuse, rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        # tokens: (B, 2, d_enc)
        d = tokens.shape[-1]
        scores = matmul(self.query(tokens), swapaxes(self.key(tokens), -1, -2)) * (1.0 / np.sqrt(d))
        mixed = tokens + matmul(softmax(scores, axis=-1), self.value(tokens))
        out = self.ffn(mixed) + self.skip(mixed)
        return out.mean(axis=1)


class EncoderParams(Module):
    def __init__(self, d_modality_a: int, d_modality_b: int, config: EncoderConfig, seed: int):
        config.validate()
        self.f_a = MLP([d_modality_a, config.d_enc, config.d_enc], param_rng(seed, "encoder.f_a"))
        self.f_b = MLP([d_modality_b, config.d_enc, config.d_enc], param_rng(seed, "encoder.f_b"))
        rng = param_rng(seed, "encoder.g_fuse")
        if config.fusion == "transformer":
            self.g_fuse = TokenFusion(config.d_enc, config.d_fuse, rng)
        else:
            self.g_fuse = MLP([2 * config.d_enc, config.d_fuse, config.d_fuse], rng)
        self.g_proj = MLP([config.d_fuse, config.d_fuse, config.d_z], param_rng(seed, "encoder.g_proj"))
        self.fusion = config.fusion

    @property
    def d_z(self) -> int:
        return self.g_proj.out_dim

    def __call__(self, modality_a, modality_b) -> Tensor:
        a = Tensor(modality_a) if not isinstance(modality_a, Tensor) else modality_a
        b = Tensor(modality_b) if not isinstance(modality_b, Tensor) else modality_b
        if a.shape[-1] != self.f_a.in_dim or b.shape[-1] != self.f_b.in_dim:
            raise ContractError(f"modality dims {a.shape[-1]}/{b.shape[-1]} do not match encoder "
                                f"{self.f_a.in_dim}/{self.f_b.in_dim}")
        ha, hb = self.f_a(a), self.f_b(b)
        if self.fusion == "transformer":
            fused = self.g_fuse(concat([ha.reshape(-1, 1, ha.shape[-1]), hb.reshape(-1, 1, hb.shape[-1])], axis=1))
        else:
            fused = self.g_fuse(concat([ha, hb], axis=-1))
        return self.g_proj(fused)


def encode_item(params: EncoderParams, item: Item) -> np.ndarray:
    with no_grad():
        return params(item.modality_a[None, :], item.modality_b[None, :]).data[0]


def encode_catalog(params: EncoderParams, catalog: ItemCatalog) -> np.ndarray:
    with no_grad():
        return params(catalog.modality_a, catalog.modality_b).data


def info_nce_loss(z_batch: Tensor, positive_pairs, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarity.

    ``positive_pairs`` index rows of ``z_batch``. Every pair contributes two
    anchors; each anchor's candidates are all other rows of the batch.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    pairs = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] < 2:
        raise DegenerateBatchError("InfoNCE needs at least two pairs so that negatives exist")
    n = z_batch.shape[0]
    if pairs.min() < 0 or pairs.max() >= n:
        raise ContractError("pair index outside the batch")
    zn = l2_normalize(z_batch)
    sims = matmul(zn, zn.T) * (1.0 / tau)
    anchors = np.concatenate([pairs[:, 0], pairs[:, 1]])
    positives = np.concatenate([pairs[:, 1], pairs[:, 0]])
    rows = sims[anchors]
    self_mask = np.zeros((anchors.size, n))
    self_mask[np.arange(anchors.size), anchors] = -np.inf
    log_denominator = logsumexp(rows + self_mask, axis=-1)
    positive = rows[np.arange(anchors.size), positives]
    return (log_denominator - positive).mean()


@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    manifest: dict = field(default_factory=dict)
    frozen: bool = True

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.frozen:
            self.vectors.setflags(write=False)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, directory) -> None:
        directory = Path(directory)
        checkpoint.save(directory / "embeddings.bin", {"z": self.vectors})
        write_jsonl(directory / "embeddings_index.jsonl", ({"item_id": i, "row": i} for i in range(len(self))))

    @classmethod
    def load(cls, directory, manifest: dict | None = None) -> "EmbeddingTable":
        directory = Path(directory)
        z = checkpoint.load(directory / "embeddings.bin")["z"]
        index = list(read_jsonl(directory / "embeddings_index.jsonl"))
        rows = np.array([r["row"] for r in sorted(index, key=lambda r: r["item_id"])], dtype=np.int64)
        return cls(z[rows], manifest or {})


@dataclass
class EncoderHistory:
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _batches(pairs: np.ndarray, batch_pairs: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for start in range(0, len(order) - batch_pairs + 1, batch_pairs):
        yield pairs[order[start:start + batch_pairs]]


def batch_with_pairs(chosen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique item ids of a pair batch and the pairs re-indexed into that list."""
    items, inverse = np.unique(chosen.reshape(-1), return_inverse=True)
    return items, inverse.reshape(-1, 2)


def train_encoder(catalog: ItemCatalog, pairs: PairSet, config: EncoderConfig, seed: int
                  ) -> tuple[EncoderParams, EmbeddingTable, EncoderHistory]:
    config.validate()
    params = EncoderParams(catalog.modality_a.shape[1], catalog.modality_b.shape[1], config, seed)
    history = EncoderHistory()
    if config.epochs > 0 and len(pairs) < config.batch_pairs:
        raise ContractError(f"need at least {config.batch_pairs} pairs, got {len(pairs)}")
    steps_per_epoch = len(pairs) // config.batch_pairs if len(pairs) else 0
    opt = Adagrad(params.parameters(), config.lr_start, config.lr_end,
                  horizon=max(1, config.epochs * steps_per_epoch))
    rng = np.random.default_rng([seed, 11])
    for epoch in range(config.epochs):
        epoch_losses = []
        for chosen in _batches(pairs.pairs, config.batch_pairs, rng):
            items, local = batch_with_pairs(chosen)
            last_good = params.state_dict()
            opt.zero_grad()
            loss = info_nce_loss(params(catalog.modality_a[items], catalog.modality_b[items]), local, config.tau)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"encoder loss became {loss.item()} at epoch {epoch}", checkpoint=last_good)
            backward(loss)
            opt.step()
            epoch_losses.append(loss.item())
        history.losses.extend(epoch_losses)
        history.epoch_losses.append(float(np.mean(epoch_losses)))
        log.info("encoder epoch %d loss %.4f", epoch, history.epoch_losses[-1])
    table = EmbeddingTable(encode_catalog(params, catalog),
                           {"d_z": params.d_z, "encoder": config.to_dict(), "seed": seed})
    return params, table, history


def mean_pair_cosine(vectors: np.ndarray, pairs: np.ndarray) -> float:
    unit = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    return float(np.einsum("nd,nd->n", unit[pairs[:, 0]], unit[pairs[:, 1]]).mean())


def hitrate_at_k(table: EmbeddingTable | np.ndarray, transitions, k: int, chunk: int = 1024) -> float:
    """Fraction of (query, target) transitions whose target is in the query's top-k.

    Items are ranked by cosine to the query, excluding the query itself;
    ties are broken by lower item id.
    """
    vectors = table.vectors if isinstance(table, EmbeddingTable) else np.asarray(table)
    transitions = np.asarray(transitions, dtype=np.int64).reshape(-1, 2)
    if k < 1:
        raise ContractError("k must be >= 1")
    if len(transitions) == 0:
        raise ContractError("no transitions to evaluate")
    n = vectors.shape[0]
    if k >= n:
        log.warning("k=%d >= corpus size %d; capping at %d", k, n, n - 1)
        k = n - 1
    unit = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    ids = np.arange(n)
    hits = 0
    for start in range(0, len(transitions), chunk):
        q, t = transitions[start:start + chunk, 0], transitions[start:start + chunk, 1]
        sims = unit[q] @ unit.T
        target = sims[np.arange(q.size), t][:, None]
        ahead = (sims > target) | ((sims == target) & (ids[None, :] < t[:, None]))
        ahead[np.arange(q.size), q] = False
        hits += int((ahead.sum(axis=1) < k).sum())
    return hits / len(transitions)
