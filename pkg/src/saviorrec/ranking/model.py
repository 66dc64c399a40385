"""Ranker components: modal-behavior alignment, target attention and the CTR head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ContractError, ShapeError
from ..numerics import (
    MLP,
    Module,
    Tensor,
    as_tensor,
    concat,
    l2_normalize,
    matmul,
    param_rng,
    reshape,
    sigmoid,
    softmax,
    take_rows,
    transpose,
)

ABLATIONS = ("full", "no_mba", "no_raw_mm", "no_bidir", "no_mm", "no_id", "no_stats")
SCORE_NORMS = ("none", "softmax")
BLOCK_ROLES = ("behavior", "modal", "modal2behavior", "behavior2modal")


@dataclass
class RankerConfig:
    d_id: int = 16
    d_user: int = 8
    d_profile: int = 4
    d_mba: int = 16
    mba_hidden: int = 32
    mba_norm_eps: float = 1.0
    heads: int = 2
    d_head: int = 8
    score_norm: str = "none"
    dnn_hidden: tuple = (64, 32)
    ablation: str = "full"
    epochs: int = 2
    batch_size: int = 256
    lr_start: float = 0.01
    lr_end: float = 0.001
    eval_batch_size: int = 4096

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.score_norm not in SCORE_NORMS:
            raise ConfigError(f"score_norm must be one of {SCORE_NORMS}, got {self.score_norm!r}")
        if self.heads < 1 or self.d_head < 1:
            raise ConfigError("heads and d_head must be >= 1")
        if self.mba_norm_eps <= 0:
            raise ConfigError("mba_norm_eps must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RankerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ranker config fields: {sorted(unknown)}")
        d = dict(d)
        if "dnn_hidden" in d:
            d["dnn_hidden"] = tuple(d["dnn_hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dnn_hidden"] = list(self.dnn_hidden)
        return d


# -- modal-behavior alignment ------------------------------------------------

class MbaParams(Module):
    """Trainable codebook indexed by semantic IDs plus the fusion MLP.

    The codebook starts at zero and the fusion MLP's output layer starts at
    zero, so the alignment vector is exactly zero before training.
    """

    def __init__(self, n_layers: int, codebook_size: int, dim: int, d_out: int, hidden: int, seed: int,
                 norm_eps: float = 1.0, init_codebook: np.ndarray | None = None):
        if init_codebook is None:
            book = np.zeros((n_layers * codebook_size, dim))
        else:
            init_codebook = np.asarray(init_codebook, dtype=np.float64)
            if init_codebook.shape != (n_layers, codebook_size, dim):
                raise ShapeError(f"initial codebook shape {init_codebook.shape} != {(n_layers, codebook_size, dim)}")
            book = init_codebook.reshape(n_layers * codebook_size, dim).copy()
        self.codebook = Tensor(book, requires_grad=True)
        # the first layer keeps a random bias: with a zero codebook and a zero
        # output layer, hidden units must be nonzero for any gradient to flow
        self.fusion = MLP([n_layers * dim, hidden, d_out], param_rng(seed, "mba.fusion"),
                          zero_last=init_codebook is None, random_bias=True)
        self.n_layers = n_layers
        self.codebook_size = codebook_size
        self.dim = dim
        self.norm_eps = norm_eps

    def codebook_stack(self) -> np.ndarray:
        return self.codebook.data.reshape(self.n_layers, self.codebook_size, self.dim)

    def alignment(self, codes: np.ndarray) -> Tensor:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != self.n_layers:
            raise ContractError(f"codes must have shape (B, {self.n_layers}), got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise ContractError(f"code index outside [0, {self.codebook_size})")
        rows = codes + np.arange(self.n_layers)[None, :] * self.codebook_size
        v = take_rows(self.codebook, rows)  # (B, L, d)
        v = reshape(v, (codes.shape[0], self.n_layers * self.dim))
        return self.fusion(l2_normalize(v, eps=self.norm_eps))


def mba_forward(z, codes, mba: MbaParams, skip: bool = True) -> Tensor:
    """Behavior-aligned embedding ``z + MLP(normalize(concat(codebook rows)))``."""
    codes = np.atleast_2d(codes)
    v_align = mba.alignment(codes)
    if not skip:
        return v_align
    return as_tensor(z) + v_align


# -- target attention ---------------------------------------------------------

class TABlock(Module):
    def __init__(self, d_query: int, d_key: int, d_value: int, heads: int, d_head: int,
                 rng: np.random.Generator):
        bound_q, bound_v = 1.0 / np.sqrt(d_query), 1.0 / np.sqrt(d_value)
        bound_k = 1.0 / np.sqrt(d_key)
        self.w_q = Tensor(rng.uniform(-bound_q, bound_q, (d_query, heads * d_head)), requires_grad=True)
        self.w_k = Tensor(rng.uniform(-bound_k, bound_k, (d_key, heads * d_head)), requires_grad=True)
        self.w_v = Tensor(rng.uniform(-bound_v, bound_v, (d_value, heads * d_head)), requires_grad=True)
        self.heads = heads
        self.d_head = d_head

    @property
    def out_dim(self) -> int:
        return self.heads * self.d_head


def target_attention(query, keys, values, block: TABlock, mask=None, score_norm: str = "none") -> Tensor:
    """Candidate-to-sequence attention, heads concatenated.

    ``query`` is (B, dq); ``keys``/``values`` are (B, n, dk)/(B, n, dv);
    ``mask`` (B, n) marks valid positions. Scores are ``(qWq)(kWk)^T / sqrt(d_head)``,
    optionally softmax-normalized over valid positions. Rows with no valid
    position produce a zero vector.
    """
    query, keys, values = as_tensor(query), as_tensor(keys), as_tensor(values)
    b, n = keys.shape[0], keys.shape[1]
    if values.shape[:2] != (b, n):
        raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree on (batch, length)")
    h, dh = block.heads, block.d_head
    mask = np.ones((b, n)) if mask is None else np.asarray(mask, dtype=np.float64)
    q = reshape(matmul(query, block.w_q), (b, h, 1, dh))
    k = transpose(reshape(matmul(keys, block.w_k), (b, n, h, dh)), (0, 2, 3, 1))  # (B, H, dh, n)
    v = transpose(reshape(matmul(values, block.w_v), (b, n, h, dh)), (0, 2, 1, 3))  # (B, H, n, dh)
    scores = matmul(q, k) * (1.0 / np.sqrt(dh))  # (B, H, 1, n)
    m = mask[:, None, None, :]
    if score_norm == "softmax":
        scores = softmax(scores + (m - 1.0) * 1e9, axis=-1) * m
    elif score_norm == "none":
        scores = scores * m
    else:
        raise ConfigError(f"unknown score_norm {score_norm!r}")
    return reshape(matmul(scores, v), (b, h * dh))


class BiDTAParams(Module):
    def __init__(self, d_behavior: int, d_modal: int, heads: int, d_head: int, seed: int):
        dims = {"behavior": d_behavior, "modal": d_modal}
        # (query/key space, value space) per role
        spaces = {"behavior": ("behavior", "behavior"), "modal": ("modal", "modal"),
                  "modal2behavior": ("modal", "behavior"), "behavior2modal": ("behavior", "modal")}
        self.blocks = [
            TABlock(dims[spaces[r][0]], dims[spaces[r][0]], dims[spaces[r][1]], heads, d_head,
                    param_rng(seed, f"bidta.{r}"))
            for r in BLOCK_ROLES
        ]

    def block(self, role: str) -> TABlock:
        return self.blocks[BLOCK_ROLES.index(role)]


def bidirectional_attention(h_cand, z_cand, h_seq, z_seq, params: BiDTAParams, mask=None,
                            score_norm: str = "none", roles=BLOCK_ROLES) -> Tensor:
    """Concatenate the behavior, modal, behavior2modal and modal2behavior block outputs."""
    h_seq, z_seq = as_tensor(h_seq), as_tensor(z_seq)
    if h_seq.shape[:2] != z_seq.shape[:2]:
        raise ShapeError(f"h_seq {h_seq.shape} and z_seq {z_seq.shape} differ in batch/length")
    inputs = {
        "behavior": (h_cand, h_seq, h_seq),
        "modal": (z_cand, z_seq, z_seq),
        "behavior2modal": (h_cand, h_seq, z_seq),
        "modal2behavior": (z_cand, z_seq, h_seq),
    }
    order = [r for r in ("behavior", "modal", "behavior2modal", "modal2behavior") if r in roles]
    outs = [target_attention(*inputs[r], params.block(r), mask, score_norm) for r in order]
    return outs[0] if len(outs) == 1 else concat(outs, axis=-1)


# -- full ranker --------------------------------------------------------------

def _roles(ablation: str) -> tuple:
    if ablation == "no_mm":
        return ("behavior",)
    if ablation == "no_bidir":
        return ("behavior", "modal")
    return BLOCK_ROLES


class RankerParams(Module):
    def __init__(self, config: RankerConfig, n_users: int, n_items: int, profile_cardinalities,
                 d_z: int, n_layers: int, codebook_size: int, seed: int,
                 rq_codebooks: np.ndarray | None = None):
        config.validate()
        ablation = config.ablation
        self.user_emb = Tensor(param_rng(seed, "ranker.user").normal(scale=0.1, size=(n_users, config.d_user)),
                               requires_grad=True)
        self.profile_emb = [
            Tensor(param_rng(seed, f"ranker.profile{j}").normal(scale=0.1, size=(c, config.d_profile)),
                   requires_grad=True)
            for j, c in enumerate(profile_cardinalities)
        ]
        self.item_emb = Tensor(param_rng(seed, "ranker.item").normal(scale=0.1, size=(n_items, config.d_id)),
                               requires_grad=True)
        init_book = None
        if ablation == "no_raw_mm":
            if rq_codebooks is None:
                raise ConfigError("no_raw_mm needs the RQ codebooks to initialize the alignment codebook")
            init_book = rq_codebooks
            if init_book.shape[2] != config.d_mba:
                raise ConfigError(f"no_raw_mm needs d_mba == RQ code dim ({init_book.shape[2]}), got {config.d_mba}")
        self.mba = MbaParams(n_layers, codebook_size, config.d_mba, d_z, config.mba_hidden, seed,
                             config.mba_norm_eps, init_book)
        self.d_h = (0 if ablation == "no_id" else config.d_id) + (0 if ablation == "no_stats" else 3)
        self.bidta = BiDTAParams(self.d_h, d_z, config.heads, config.d_head, seed)
        self.roles = _roles(ablation)
        d_attn = config.heads * config.d_head * len(self.roles)
        d_in = (config.d_user + config.d_profile * len(profile_cardinalities) + d_attn + 1 + self.d_h
                + (0 if ablation == "no_mm" else d_z))
        self.dnn = MLP([d_in, *config.dnn_hidden, 1], param_rng(seed, "ranker.dnn"))
        self.config = config

    def named_parameters(self, prefix: str = ""):
        # parameters of modules the ablation bypasses are excluded from training
        ablation = self.config.ablation
        for name, p in super().named_parameters(prefix):
            if name.startswith(prefix + "mba.") and ablation in ("no_mba", "no_mm"):
                continue
            if name.startswith(prefix + "bidta.blocks."):
                role = BLOCK_ROLES[int(name[len(prefix + "bidta.blocks."):].split(".")[0])]
                if role not in self.roles:
                    continue
            yield name, p


def standardize_columns(z: np.ndarray) -> np.ndarray:
    """Per-dimension zero mean and unit variance over the catalog.

    Contrastive embeddings share a large common direction that carries no
    item-level information; the ranker sees them after this fixed affine map.
    """
    z = np.asarray(z, dtype=np.float64)
    std = z.std(axis=0)
    return (z - z.mean(axis=0)) / np.where(std > 0, std, 1.0)


class FrozenItemInputs:
    """Frozen per-item embedding and semantic IDs, with a read counter."""

    def __init__(self, z: np.ndarray, codes: np.ndarray, standardize: bool = True):
        self._z = standardize_columns(z) if standardize else np.array(z, dtype=np.float64)
        self._z.setflags(write=False)
        self.codes = np.asarray(codes, dtype=np.int64)
        self.reads = 0

    @property
    def dim(self) -> int:
        return self._z.shape[1]

    def z(self, items: np.ndarray) -> np.ndarray:
        self.reads += 1
        return self._z[items]


def ctr_logits(batch: dict, params: RankerParams, items: FrozenItemInputs, ablation: str | None = None) -> Tensor:
    """Logits for a feature batch (see :meth:`RankingData.batch`)."""
    ablation = ablation or params.config.ablation
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    cfg = params.config
    cand = batch["item_id"]
    seq = batch["sequence"]
    mask = batch["mask"]
    b, n = seq.shape
    seq_safe = np.where(seq >= 0, seq, 0)

    def behavior(ids, stats):
        parts = []
        if ablation != "no_id":
            parts.append(take_rows(params.item_emb, ids))
        if ablation != "no_stats":
            parts.append(Tensor(stats))
        return parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    h_cand = behavior(cand, batch["cand_stats"])
    h_seq = behavior(seq_safe, batch["seq_stats"]) * mask[:, :, None]

    features = [take_rows(params.user_emb, batch["user_id"])]
    for j, table in enumerate(params.profile_emb):
        features.append(take_rows(table, batch["profile"][:, j]))

    if ablation == "no_mm":
        features.append(bidirectional_attention(h_cand, None, h_seq, h_seq, params.bidta, mask,
                                                cfg.score_norm, roles=("behavior",)))
    else:
        unique, inverse = np.unique(np.concatenate([cand, seq_safe.reshape(-1)]), return_inverse=True)
        z = items.z(unique)
        if ablation == "no_mba":
            z_align = Tensor(z)
        else:
            z_align = mba_forward(z, items.codes[unique], params.mba, skip=ablation != "no_raw_mm")
        z_cand = take_rows(z_align, inverse[:b])
        z_seq = take_rows(z_align, inverse[b:].reshape(b, n)) * mask[:, :, None]
        features.append(bidirectional_attention(h_cand, z_cand, h_seq, z_seq, params.bidta, mask,
                                                cfg.score_norm, roles=params.roles))
    features.append(Tensor(batch["base_pctr"][:, None]))
    features.append(h_cand)
    if ablation != "no_mm":
        features.append(z_cand)
    return reshape(params.dnn(concat(features, axis=-1)), (b,))


def ctr_forward(batch: dict, params: RankerParams, items: FrozenItemInputs, ablation: str | None = None) -> Tensor:
    """Predicted click probabilities in (0, 1)."""
    return sigmoid(ctr_logits(batch, params, items, ablation))
