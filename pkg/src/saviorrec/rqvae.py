"""Residual-quantized autoencoder producing semantic IDs for items.

The encoder maps a frozen item embedding to a residual ``r1``; L codebooks
quantize it coarse-to-fine. During training codes are assigned by
entropy-regularized optimal transport (Sinkhorn) for balanced code usage;
exported IDs use nearest-codeword assignment.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError
from .numerics import (
    MLP,
    Adagrad,
    Module,
    Tensor,
    backward,
    param_rng,
    stop_gradient,
    take_rows,
)
from .saviorenc import EmbeddingTable, batch_with_pairs, info_nce_loss
from .synthgen import PairSet

log = logging.getLogger(__name__)


@dataclass
class RqVaeConfig:
    n_layers: int = 4
    codebook_size: int = 64
    code_dim: int = 16
    hidden: int = 32
    lambda_reconstruct: float = 1000.0
    lambda_commit: float = 0.5
    tau: float = 0.07
    sinkhorn_reg: float = 0.05
    sinkhorn_iters: int = 50
    assigner: str = "sinkhorn"
    epochs: int = 20
    batch_items: int = 256
    batch_pairs: int = 64
    lr_start: float = 0.02
    lr_end: float = 0.002

    def validate(self):
        if self.lambda_reconstruct < 0 or self.lambda_commit < 0:
            raise ConfigError("loss weights lambda_reconstruct and lambda_commit must be >= 0")
        if self.n_layers < 1 or self.codebook_size < 1 or self.code_dim < 1:
            raise ConfigError("n_layers, codebook_size and code_dim must be >= 1")
        if self.assigner not in ("argmin", "sinkhorn"):
            raise ConfigError(f"assigner must be 'argmin' or 'sinkhorn', got {self.assigner!r}")
        if self.sinkhorn_reg <= 0 or self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_reg must be > 0 and sinkhorn_iters >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RqVaeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown rqvae config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CodebookStack:
    """L codebooks of K codes each, all of dimension d."""

    codes: np.ndarray  # (L, K, d)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 3:
            raise ContractError(f"codebook stack must be (L, K, d), got {self.codes.shape}")

    @property
    def n_layers(self) -> int:
        return self.codes.shape[0]

    @property
    def size(self) -> int:
        return self.codes.shape[1]

    @property
    def dim(self) -> int:
        return self.codes.shape[2]


def squared_distances(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """(B, K) squared Euclidean distances between rows of x and codes."""
    return ((x[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    peak = x.max(axis=axis, keepdims=True)
    return (np.log(np.exp(x - peak).sum(axis=axis, keepdims=True)) + peak).squeeze(axis)


def sinkhorn_plan(dist: np.ndarray, iters: int, reg: float) -> np.ndarray:
    """Log-domain Sinkhorn transport plan with uniform row (1/B) and column (1/K) marginals."""
    dist = np.asarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(dist)):
        raise ContractError("Sinkhorn cost matrix contains non-finite entries")
    if iters < 1 or reg <= 0:
        raise ContractError("Sinkhorn needs iters >= 1 and reg > 0")
    b, k = dist.shape
    log_kernel = -dist / reg
    f = np.zeros(b)
    g = np.zeros(k)
    for _ in range(iters):
        g = -np.log(k) - _lse(log_kernel + f[:, None], axis=0)
        f = -np.log(b) - _lse(log_kernel + g[None, :], axis=1)
    return np.exp(log_kernel + f[:, None] + g[None, :])


def sinkhorn_assign(dist: np.ndarray, iters: int = 50, reg: float = 0.05) -> np.ndarray:
    """Assign each row to the column carrying most of its transported mass.

    Rows whose plan underflows to all zeros fall back to nearest-code argmin.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] < 1:
        raise ContractError(f"distance matrix must be (B>=1, K), got {dist.shape}")
    plan = sinkhorn_plan(dist, iters, reg)
    assignment = plan.argmax(axis=1)
    dead = ~np.isfinite(plan).all(axis=1) | (plan.max(axis=1) <= 0)
    if dead.any():
        assignment[dead] = dist[dead].argmin(axis=1)
    return assignment


def _standardize(dist: np.ndarray) -> np.ndarray:
    spread = dist.std()
    return (dist - dist.mean()) / spread if spread > 0 else dist - dist.mean()


def assign_codes(residual: np.ndarray, codes: np.ndarray, assigner: str = "argmin",
                 iters: int = 50, reg: float = 0.05) -> np.ndarray:
    dist = squared_distances(residual, codes)
    if assigner == "argmin":
        return dist.argmin(axis=1)
    if assigner == "sinkhorn":
        # costs are standardized per batch so that ``reg`` is scale-free
        return sinkhorn_assign(_standardize(dist), iters, reg)
    raise ConfigError(f"unknown assigner {assigner!r}")


@dataclass
class Quantized:
    codes: np.ndarray  # (B, L) ints
    residuals: list  # L + 1 arrays of shape (B, d); residuals[0] is the input
    reconstruction_sum: np.ndarray  # (B, d)


def residual_quantize(r1: np.ndarray, stack: CodebookStack, assigner: str = "argmin",
                      iters: int = 50, reg: float = 0.05) -> Quantized:
    """Quantize a batch of vectors layer by layer on the running residual."""
    r = np.atleast_2d(np.asarray(r1, dtype=np.float64))
    if not np.all(np.isfinite(r)):
        raise ContractError("input to quantize contains non-finite entries")
    residuals = [r]
    chosen = []
    total = np.zeros_like(r)
    for layer in stack.codes:
        c = assign_codes(residuals[-1], layer, assigner, iters, reg)
        chosen.append(c)
        total = total + layer[c]
        residuals.append(residuals[-1] - layer[c])
    return Quantized(np.stack(chosen, axis=1), residuals, total)


def quantize(r1, stack: CodebookStack, assigner: str = "argmin", iters: int = 50, reg: float = 0.05):
    """Single-vector form: returns (semantic id tuple, residual list, reconstruction sum)."""
    q = residual_quantize(np.asarray(r1)[None, :], stack, assigner, iters, reg)
    return tuple(int(c) for c in q.codes[0]), [r[0] for r in q.residuals], q.reconstruction_sum[0]


class RqVaeParams(Module):
    def __init__(self, d_z: int, config: RqVaeConfig, seed: int):
        config.validate()
        self.enc = MLP([d_z, config.hidden, config.code_dim], param_rng(seed, "rqvae.enc"))
        self.dec = MLP([config.code_dim, config.hidden, d_z], param_rng(seed, "rqvae.dec"))
        rng = param_rng(seed, "rqvae.codebooks")
        self.codebooks = Tensor(rng.normal(size=(config.n_layers * config.codebook_size, config.code_dim)) * 0.1,
                                requires_grad=True)
        self.n_layers = config.n_layers
        self.codebook_size = config.codebook_size
        self.lambdas = (config.lambda_reconstruct, config.lambda_commit)

    @property
    def stack(self) -> CodebookStack:
        return CodebookStack(self.codebooks.data.reshape(self.n_layers, self.codebook_size, -1).copy())


@dataclass
class RqVaeLoss:
    total: Tensor
    reconstruct: float
    commit: float
    contrast: float
    codes: np.ndarray


def rqvae_loss(batch_z, pairs, params: RqVaeParams, assigner: str = "argmin", tau: float = 0.07,
               iters: int = 50, reg: float = 0.05) -> RqVaeLoss:
    """Weighted reconstruction + commitment + contrastive loss on one batch.

    ``pairs`` index rows of ``batch_z``; pass an empty array to skip the
    contrastive term. Gradients reach the encoder through a straight-through
    copy of ``r1`` and reach the codebooks through the reconstruction path.
    """
    lam_rec, lam_commit = params.lambdas
    if lam_rec < 0 or lam_commit < 0:
        raise ConfigError("loss weights must be non-negative")
    z = batch_z if isinstance(batch_z, Tensor) else Tensor(batch_z)
    r1 = params.enc(z)
    stack = params.stack
    codes = residual_quantize(r1.data, stack, assigner, iters, reg).codes
    k = params.codebook_size
    residual = r1
    quantized = None
    commit = None
    for layer in range(params.n_layers):
        chosen = take_rows(params.codebooks, layer * k + codes[:, layer])
        term = ((residual - stop_gradient(chosen)) ** 2).sum(axis=-1).mean()
        commit = term if commit is None else commit + term
        quantized = chosen if quantized is None else quantized + chosen
        residual = residual - chosen
    passthrough = quantized + (r1 - stop_gradient(r1))
    z_hat = params.dec(passthrough)
    reconstruct = ((z - z_hat) ** 2).sum(axis=-1).mean()
    total = reconstruct * lam_rec + commit * lam_commit
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    contrast_value = 0.0
    if len(pairs):
        contrast = info_nce_loss(z_hat, pairs, tau)
        total = total + contrast
        contrast_value = contrast.item()
    return RqVaeLoss(total, reconstruct.item(), commit.item(), contrast_value, codes)


@dataclass
class UsageReport:
    histograms: list
    entropy: list
    perplexity: list
    dead_codes: list

    def to_dict(self) -> dict:
        return asdict(self)


def codebook_usage_stats(codes: np.ndarray, codebook_size: int) -> UsageReport:
    """Per-layer code histogram, entropy (nats), perplexity and dead-code count."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ContractError("codes must be a non-empty (N, L) array")
    hists, entropies, perplexities, dead = [], [], [], []
    for layer in codes.T:
        hist = np.bincount(layer, minlength=codebook_size)
        p = hist[hist > 0] / hist.sum()
        h = float(-(p * np.log(p)).sum())
        hists.append(hist.tolist())
        entropies.append(h)
        perplexities.append(float(np.exp(h)))
        dead.append(int((hist == 0).sum()))
    return UsageReport(hists, entropies, perplexities, dead)


def init_codebooks_from_batch(params: RqVaeParams, batch_z: np.ndarray, rng: np.random.Generator) -> None:
    """Warm-start every layer's codes with residuals drawn from one batch."""
    r = params.enc(Tensor(batch_z)).data
    k = params.codebook_size
    new = params.codebooks.data.copy()
    for layer in range(params.n_layers):
        picks = rng.choice(r.shape[0], size=k, replace=r.shape[0] < k)
        chosen = r[picks] + rng.normal(scale=1e-3 * (r.std() + 1e-12), size=(k, r.shape[1]))
        new[layer * k:(layer + 1) * k] = chosen
        r = r - chosen[squared_distances(r, chosen).argmin(axis=1)]
    params.codebooks.data = new


@dataclass
class RqVaeHistory:
    total: list = field(default_factory=list)
    reconstruct: list = field(default_factory=list)
    commit: list = field(default_factory=list)
    contrast: list = field(default_factory=list)
    initial_reconstruct: float | None = None


def export_ids(params: RqVaeParams, table: EmbeddingTable) -> np.ndarray:
    r1 = params.enc(Tensor(table.vectors)).data
    return residual_quantize(r1, params.stack, "argmin").codes


def train_rqvae(table: EmbeddingTable, pairs: PairSet, config: RqVaeConfig, seed: int):
    """Train on a frozen embedding table; returns (params, ids (N, L), history, usage)."""
    config.validate()
    if not table.frozen:
        raise ContractError("RQ-VAE training requires a frozen embedding table")
    z_all = table.vectors
    n = len(table)
    params = RqVaeParams(table.dim, config, seed)
    rng = np.random.default_rng([seed, 21])
    history = RqVaeHistory()
    pair_arr = pairs.pairs if len(pairs) else np.zeros((0, 2), dtype=np.int64)
    steps_per_epoch = max(1, n // config.batch_items)
    if config.epochs > 0:
        init_codebooks_from_batch(params, z_all[rng.permutation(n)[:config.batch_items]], rng)
        with_init = rqvae_loss(z_all, np.zeros((0, 2)), params, "argmin")
        history.initial_reconstruct = with_init.reconstruct
    opt = Adagrad(params.parameters(), config.lr_start, config.lr_end,
                  horizon=max(1, config.epochs * steps_per_epoch))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            items = order[step * config.batch_items:(step + 1) * config.batch_items]
            local_pairs = np.zeros((0, 2), dtype=np.int64)
            if len(pair_arr) >= 2 and config.batch_pairs >= 2:
                chosen = pair_arr[rng.choice(len(pair_arr), size=min(config.batch_pairs, len(pair_arr)),
                                             replace=False)]
                pair_items, local_pairs = batch_with_pairs(chosen)
                items = np.concatenate([pair_items, np.setdiff1d(items, pair_items)])
            last_good = params.state_dict()
            opt.zero_grad()
            out = rqvae_loss(z_all[items], local_pairs, params, config.assigner, config.tau,
                             config.sinkhorn_iters, config.sinkhorn_reg)
            if not np.isfinite(out.total.item()):
                raise DivergenceError(f"RQ-VAE loss became {out.total.item()} at epoch {epoch}",
                                      checkpoint=last_good)
            backward(out.total)
            opt.step()
            history.total.append(out.total.item())
            history.reconstruct.append(out.reconstruct)
            history.commit.append(out.commit)
            history.contrast.append(out.contrast)
        log.info("rqvae epoch %d recon %.5f commit %.5f contrast %.4f", epoch,
                 np.mean(history.reconstruct[-steps_per_epoch:]), np.mean(history.commit[-steps_per_epoch:]),
                 np.mean(history.contrast[-steps_per_epoch:]))
    ids = export_ids(params, table)
    usage = codebook_usage_stats(ids, config.codebook_size)
    for layer, perp in enumerate(usage.perplexity):
        if perp <= 1.0 + 1e-9:
            log.warning("codebook layer %d collapsed to a single code", layer)
    return params, ids, history, usage
