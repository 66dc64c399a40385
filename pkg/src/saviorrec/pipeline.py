"""Staged, file-based pipeline: gen -> encode -> quantize -> rank -> eval.

Each stage reads only the files of its upstream stages and writes its own
directory under the work dir. A directory is built next to its final location
and renamed into place once complete, so a crashed run never leaves a
directory with a manifest that downstream stages would accept.
"""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, evalkit
from .config import PipelineConfig
from .errors import ArtifactConflictError, ConfigError, DependencyError
from .io import read_json, read_jsonl, write_json, write_jsonl, atomic_write_text
from .numerics import checkpoint
from .ranking import (
    FrozenItemInputs,
    RankerParams,
    build_ranking_data,
    predict,
    train_ranker,
)
from .ranking.model import standardize_columns
from .rqvae import CodebookStack, RqVaeParams, train_rqvae
from .saviorenc import (
    EmbeddingTable,
    EncoderConfig,
    hitrate_at_k,
    mean_pair_cosine,
    train_encoder,
)
from .synthgen import (
    InteractionLog,
    ItemCatalog,
    PairSet,
    UserSet,
    World,
    eval_cutoff,
    generate_world,
    next_click_transitions,
)

log = logging.getLogger(__name__)

STAGES = ("gen", "encode", "quantize", "rank", "eval", "ablate", "sweep-dims", "run-all")
_SECTIONS = {
    "gen": ("synthgen",),
    "encode": ("synthgen", "encoder"),
    "quantize": ("synthgen", "encoder", "rqvae"),
    "rank": ("synthgen", "encoder", "rqvae", "ranker"),
    "eval": ("synthgen", "encoder", "rqvae", "ranker", "eval"),
}
MODAL_FREE = ("no_mm",)


# -- layout and manifests -----------------------------------------------------

def run_key(cfg: PipelineConfig) -> str:
    return f"{cfg.ranker.ablation}-d{cfg.ranker.d_mba}"


def stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    root = Path(cfg.workdir)
    if stage in ("rank", "eval"):
        return root / stage / run_key(cfg)
    return root / stage


def stage_hash(cfg: PipelineConfig, stage: str) -> str:
    return cfg.section_hash(*_SECTIONS[stage])


def manifest_for(cfg: PipelineConfig, stage: str, **extra) -> dict:
    m = {"stage": stage, "config_hash": stage_hash(cfg, stage), "seed": cfg.seed, "version": __version__}
    if stage in ("rank", "eval"):
        m["ablation"] = cfg.ranker.ablation
    m.update(extra)
    return m


def read_manifest(directory: Path) -> dict | None:
    path = directory / "manifest.json"
    return read_json(path) if path.exists() else None


def require(cfg: PipelineConfig, stage: str, needed_by: str) -> Path:
    """Directory of a finished upstream stage whose hash matches ``cfg``."""
    directory = stage_dir(cfg, stage)
    manifest = read_manifest(directory)
    hint = stage if stage not in ("rank", "eval") else f"{stage} --ablation {cfg.ranker.ablation}"
    if manifest is None:
        raise DependencyError(f"{needed_by} needs the '{stage}' artifacts in {directory}; "
                              f"run `saviorrec {hint}` first")
    if manifest["config_hash"] != stage_hash(cfg, stage):
        raise DependencyError(f"{needed_by}: '{stage}' artifacts in {directory} were built with a different "
                              f"config; re-run `saviorrec {hint} --force`")
    return directory


class _StageWriter:
    """Temp directory that replaces the stage directory on commit."""

    def __init__(self, final: Path):
        self.final = final
        final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.tmp-"))

    def commit(self, manifest: dict) -> None:
        write_json(self.tmp / "manifest.json", manifest)
        trash = None
        if self.final.exists():
            trash = self.final.with_name(f".{self.final.name}.old-{os.getpid()}")
            os.replace(self.final, trash)
        os.replace(self.tmp, self.final)
        if trash is not None:
            shutil.rmtree(trash, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _begin(cfg: PipelineConfig, stage: str, force: bool) -> _StageWriter | None:
    """None when the stage is already done with this config (idempotent no-op)."""
    final = stage_dir(cfg, stage)
    existing = read_manifest(final)
    if existing is not None and not force:
        if existing["config_hash"] == stage_hash(cfg, stage):
            log.info("%s: artifacts in %s are up to date", stage, final)
            return None
        raise ArtifactConflictError(f"{final} holds '{stage}' artifacts from config {existing['config_hash']}, "
                                    f"current config is {stage_hash(cfg, stage)}; pass --force to overwrite")
    return _StageWriter(final)


def _run(cfg: PipelineConfig, stage: str, force: bool, body) -> dict:
    writer = _begin(cfg, stage, force)
    if writer is None:
        return {"stage": stage, "skipped": True, "dir": str(stage_dir(cfg, stage))}
    try:
        extra = body(writer.tmp) or {}
        writer.commit(manifest_for(cfg, stage, **extra))
    except BaseException:
        writer.abort()
        raise
    return {"stage": stage, "skipped": False, "dir": str(writer.final), **extra}


# -- world persistence --------------------------------------------------------

def save_world(world: World, directory: Path) -> None:
    c, u, lg, p = world.catalog, world.users, world.log, world.pairs
    checkpoint.save(directory / "world.bin", {
        "catalog.style": c.style, "catalog.modality_a": c.modality_a, "catalog.modality_b": c.modality_b,
        "catalog.popularity": c.popularity,
        "users.interest": u.interest, "users.profile": u.profile, "users.activity": u.activity,
        "log.user_id": lg.user_id, "log.item_id": lg.item_id, "log.clicked": lg.clicked,
        "log.timestamp": lg.timestamp, "log.p_true": lg.p_true, "log.base_pctr": lg.base_pctr,
        "log.sequence": lg.sequence,
        "pairs.pairs": p.pairs, "pairs.counts": p.counts,
    })


def load_world(cfg: PipelineConfig, directory: Path) -> World:
    t = checkpoint.load(directory / "world.bin")
    i64 = lambda key: t[key].astype(np.int64)  # noqa: E731
    catalog = ItemCatalog(t["catalog.style"], t["catalog.modality_a"], t["catalog.modality_b"],
                          t["catalog.popularity"])
    users = UserSet(t["users.interest"], i64("users.profile"), t["users.activity"])
    lg = InteractionLog(i64("log.user_id"), i64("log.item_id"), i64("log.clicked"), i64("log.timestamp"),
                        t["log.p_true"], t["log.base_pctr"], i64("log.sequence"),
                        cfg.synthgen.n_items, cfg.synthgen.n_rounds)
    return World(cfg.synthgen, cfg.seed, catalog, users, lg, PairSet(i64("pairs.pairs"), i64("pairs.counts")))


def eval_transitions(world: World) -> np.ndarray:
    cut = eval_cutoff(world.config.n_rounds, world.config.eval_fraction)
    return next_click_transitions(world.log, cut)


# -- stages -------------------------------------------------------------------

def stage_gen(cfg: PipelineConfig, force: bool = False) -> dict:
    def body(out: Path):
        world = generate_world(cfg.synthgen, cfg.seed)
        save_world(world, out)
        stats = world.manifest()
        write_json(out / "world_stats.json", stats)
        return {"bayes_auc": stats["bayes_auc"], "bayes_auc_eval_low_pv": stats["bayes_auc_eval_low_pv"],
                "n_pairs": stats["n_pairs"]}
    return _run(cfg, "gen", force, body)


def stage_encode(cfg: PipelineConfig, force: bool = False) -> dict:
    gen_dir = require(cfg, "gen", "encode")

    def body(out: Path):
        world = load_world(cfg, gen_dir)
        params, table, history = train_encoder(world.catalog, world.pairs, cfg.encoder, cfg.seed)
        untrained_cfg = EncoderConfig.from_dict({**cfg.encoder.to_dict(), "epochs": 0})
        _, untrained, _ = train_encoder(world.catalog, world.pairs, untrained_cfg, cfg.seed)
        transitions = eval_transitions(world)
        k = cfg.eval.hitrate_k
        metrics = {
            f"hitrate@{k}": hitrate_at_k(table, transitions, k),
            f"hitrate@{k}_untrained": hitrate_at_k(untrained, transitions, k),
            "pair_cosine": mean_pair_cosine(table.vectors, world.pairs.pairs),
            "pair_cosine_untrained": mean_pair_cosine(untrained.vectors, world.pairs.pairs),
            "n_transitions": int(len(transitions)),
        }
        table.save(out)
        checkpoint.save(out / "encoder.bin", params.state_dict())
        write_jsonl(out / "history.jsonl", ({"epoch": i, "loss": v} for i, v in enumerate(history.epoch_losses)))
        write_json(out / "metrics.json", metrics)
        return {"metrics": metrics}
    return _run(cfg, "encode", force, body)


def stage_quantize(cfg: PipelineConfig, force: bool = False) -> dict:
    gen_dir = require(cfg, "gen", "quantize")
    enc_dir = require(cfg, "encode", "quantize")

    def body(out: Path):
        world = load_world(cfg, gen_dir)
        table = EmbeddingTable.load(enc_dir)
        # the contrastive loss leaves the embedding scale free, and it drifts
        # small enough that reconstruction stops resisting codebook collapse
        table = EmbeddingTable(standardize_columns(table.vectors), table.manifest)
        params, ids, history, usage = train_rqvae(table, world.pairs, cfg.rqvae, cfg.seed)
        checkpoint.save(out / "rqvae.bin", params.state_dict())
        checkpoint.save(out / "semantic_ids.bin", {"ids": ids})
        write_jsonl(out / "semantic_ids.jsonl", ({"item_id": i, "codes": row.tolist()} for i, row in enumerate(ids)))
        write_json(out / "usage.json", usage.to_dict())
        write_jsonl(out / "history.jsonl", ({"step": i, "total": t, "reconstruct": r, "commit": c, "contrast": x}
                                            for i, (t, r, c, x) in enumerate(zip(history.total, history.reconstruct,
                                                                                 history.commit, history.contrast))))
        return {"perplexity": usage.perplexity}
    return _run(cfg, "quantize", force, body)


def _load_quantized(cfg: PipelineConfig, q_dir: Path) -> tuple[np.ndarray, CodebookStack]:
    ids = checkpoint.load(q_dir / "semantic_ids.bin")["ids"].astype(np.int64)
    rq = RqVaeParams(cfg.encoder.d_z, cfg.rqvae, cfg.seed)
    rq.load_state_dict(checkpoint.load(q_dir / "rqvae.bin"))
    return ids, rq.stack


def _ranker_setup(cfg: PipelineConfig, needed_by: str):
    gen_dir = require(cfg, "gen", needed_by)
    enc_dir = require(cfg, "encode", needed_by)
    q_dir = require(cfg, "quantize", needed_by)
    world = load_world(cfg, gen_dir)
    data = build_ranking_data(world.log, world.users, world.config.profile_cardinalities)
    ids, stack = _load_quantized(cfg, q_dir)
    if cfg.ranker.ablation in MODAL_FREE:
        # the embedding file is never opened for a modal-free ranker
        items = FrozenItemInputs(np.zeros((world.config.n_items, cfg.encoder.d_z)), ids)
    else:
        items = FrozenItemInputs(EmbeddingTable.load(enc_dir).vectors, ids)
    params = RankerParams(cfg.ranker, data.n_users, data.n_items, data.profile_cardinalities, cfg.encoder.d_z,
                          stack.n_layers, stack.size, cfg.seed, stack.codes)
    train_mask, eval_mask = world.train_mask, world.eval_mask
    return world, data.subset(train_mask), data.subset(eval_mask), items, params


def stage_rank(cfg: PipelineConfig, force: bool = False) -> dict:
    for upstream in ("gen", "encode", "quantize"):
        require(cfg, upstream, "rank")

    def body(out: Path):
        _, train, evaluation, items, params = _ranker_setup(cfg, "rank")
        params, history = train_ranker(train, params, items, cfg.ranker, cfg.seed, evaluation)
        checkpoint.save(out / "ranker.bin", params.state_dict())
        write_jsonl(out / "history.jsonl", history.records())
        return {"stream_hash": history.stream_hash, "final_train_loss": history.epoch_loss[-1]}
    return _run(cfg, "rank", force, body)


def stage_eval(cfg: PipelineConfig, force: bool = False) -> dict:
    rank_dir = require(cfg, "rank", "eval")

    def body(out: Path):
        world, _, evaluation, items, params = _ranker_setup(cfg, "eval")
        params.load_state_dict(checkpoint.load(rank_dir / "ranker.bin"))
        scores = predict(params, items, evaluation, cfg.ranker.eval_batch_size)
        meta = {"ablation": cfg.ranker.ablation, "seed": cfg.seed, "config_hash": stage_hash(cfg, "eval")}
        report = evalkit.grouped_auc(scores, evaluation.label, evaluation.item_pv[evaluation.item_id], metadata=meta)
        low = evalkit.PvBucketing().labels[:2]
        report.extras["low_pv_auc"] = evalkit.pooled_auc(scores, evaluation.label,
                                                         evaluation.item_pv[evaluation.item_id], low)
        stats = read_json(require(cfg, "gen", "eval") / "world_stats.json")
        report.extras["bayes_auc_eval"] = stats["bayes_auc_eval"]
        report.extras["bayes_auc_eval_low_pv"] = stats["bayes_auc_eval_low_pv"]
        if cfg.ranker.ablation not in MODAL_FREE:
            enc = read_json(require(cfg, "encode", "eval") / "metrics.json")
            k = cfg.eval.hitrate_k
            report.extras[f"encoder_hitrate@{k}"] = enc[f"hitrate@{k}"]
            if cfg.ranker.ablation != "no_mba":
                report.extras["layer_importance"] = evalkit.layer_importance_report(
                    params.mba.codebook_stack(), params.mba.fusion.layers[0].weight.data)
        write_jsonl(out / "report.jsonl", [report.to_dict()])
        atomic_write_text(out / "report.txt", format_report(report))
        checkpoint.save(out / "scores.bin", {"logits": scores})
        return {"total_auc": report.total_auc, "low_pv_auc": report.extras["low_pv_auc"]}
    return _run(cfg, "eval", force, body)


def format_report(report: evalkit.EvalReport) -> str:
    text = report.format_table(report.metadata.get("ablation", "model"))
    ex = report.extras
    rows = [["Low-PV AUC", "Bayes low-PV"], [evalkit._pct(ex["low_pv_auc"]), evalkit._pct(ex["bayes_auc_eval_low_pv"])]]
    hit = [k for k in ex if k.startswith("encoder_hitrate@")]
    if hit:
        rows[0].append(hit[0].replace("encoder_", "Encoder "))
        rows[1].append(f"{ex[hit[0]]:.4f}")
    if "layer_importance" in ex:
        rows[0].append("MBA layer scores")
        rows[1].append(" ".join(f"{v:.3f}" for v in ex["layer_importance"]["codebook"]))
    return text + "\n" + evalkit.format_rows(rows)


def load_report(cfg: PipelineConfig) -> evalkit.EvalReport:
    directory = require(cfg, "eval", "report")
    return evalkit.EvalReport.from_dict(next(read_jsonl(directory / "report.jsonl")))


def stage_ablate(cfg: PipelineConfig, force: bool = False, tags=None) -> dict:
    tags = tuple(tags or cfg.eval.ablation_tags)

    def runner(tag):
        member = cfg.with_overrides(ablation=tag)
        stage_rank(member, force)
        stage_eval(member, force)
        hash_ = read_manifest(stage_dir(member, "rank"))["stream_hash"]
        return load_report(member), hash_

    result = evalkit.ablation_suite(tags, runner)
    out = Path(cfg.workdir) / "ablate"
    write_jsonl(out / "suite.jsonl", result.records())
    atomic_write_text(out / "table.txt", result.format_table())
    write_json(out / "manifest.json", {**manifest_for(cfg, "eval"), "stage": "ablate", "tags": list(tags),
                                       "failures": result.failures})
    return {"stage": "ablate", "table": result.format_table(), "failures": result.failures}


def stage_sweep_dims(cfg: PipelineConfig, force: bool = False) -> dict:
    rows = [["d_mba", "Total AUC", "Low-PV AUC"]]
    records = []
    for d in cfg.sweep_dims:
        d_cfg = PipelineConfig.from_dict({**cfg.to_dict(), "ranker": {**cfg.ranker.to_dict(), "d_mba": d,
                                                                       "ablation": "full"}})
        stage_rank(d_cfg, force)
        stage_eval(d_cfg, force)
        report = load_report(d_cfg)
        records.append({"d_mba": d, "total_auc": report.total_auc, "low_pv_auc": report.extras["low_pv_auc"]})
        rows.append([str(d), evalkit._pct(report.total_auc), evalkit._pct(report.extras["low_pv_auc"])])
    out = Path(cfg.workdir) / "sweep-dims"
    write_jsonl(out / "sweep.jsonl", records)
    atomic_write_text(out / "table.txt", evalkit.format_rows(rows))
    write_json(out / "manifest.json", {**manifest_for(cfg, "eval"), "stage": "sweep-dims", "dims": list(cfg.sweep_dims)})
    return {"stage": "sweep-dims", "table": evalkit.format_rows(rows)}


def run_all(cfg: PipelineConfig, force: bool = False) -> evalkit.EvalReport:
    for stage in ("gen", "encode", "quantize", "rank", "eval"):
        run_stage(stage, cfg, force)
    return load_report(cfg)


_DISPATCH = {
    "gen": stage_gen, "encode": stage_encode, "quantize": stage_quantize, "rank": stage_rank,
    "eval": stage_eval, "ablate": stage_ablate, "sweep-dims": stage_sweep_dims,
}


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False) -> dict:
    if stage not in _DISPATCH:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    log.info("stage %s (seed %d, ablation %s)", stage, cfg.seed, cfg.ranker.ablation)
    try:
        return _DISPATCH[stage](cfg, force)
    except Exception as exc:
        # innermost stage wins when stages call each other (ablate -> rank)
        if not hasattr(exc, "stage"):
            exc.stage = stage
        raise
