"""Alternating optimisation loop and the baseline/ablation runners."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clusterinit import build_model, init_clusters, pretrain_supervised
from .config import TrainConfig
from .losses import (
    adv_loss,
    disc_loss,
    hard_assignment_loss,
    kl_loss,
    lambda_c_schedule,
    sup_loss,
    target_distribution_q,
    total_objective,
)
from .metrics import evaluate_segmentation, largest_cluster_frac
from .model import C2AModel, load_checkpoint, save_checkpoint
from .synthworld import World, generate_world, sample_batch
from .tensorcore import SgdState, sgd_step

log = logging.getLogger(__name__)

C2A_MODES = ("c2a_full", "lambda_c_zero")
# stream ids for batch sampling
_STREAMS = {"source": 1, "target": 2, "bridge": 3, "unlabeled": 4}


@dataclass
class Optimizers:
    generator: SgdState
    clusters: SgdState
    disc: SgdState

    @classmethod
    def create(cls, config: TrainConfig, start_iter: int = 0) -> "Optimizers":
        n = max(config.max_iter, 1)
        return cls(
            SgdState(config.lr_backbone, n, config.power, start_iter),
            SgdState(config.lr_centers, n, config.power, start_iter),
            SgdState(config.lr_disc, n, config.power, start_iter),
        )


@dataclass
class Batches:
    """One iteration's inputs. Unlabeled domains carry images only."""

    target: tuple
    source: tuple | None = None
    bridge: np.ndarray | None = None
    unlabeled: np.ndarray | None = None


def draw_batches(world: World, config: TrainConfig, it: int, mode: str) -> Batches:
    def labeled(tag, size, stream):
        ds = world[tag]
        idx = sample_batch(len(ds), size, config.seed, it, stream)
        return ds.images[idx], ds.labels[idx]

    def images(tag, size, stream):
        ds = world[tag]
        return ds.images[sample_batch(len(ds), size, config.seed, it, stream)]

    target = labeled("target_labeled", config.batch_target, _STREAMS["target"])
    if mode not in C2A_MODES:
        return Batches(target=target)
    return Batches(
        target=target,
        source=labeled("source", config.batch_source, _STREAMS["source"]),
        bridge=images("bridge", config.batch_bridge, _STREAMS["bridge"]),
        unlabeled=images("target_unlabeled", config.batch_unlabeled, _STREAMS["unlabeled"]),
    )


def _sup_branch(model: C2AModel, decoder, images, labels, weight=1.0) -> float:
    emap, ecache = model.encoder.forward(images)
    prob, dcache = decoder.forward(emap)
    loss, g = sup_loss(prob, labels)
    model.encoder.backward(ecache, decoder.backward(dcache, weight * g))
    return loss


def train_step(
    model: C2AModel, batches: Batches, config: TrainConfig, it: int, opt: Optimizers
):
    """One iteration: generator step on the combined objective, then a
    discriminator step on freshly recomputed (constant) probability maps.
    """
    mode = config.mode
    if batches.target is None or len(batches.target[0]) == 0:
        raise ValueError("train_step: missing labeled target batch")
    model.zero_grad()
    l_sup_t = _sup_branch(model, model.decoder_t, *batches.target)

    if mode not in C2A_MODES:
        sgd_step(model.group("generator"), opt.generator)
        return total_objective(l_sup_t=l_sup_t, lambda_adv=0.0, lambda_c=0.0)

    for name in ("source", "bridge", "unlabeled"):
        b = getattr(batches, name)
        if b is None or len(b if name != "source" else b[0]) == 0:
            raise ValueError(f"train_step: mode {mode} needs a non-empty {name} batch")

    lam_c = 0.0 if mode == "lambda_c_zero" else lambda_c_schedule(it / max(config.max_iter, 1))
    lam_adv = config.lambda_adv
    l_sup_s = _sup_branch(model, model.decoder_s, *batches.source)

    # bridge and unlabeled target share one encoder pass
    x_b, x_u = batches.bridge, batches.unlabeled
    nb = len(x_b)
    emap, ecache = model.encoder.forward(np.concatenate([x_b, x_u]))
    p_b, dcache = model.decoder_s.forward(emap[:nb])
    l_adv, g_pb = adv_loss(model.disc, p_b)
    g_emap = np.zeros_like(emap)
    g_emap[:nb] = model.decoder_s.backward(dcache, lam_adv * g_pb)

    emb, fcache = model.ftn.forward(emap)
    V = emb.reshape(-1, emb.shape[-1])
    P, acache = model.clusters.assign(V)
    l_c, g_c = hard_assignment_loss(P)
    if config.disable_kl:
        l_kl, g_kl = 0.0, 0.0
    else:
        l_kl, g_kl = kl_loss(P, target_distribution_q(P))
    if lam_c != 0.0:
        gV = model.clusters.assign_backward(acache, lam_c * (g_c + g_kl))
        g_emap += model.ftn.backward(fcache, gV.reshape(emb.shape))
    model.encoder.backward(ecache, g_emap)

    sgd_step(model.group("generator"), opt.generator)
    sgd_step(model.group("clusters"), opt.clusters)
    model.clusters.check()

    # discriminator step; generator outputs are constants here
    for p in model.group("disc"):
        p.zero_grad()
    xs = batches.source[0]
    e_all, _ = model.encoder.forward(np.concatenate([xs, x_b]))
    p_all, _ = model.decoder_s.forward(e_all)
    l_disc = disc_loss(model.disc, p_all[: len(xs)], p_all[len(xs) :])
    sgd_step(model.group("disc"), opt.disc)

    return total_objective(
        l_sup_s=l_sup_s,
        l_sup_t=l_sup_t,
        l_adv=l_adv,
        l_c=l_c,
        l_kl=l_kl,
        lambda_adv=lam_adv,
        lambda_c=lam_c,
        l_disc=l_disc,
    )


def evaluation_record(model: C2AModel, world: World, config: TrainConfig, it: int, report) -> dict:
    ev = evaluate_segmentation(model, world["target_val"])
    if config.mode in C2A_MODES:
        imgs = np.concatenate([world["bridge"].images, world["target_unlabeled"].images])
        lcf = largest_cluster_frac(model, imgs)
    else:
        lcf = None
    return {
        "iter": it,
        "mode": config.mode,
        "seed": config.seed,
        "losses": report.as_dict() if report is not None else None,
        "miou": ev["miou"],
        "pixel_acc": ev["pixel_acc"],
        "per_class_iou": ev["per_class_iou"],
        "largest_cluster_frac": lcf,
    }


@dataclass
class RunResult:
    model: C2AModel
    records: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def final(self) -> dict:
        return self.records[-1]


def initial_model(world: World, config: TrainConfig, init: C2AModel | None = None) -> C2AModel:
    """Starting point of a run for the configured mode."""
    mode = config.mode
    if mode in C2A_MODES:
        if init is None:
            init, _ = init_clusters(world, config)
        return init.copy()
    if mode == "target_only":
        return build_model(world, config)
    if mode == "finetune":
        # source-only supervised run standing in for "trained to convergence"
        return pretrain_supervised(world, config, iters=config.max_iter, domains=("source",))
    raise ValueError(f"unknown mode {mode!r}")


def run_training(
    world: World,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    init: C2AModel | None = None,
    resume: str | os.PathLike | None = None,
) -> RunResult:
    """Train for ``config.max_iter`` steps, evaluating every ``eval_interval``.

    With ``out_dir`` the JSONL metrics stream, periodic checkpoints and the
    final checkpoint are written there. ``resume`` continues from a
    checkpoint written by a run with the same config.
    """
    config.validate()
    if resume is not None:
        model, meta, _ = load_checkpoint(resume)
        start = int(meta["iter"])
        if meta.get("config") != config.to_json():
            raise ValueError("resume: checkpoint was written with a different config")
    else:
        model = initial_model(world, config, init)
        start = 0
    opt = Optimizers.create(config, start)

    out = Path(out_dir) if out_dir is not None else None
    stream = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        stream = open(out / "metrics.jsonl", "a" if resume is not None else "w")

    records = []

    def emit(rec):
        records.append(rec)
        if stream is not None:
            stream.write(json.dumps(rec, sort_keys=True) + "\n")
            stream.flush()

    def checkpoint(path, it):
        meta = {"iter": it, "config": config.to_json(), "world_seed": world.seed}
        save_checkpoint(model, path, meta)

    try:
        if resume is None:
            emit(evaluation_record(model, world, config, 0, None))
        for it in range(start, config.max_iter):
            batches = draw_batches(world, config, it, config.mode)
            report = train_step(model, batches, config, it, opt)
            done = it + 1
            if done % config.eval_interval == 0 or done == config.max_iter:
                emit(evaluation_record(model, world, config, done, report))
            if out is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
                checkpoint(out / f"ckpt_iter{done:06d}", done)
        if out is not None:
            checkpoint(out / "checkpoint", config.max_iter)
    finally:
        if stream is not None:
            stream.close()
    return RunResult(model, records, out)


# ---------------------------------------------------------------- sweeps

SWEEP_VARIANTS = {
    "c2a_full": {"mode": "c2a_full"},
    "lambda_c_zero": {"mode": "lambda_c_zero"},
    "target_only": {"mode": "target_only"},
    "finetune": {"mode": "finetune"},
    "c2a_no_kl": {"mode": "c2a_full", "disable_kl": True},
}


def run_cell(world: World, config: TrainConfig, variant: str, init: C2AModel | None, out_dir=None):
    from .metrics import cluster_diagnostics

    cfg = config.replace(**SWEEP_VARIANTS[variant])
    t0 = time.process_time()
    res = run_training(world, cfg, out_dir=out_dir, init=init)
    summary = {
        "variant": variant,
        "seed": cfg.seed,
        "cpu_seconds": time.process_time() - t0,
        "miou": res.final["miou"],
        "pixel_acc": res.final["pixel_acc"],
        "largest_cluster_frac": [r["largest_cluster_frac"] for r in res.records],
    }
    if cfg.mode in C2A_MODES:
        diag = cluster_diagnostics(res.model, world)
        summary.update(
            related_co_occupancy=diag["related_mean"],
            unrelated_co_occupancy=diag["unrelated_mean"],
            purity=diag["purity"],
            center_drift=float(
                np.linalg.norm(res.model.clusters.centers.value - init.clusters.centers.value)
            ),
            center_norm=float(np.linalg.norm(init.clusters.centers.value)),
        )
    return summary


def run_sweep(world_spec, config: TrainConfig, seeds, variants, out_dir=None) -> list[dict]:
    """Every (seed, variant) cell; the world and cluster init are shared per seed."""
    rows = []
    for seed in seeds:
        world = generate_world(world_spec, seed)
        cfg = config.replace(seed=seed)
        init = None
        if any(SWEEP_VARIANTS[v]["mode"] in C2A_MODES for v in variants):
            init, _ = init_clusters(world, cfg.replace(mode="c2a_full"))
        for v in variants:
            cell_dir = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            row = run_cell(world, cfg, v, init, cell_dir)
            log.info("seed %d %s miou %.4f", seed, v, row["miou"])
            rows.append(row)
    return rows


def summarize(rows: list[dict]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for v in dict.fromkeys(r["variant"] for r in rows):
        vals = np.array([r["miou"] for r in rows if r["variant"] == v])
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[v] = {"n": len(vals), "mean": float(vals.mean()), "sd": sd, "se": sd / np.sqrt(len(vals))}
    return out
