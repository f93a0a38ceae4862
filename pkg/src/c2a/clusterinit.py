"""Cluster-center initialization.

Pipeline: supervised pretraining on labeled source + labeled target, encoder
features of the unlabeled target images, PCA down to the embedding width,
Lloyd's k-means, then installation of the PCA map into the feature transform
and the k-means centers into the cluster bank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .losses import sup_loss
from .model import C2AModel
from .synthworld import DomainDataset, World, sample_batch
from .tensorcore import SgdState, ShapeError, sgd_step

log = logging.getLogger(__name__)


class RankDeficientError(ValueError):
    def __init__(self, achieved: int, wanted: int):
        self.achieved = achieved
        self.wanted = wanted
        super().__init__(f"covariance rank {achieved} is below requested {wanted} components")


def build_model(world: World, config: TrainConfig, seed: int | None = None) -> C2AModel:
    spec = world.spec
    cfg = config.model_config(
        spec.height, spec.width, world.source_space.num_classes, world.target_space.num_classes
    )
    return C2AModel(cfg, config.seed if seed is None else seed)


def supervised_step(model, batches, state: SgdState):
    """One SGD step on the supervised losses; ``batches`` maps decoder -> (images, labels)."""
    model.zero_grad()
    losses = {}
    for which, (images, labels) in batches.items():
        dec = model.decoder_s if which == "source" else model.decoder_t
        emap, ecache = model.encoder.forward(images)
        prob, dcache = dec.forward(emap)
        loss, g = sup_loss(prob, labels)
        model.encoder.backward(ecache, dec.backward(dcache, g))
        losses[which] = loss
    sgd_step(model.group("generator"), state)
    return losses


def pretrain_supervised(
    world: World,
    config: TrainConfig,
    iters: int | None = None,
    domains=("source", "target_labeled"),
    model: C2AModel | None = None,
) -> C2AModel:
    """Train encoder + decoders with cross-entropy only."""
    iters = config.pretrain_iters if iters is None else iters
    sets = {d: world[d] for d in domains}
    for d, ds in sets.items():
        if len(ds) == 0:
            raise ValueError(f"pretrain_supervised: labeled split {d!r} is empty")
    model = build_model(world, config) if model is None else model
    if iters == 0:
        return model
    state = SgdState(config.lr_backbone, iters, config.power)
    batch = {"source": config.batch_source, "target_labeled": config.batch_target}
    for it in range(iters):
        batches = {}
        for stream, (d, ds) in enumerate(sets.items()):
            idx = sample_batch(len(ds), batch[d], config.seed, it, 1000 + stream)
            key = "source" if d == "source" else "target"
            batches[key] = (ds.images[idx], ds.labels[idx])
        losses = supervised_step(model, batches, state)
        if (it + 1) % 100 == 0:
            log.debug("pretrain iter %d losses %s", it + 1, losses)
    return model


def collect_features(model: C2AModel, dataset: DomainDataset) -> np.ndarray:
    """Encoder-map cells of every image as rows, image-major then row-major."""
    emap, _ = model.encoder.forward(dataset.images)
    return emap.reshape(-1, emap.shape[-1])


@dataclass
class PCAResult:
    projection: np.ndarray  # (f_e, f_d), orthonormal rows
    mean: np.ndarray  # (f_d,)
    variances: np.ndarray  # (f_e,)
    iterations: list = field(default_factory=list)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) @ self.projection.T


def _power_iterate(C: np.ndarray, v: np.ndarray, tol: float, max_iter: int):
    v = v / np.linalg.norm(v)
    for it in range(1, max_iter + 1):
        w = C @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return v, 0.0, it
        w /= nrm
        if np.dot(w, v) < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return v, float(v @ C @ v), it


def pca_fit(X: np.ndarray, out_dim: int, tol: float = 1e-10, max_iter: int = 10_000) -> PCAResult:
    """Top ``out_dim`` principal directions by power iteration with deflation."""
    X = np.asarray(X, dtype=np.float64)
    M, d = X.shape
    if out_dim > d:
        raise ShapeError(f"pca_fit: out_dim {out_dim} exceeds feature dim {d}")
    if M < out_dim:
        raise ShapeError(f"pca_fit: need at least {out_dim} rows, got {M}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / max(M - 1, 1)
    scale = max(np.trace(C), np.finfo(float).tiny)
    rank_floor = 1e-12 * scale
    rng = np.random.default_rng(12345)

    rows, variances, iters = [], [], []
    for i in range(out_dim):
        v0 = rng.normal(size=d)
        # start orthogonal to what is already found
        for r in rows:
            v0 -= (v0 @ r) * r
        v, lam, n_it = _power_iterate(C, v0, tol, max_iter)
        if lam <= rank_floor:
            raise RankDeficientError(i, out_dim)
        for r in rows:
            v -= (v @ r) * r
        v /= np.linalg.norm(v)
        rows.append(v)
        variances.append(lam)
        iters.append(n_it)
        C = C - lam * np.outer(v, v)

    P = np.array(rows)
    var = np.array(variances)
    order = np.argsort(-var, kind="stable")
    P, var = P[order], var[order]
    flip = np.sign(P[np.arange(out_dim), np.abs(P).argmax(axis=1)])
    P *= flip[:, None]
    return PCAResult(P, mean, var, [iters[k] for k in order])


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    M = X.shape[0]
    centers = [X[rng.integers(M)]]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(M))
        else:
            idx = int(rng.choice(M, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(1))
    return np.array(centers)


def _lloyd_run(X: np.ndarray, K: int, rng: np.random.Generator, max_iter: int, tol: float):
    M = X.shape[0]
    C = kmeans_pp_init(X, K, rng)
    history: list[float] = []
    d = _sq_dists(X, C)
    assign = d.argmin(axis=1)
    obj = float(d[np.arange(M), assign].sum())
    history.append(obj)
    for _ in range(max_iter):
        newC = C.copy()
        counts = np.bincount(assign, minlength=K)
        for k in range(K):
            if counts[k]:
                newC[k] = X[assign == k].mean(axis=0)
        for k in np.flatnonzero(counts == 0):
            own = d[np.arange(M), assign]
            far = int(own.argmax())
            newC[k] = X[far]
            assign[far] = k
            d[far, k] = 0.0
        C = newC
        d = _sq_dists(X, C)
        assign = d.argmin(axis=1)
        new_obj = float(d[np.arange(M), assign].sum())
        assert new_obj <= obj + 1e-9 * max(1.0, abs(obj)), (
            f"k-means objective increased: {obj} -> {new_obj}"
        )
        history.append(new_obj)
        if obj - new_obj < tol:
            obj = new_obj
            break
        obj = new_obj
    return KMeansResult(C, assign, obj, history)


def kmeans_lloyd(
    X: np.ndarray, K: int, seed: int, max_iter: int = 300, tol: float = 1e-9, n_init: int = 10
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seedings; the best of ``n_init`` runs is kept.

    Each run stops when the objective drops by less than ``tol`` or after
    ``max_iter`` rounds. An emptied cluster is re-seeded at the point farthest
    from its assigned center. The objective must never increase between rounds.
    """
    X = np.asarray(X, dtype=np.float64)
    M = X.shape[0]
    if M < K:
        raise ValueError(f"kmeans_lloyd: need M >= K, got M={M}, K={K}")
    if n_init < 1:
        raise ValueError("kmeans_lloyd: n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd_run(X, K, rng, max_iter, tol)
        if best is None or res.objective < best.objective:
            best = res
    return best


def install_centers(model: C2AModel, projection: np.ndarray, mean: np.ndarray, centers: np.ndarray):
    """Set F to the PCA map ``e -> P (e - mean)`` and load the k-means centers."""
    P = np.asarray(projection, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    f_layer = model.ftn.linear
    if P.shape != f_layer.weight.shape or mean.shape != (f_layer.in_dim,):
        raise ShapeError(
            f"install_centers: projection {P.shape} / mean {mean.shape} do not fit "
            f"feature transform weight {f_layer.weight.shape}"
        )
    f_layer.load(P, -P @ mean)
    model.clusters.set_centers(centers)
    return model


def init_clusters(world: World, config: TrainConfig, model: C2AModel | None = None):
    """Full initialization; returns ``(model, extras)`` with the PCA tensors in extras."""
    model = pretrain_supervised(world, config, model=model)
    feats = collect_features(model, world["target_unlabeled"])
    pca = pca_fit(feats, config.f_e)
    km = kmeans_lloyd(pca.transform(feats), config.K, config.seed, config.kmeans_max_iter)
    install_centers(model, pca.projection, pca.mean, km.centers)
    log.info("k-means objective %.6g after %d rounds", km.objective, len(km.history) - 1)
    return model, {"pca.projection": pca.projection, "pca.mean": pca.mean}
