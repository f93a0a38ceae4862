"""Training objectives and their gradients.

Each loss returns ``(value, grad)`` where ``grad`` is wrt the loss input
(probability map, soft assignments, ...). Losses that own a network pass
(adversarial, clustering) also drive that network's backward.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import ClusterBank, Discriminator
from .synthworld import IGNORE

LAMBDA_ADV = 0.001
_P_FLOOR = 1e-30


def sup_loss(prob_map: np.ndarray, labels: np.ndarray):
    """Pixel cross-entropy, averaged over valid pixels per image then over images.

    ``prob_map`` is ``(N, H, W, C)``, ``labels`` ``(N, H, W)`` with IGNORE
    pixels excluded. Images with no valid pixel contribute 0. Returns the loss
    and its gradient wrt ``prob_map``.
    """
    prob_map = np.asarray(prob_map, dtype=np.float64)
    labels = np.asarray(labels)
    if prob_map.ndim == 3:
        loss, g = sup_loss(prob_map[None], labels[None])
        return loss, g[0]
    N, H, W, C = prob_map.shape
    if labels.shape != (N, H, W):
        raise ValueError(f"labels shape {labels.shape} does not match prob map {prob_map.shape}")
    valid = labels != IGNORE
    lab = np.where(valid, labels, 0).astype(np.int64)
    if np.any(lab >= C):
        raise ValueError(f"label out of range for {C} classes")
    picked = np.take_along_axis(prob_map, lab[..., None], axis=-1)[..., 0]
    picked = np.maximum(picked, _P_FLOOR)
    counts = valid.reshape(N, -1).sum(axis=1)
    weight = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0) / N
    w_pix = valid * weight[:, None, None]
    loss = float(-(w_pix * np.log(picked)).sum())
    grad = np.zeros_like(prob_map)
    np.put_along_axis(grad, lab[..., None], (-w_pix / picked)[..., None], axis=-1)
    return loss, grad


def adv_loss(D: Discriminator, prob_maps_aux: np.ndarray):
    """Generator-side LS-GAN loss: mean of D(P)^2 over bridge images.

    Returns the loss and the gradient wrt the probability maps. The
    discriminator's own grad buffers are not touched.
    """
    score, cache = D.forward(prob_maps_aux)
    n = score.shape[0]
    loss = float(np.mean(score**2))
    grad = D.backward(cache, 2.0 * score / n, accumulate=False)
    return loss, grad


def disc_loss(D: Discriminator, prob_maps_src: np.ndarray, prob_maps_aux: np.ndarray) -> float:
    """Discriminator-side LS-GAN loss; accumulates grads into ``D`` only.

    Source maps are pushed toward score 0 and bridge maps toward 1.
    """
    if len(prob_maps_src) == 0 or len(prob_maps_aux) == 0:
        raise ValueError("disc_loss needs non-empty source and bridge batches")
    s_src, c_src = D.forward(prob_maps_src)
    s_aux, c_aux = D.forward(prob_maps_aux)
    loss = float(np.mean(s_src**2) + np.mean((s_aux - 1.0) ** 2))
    D.backward(c_src, 2.0 * s_src / s_src.shape[0])
    D.backward(c_aux, 2.0 * (s_aux - 1.0) / s_aux.shape[0])
    return loss


def hard_assignment_loss(P: np.ndarray):
    """Mean of -log max_k P[j, k]; ties go to the lowest index.

    Returns the loss and its gradient wrt ``P``.
    """
    M = P.shape[0]
    k = P.argmax(axis=1)
    top = np.maximum(P[np.arange(M), k], _P_FLOOR)
    loss = float(-np.log(top).mean())
    grad = np.zeros_like(P)
    grad[np.arange(M), k] = -1.0 / (M * top)
    return loss, grad


def cluster_loss(bank: ClusterBank, embeddings: np.ndarray, accumulate: bool = True):
    """Constrained clustering loss over embedding cells.

    Returns ``(loss, grad_embeddings)``; center grads go to ``bank``.
    """
    V = np.asarray(embeddings, dtype=np.float64)
    if V.ndim == 1:
        V = V[None]
    if V.shape[0] == 0:
        raise ValueError("cluster_loss needs at least one embedding")
    P, cache = bank.assign(V)
    loss, gP = hard_assignment_loss(P)
    return loss, bank.assign_backward(cache, gP, accumulate=accumulate)


def target_distribution_q(p_batch: np.ndarray) -> np.ndarray:
    """Sharpened, frequency-normalised targets: q_jk ∝ p_jk^2 / sum_j p_jk."""
    p = np.asarray(p_batch, dtype=np.float64)
    f = p.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(f > 0, p**2 / f, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def kl_loss(p_batch: np.ndarray, q_batch: np.ndarray):
    """(1/M) sum_j sum_k q log(q / p) with q held constant.

    Returns the loss and its gradient wrt ``p_batch``.
    """
    p = np.maximum(np.asarray(p_batch, dtype=np.float64), _P_FLOOR)
    q = np.asarray(q_batch, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"p {p.shape} and q {q.shape} differ in shape")
    M = p.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - np.log(p)), 0.0)
    return float(terms.sum() / M), -q / (p * M)


def lambda_c_schedule(delta: float) -> float:
    delta = min(max(float(delta), 0.0), 1.0)
    return 2.0 / (1.0 + math.exp(-10.0 * delta)) - 1.0


@dataclass
class LossReport:
    l_sup_s: float = 0.0
    l_sup_t: float = 0.0
    l_adv: float = 0.0
    l_disc: float = 0.0
    l_c: float = 0.0
    l_kl: float = 0.0
    lambda_adv: float = LAMBDA_ADV
    lambda_c: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def total_objective(
    l_sup_s: float = 0.0,
    l_sup_t: float = 0.0,
    l_adv: float = 0.0,
    l_c: float = 0.0,
    l_kl: float = 0.0,
    lambda_adv: float = LAMBDA_ADV,
    lambda_c: float = 0.0,
    l_disc: float = 0.0,
) -> LossReport:
    """Compose the generator objective; ``l_disc`` is carried but not summed."""
    total = l_sup_s + l_sup_t + lambda_adv * l_adv + lambda_c * (l_c + l_kl)
    report = LossReport(l_sup_s, l_sup_t, l_adv, l_disc, l_c, l_kl, lambda_adv, lambda_c, total)
    for k, v in report.as_dict().items():
        if not math.isfinite(v):
            raise FloatingPointError(f"loss report entry {k} is not finite: {v}")
    return report
