"""Segmentation metrics and cluster diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .synthworld import IGNORE


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)  # rows = ground truth, cols = prediction
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.num_classes, self.counts + other.counts, self.ignored + other.ignored
        )


def confusion_update(cm: ConfusionMatrix, pred_labels, gt_labels) -> ConfusionMatrix:
    pred = np.asarray(pred_labels).astype(np.int64).ravel()
    gt = np.asarray(gt_labels).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {np.shape(pred_labels)} != gt shape {np.shape(gt_labels)}")
    C = cm.num_classes
    valid = gt != IGNORE
    g, p = gt[valid], pred[valid]
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ValueError(f"ground-truth label out of range [0, {C})")
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ValueError(f"predicted label out of range [0, {C})")
    cm.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    cm.ignored += int((~valid).sum())
    return cm


def miou(cm: ConfusionMatrix):
    """Per-class IoU = TP / (TP + FP + FN); classes never seen nor predicted score 0."""
    tp = np.diag(cm.counts)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    iou = [float(t) / float(u) if u > 0 else 0.0 for t, u in zip(tp, denom)]
    return iou, float(np.mean(iou))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts)) / total if total else 0.0


def miou_per_image(preds, gts, num_classes: int) -> float:
    """Alternative averaging: mIoU of each image, averaged over images."""
    vals = []
    for p, g in zip(preds, gts):
        cm = confusion_update(ConfusionMatrix(num_classes), p, g)
        vals.append(miou(cm)[1])
    return float(np.mean(vals)) if vals else 0.0


def evaluate_segmentation(model, dataset, batch: int = 50) -> dict:
    C = dataset.label_space.num_classes
    cm = ConfusionMatrix(C)
    for i in range(0, len(dataset), batch):
        pred = model.predict_target(dataset.images[i : i + batch])
        confusion_update(cm, pred, dataset.labels[i : i + batch])
    per_class, mean = miou(cm)
    return {"miou": mean, "per_class_iou": per_class, "pixel_acc": pixel_accuracy(cm), "cm": cm}


def cell_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Majority label of every stride x stride patch; IGNORE if the patch is all IGNORE."""
    N, H, W = labels.shape
    p = labels.reshape(N, H // stride, stride, W // stride, stride).transpose(0, 1, 3, 2, 4)
    p = p.reshape(N, H // stride, W // stride, stride * stride).astype(np.int64)
    out = np.full(p.shape[:3], IGNORE, dtype=np.int64)
    valid = p != IGNORE
    maxc = int(p[valid].max()) + 1 if valid.any() else 0
    if maxc:
        counts = np.stack([((p == c) & valid).sum(-1) for c in range(maxc)], axis=-1)
        has = valid.any(-1)
        out[has] = counts[has].argmax(-1)
    return out.reshape(-1)


def cluster_histograms(model, dataset, batch: int = 50) -> dict[int, np.ndarray]:
    """Per class: counts of embedding cells by argmax cluster."""
    K = model.clusters.K
    hist: dict[int, np.ndarray] = {}
    for i in range(0, len(dataset), batch):
        imgs = dataset.images[i : i + batch]
        P, _ = model.clusters.assign(model.embed(imgs))
        arg = P.argmax(axis=1)
        labs = cell_labels(dataset.labels[i : i + batch], model.cfg.stride)
        for c in np.unique(labs):
            if c == IGNORE:
                continue
            h = hist.setdefault(int(c), np.zeros(K, dtype=np.int64))
            h += np.bincount(arg[labs == c], minlength=K)
    return hist


def co_occupancy(h1: np.ndarray, h2: np.ndarray) -> float:
    """Cosine similarity between two cluster histograms."""
    n1, n2 = np.linalg.norm(h1), np.linalg.norm(h2)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(np.dot(h1, h2) / (n1 * n2))


def largest_cluster_frac(model, images: np.ndarray, batch: int = 50) -> float:
    K = model.clusters.K
    counts = np.zeros(K, dtype=np.int64)
    for i in range(0, len(images), batch):
        P, _ = model.clusters.assign(model.embed(images[i : i + batch]))
        counts += np.bincount(P.argmax(axis=1), minlength=K)
    return float(counts.max() / counts.sum()) if counts.sum() else 0.0


def cluster_diagnostics(model, world) -> dict:
    """Selective-alignment diagnostics.

    Source classes are read from the bridge domain and target classes from
    the unlabeled target split, i.e. the two sets the clustering loss sees;
    their diagnostic labels are used here only.
    """
    src_hist = cluster_histograms(model, world["bridge"])
    tgt_hist = cluster_histograms(model, world["target_unlabeled"])
    n_s = world.source_space.num_classes
    n_t = world.target_space.num_classes
    K = model.clusters.K
    zero = np.zeros(K, dtype=np.int64)
    co = np.array(
        [[co_occupancy(src_hist.get(s, zero), tgt_hist.get(t, zero)) for t in range(n_t)]
         for s in range(n_s)]
    )

    # purity over all clustered cells, class identity qualified by label space
    table = np.zeros((K, n_s + n_t), dtype=np.int64)
    for s, h in src_hist.items():
        table[:, s] += h
    for t, h in tgt_hist.items():
        table[:, n_s + t] += h
    occupied = table.sum(axis=1) > 0
    purity = float((table[occupied].max(axis=1) / table[occupied].sum(axis=1)).mean())
    images = np.concatenate([world["bridge"].images, world["target_unlabeled"].images])
    related = [co[s, t] for s, t in world.related_pairs]
    unrelated = [co[s, t] for s, t in world.unrelated_pairs]
    return {
        "co_occupancy": co,
        "related_mean": float(np.mean(related)) if related else float("nan"),
        "unrelated_mean": float(np.mean(unrelated)) if unrelated else float("nan"),
        "purity": purity,
        "largest_cluster_frac": largest_cluster_frac(model, images),
        "source_histograms": src_hist,
        "target_histograms": tgt_hist,
    }
