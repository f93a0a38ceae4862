"""Procedural multi-domain dense-prediction worlds.

A world has a labeled source domain, an unlabeled bridge domain that shares
the source label space but the target's appearance, and a target domain with
a disjoint label space split into a few labeled images, unlabeled images and
a validation set.

Each image is an ``H x W x 3`` grid. A recursive guillotine partition cuts the
grid into rectangles, each rectangle gets a class, and every pixel is the
class prototype pushed through the domain's affine appearance map plus
i.i.d. Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import read_tensor_file, write_tensor_file

IGNORE = 65535
DOMAINS = ("source", "bridge", "target_labeled", "target_unlabeled", "target_val")
PROTO_DIM = 3


class WorldSpecError(ValueError):
    pass


@dataclass
class LabelSpace:
    name: str
    class_names: list[str]
    prototypes: np.ndarray  # (C, 3)
    id_offset: int = 0  # global ids are id_offset + local id

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def class_ids(self) -> list[int]:
        return list(range(self.num_classes))

    def global_ids(self) -> set[int]:
        return {self.id_offset + c for c in self.class_ids}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "id_offset": self.id_offset,
            "classes": [{"id": i, "name": n} for i, n in enumerate(self.class_names)],
            "prototypes": self.prototypes.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabelSpace":
        classes = sorted(d["classes"], key=lambda c: c["id"])
        if [c["id"] for c in classes] != list(range(len(classes))):
            raise WorldSpecError(f"class ids of {d['name']} are not contiguous from 0")
        return cls(
            name=d["name"],
            class_names=[c["name"] for c in classes],
            prototypes=np.asarray(d["prototypes"], dtype=np.float64),
            id_offset=int(d.get("id_offset", 0)),
        )


@dataclass
class DomainDataset:
    domain_tag: str
    images: np.ndarray  # (N, H, W, 3) float64
    labels: np.ndarray  # (N, H, W) uint16, IGNORE for unlabeled pixels
    label_space: LabelSpace
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx, domain_tag: str | None = None) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DomainDataset(
            domain_tag=domain_tag or self.domain_tag,
            images=self.images[idx],
            labels=self.labels[idx],
            label_space=self.label_space,
            seed=self.seed,
        )


def _identity3():
    return np.eye(3).tolist()


@dataclass
class Affine:
    matrix: list = field(default_factory=_identity3)
    offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def apply(self, p: np.ndarray) -> np.ndarray:
        return p @ np.asarray(self.matrix, dtype=np.float64).T + np.asarray(self.offset)


# "real" appearance shared by the bridge and the target
_REAL_AFFINE = dict(
    matrix=[[0.8, 0.3, 0.0], [-0.2, 0.9, 0.1], [0.1, -0.2, 1.1]],
    offset=[0.6, -0.4, 0.3],
)


@dataclass
class WorldSpec:
    height: int = 16
    width: int = 16
    n_source: int = 200
    n_bridge: int = 100
    n_target: int = 100
    n_val: int = 100
    sigma: float = 0.04
    min_region: int = 2
    max_depth: int = 4
    cut_prob: float = 0.85
    source_classes: list = field(
        default_factory=lambda: ["road", "building", "vegetation", "sky"]
    )
    target_classes: list = field(default_factory=lambda: ["floor", "wall", "chair"])
    # target class index -> related source class index, or None if unrelated
    correspondence: list = field(default_factory=lambda: [0, 1, None])
    epsilon: float = 0.25
    prototype_box: float = 1.5
    source_separation: float = 1.2
    noise_std: float = 2.0
    background_prob: float = 0.0
    source_affine: Affine = field(default_factory=Affine)
    bridge_affine: Affine = field(default_factory=lambda: Affine(**_REAL_AFFINE))
    target_affine: Affine = field(default_factory=lambda: Affine(**_REAL_AFFINE))

    def validate(self) -> None:
        if not self.source_classes or not self.target_classes:
            raise WorldSpecError("degenerate spec: zero classes")
        if len(self.correspondence) != len(self.target_classes):
            raise WorldSpecError("correspondence must have one entry per target class")
        for c in self.correspondence:
            if c is not None and not (0 <= c < len(self.source_classes)):
                raise WorldSpecError(f"correspondence entry {c} is not a source class")
        if not (0.0 <= self.sigma <= 1.0):
            raise WorldSpecError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.height < 1 or self.width < 1:
            raise WorldSpecError("grid must be non-empty")
        for name in ("n_source", "n_bridge", "n_target", "n_val"):
            if getattr(self, name) < 1:
                raise WorldSpecError(f"{name} must be >= 1")
        if self.min_region < 1:
            raise WorldSpecError("min_region must be >= 1")
        if self.epsilon <= 0:
            raise WorldSpecError("epsilon must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise WorldSpecError("unknown world spec keys: " + ", ".join(unknown))
        kw = dict(d)
        for k in ("source_affine", "bridge_affine", "target_affine"):
            if k in kw and isinstance(kw[k], dict):
                kw[k] = Affine(**kw[k])
        return cls(**kw)


@dataclass
class World:
    spec: WorldSpec
    seed: int
    source_space: LabelSpace
    target_space: LabelSpace
    domains: dict[str, DomainDataset]

    def __getitem__(self, tag: str) -> DomainDataset:
        return self.domains[tag]

    @property
    def related_pairs(self) -> list[tuple[int, int]]:
        return [(s, t) for t, s in enumerate(self.spec.correspondence) if s is not None]

    @property
    def unrelated_pairs(self) -> list[tuple[int, int]]:
        related = set(self.related_pairs)
        return [
            (s, t)
            for s in range(self.source_space.num_classes)
            for t in range(self.target_space.num_classes)
            if (s, t) not in related
        ]


def _sample_prototypes(spec: WorldSpec, rng: np.random.Generator):
    box = spec.prototype_box
    n_s = len(spec.source_classes)
    src: list[np.ndarray] = []
    for _ in range(100_000):
        if len(src) == n_s:
            break
        cand = rng.uniform(-box, box, size=PROTO_DIM)
        if all(np.linalg.norm(cand - p) >= spec.source_separation for p in src):
            src.append(cand)
    else:
        raise WorldSpecError("could not place source prototypes; lower source_separation")

    eps = spec.epsilon
    tgt: list[np.ndarray | None] = [None] * len(spec.target_classes)
    for t, s in enumerate(spec.correspondence):
        if s is None:
            continue
        d = rng.normal(size=PROTO_DIM)
        d /= np.linalg.norm(d)
        tgt[t] = src[s] + d * eps * rng.uniform(0.5, 1.0)
    for t, s in enumerate(spec.correspondence):
        if s is not None:
            continue
        for _ in range(100_000):
            cand = rng.uniform(-2 * box, 2 * box, size=PROTO_DIM)
            far_src = min(np.linalg.norm(cand - p) for p in src) > 5 * eps
            others = [p for p in tgt if p is not None]
            far_tgt = all(np.linalg.norm(cand - p) > 5 * eps for p in others)
            if far_src and far_tgt:
                tgt[t] = cand
                break
        else:
            raise WorldSpecError("could not place an unrelated target prototype")
    return np.array(src), np.array(tgt)


def _guillotine(rng, h0, w0, h, w, depth, spec, out):
    min_r = spec.min_region
    can_h = h >= 2 * min_r
    can_w = w >= 2 * min_r
    if depth >= spec.max_depth or not (can_h or can_w) or rng.random() > spec.cut_prob:
        out.append((h0, w0, h, w))
        return
    if can_h and can_w:
        horizontal = rng.random() < h / (h + w)
    else:
        horizontal = can_h
    if horizontal:
        cut = int(rng.integers(min_r, h - min_r + 1))
        _guillotine(rng, h0, w0, cut, w, depth + 1, spec, out)
        _guillotine(rng, h0 + cut, w0, h - cut, w, depth + 1, spec, out)
    else:
        cut = int(rng.integers(min_r, w - min_r + 1))
        _guillotine(rng, h0, w0, h, cut, depth + 1, spec, out)
        _guillotine(rng, h0, w0 + cut, h, w - cut, depth + 1, spec, out)


def partition(rng: np.random.Generator, spec: WorldSpec) -> list[tuple[int, int, int, int]]:
    """Recursive guillotine cuts of the grid into (row, col, height, width) rects."""
    out: list[tuple[int, int, int, int]] = []
    _guillotine(rng, 0, 0, spec.height, spec.width, 0, spec, out)
    return out


def render_images(
    spec: WorldSpec,
    prototypes: np.ndarray,
    affine: Affine,
    n: int,
    rng: np.random.Generator,
):
    C = prototypes.shape[0]
    H, W = spec.height, spec.width
    colors = affine.apply(prototypes)
    background = affine.apply(np.zeros((1, PROTO_DIM)))[0]
    images = np.empty((n, H, W, PROTO_DIM))
    labels = np.empty((n, H, W), dtype=np.uint16)
    for i in range(n):
        for r, c, h, w in partition(rng, spec):
            if spec.background_prob > 0 and rng.random() < spec.background_prob:
                labels[i, r : r + h, c : c + w] = IGNORE
                images[i, r : r + h, c : c + w] = background
            else:
                k = int(rng.integers(C))
                labels[i, r : r + h, c : c + w] = k
                images[i, r : r + h, c : c + w] = colors[k]
        if spec.noise_std > 0:
            images[i] += rng.normal(scale=spec.noise_std, size=(H, W, PROTO_DIM))
    return images, labels


def split_target(dataset: DomainDataset, sigma: float, seed: int):
    """Shuffled split into (labeled, unlabeled) with round(sigma * N) labeled."""
    if not (0.0 <= sigma <= 1.0):
        raise WorldSpecError(f"sigma must be in [0, 1], got {sigma}")
    n = len(dataset)
    n_lab = int(math.floor(sigma * n + 0.5))
    order = np.random.default_rng([seed, 7919]).permutation(n)
    lab = np.sort(order[:n_lab])
    unl = np.sort(order[n_lab:])
    return (
        dataset.subset(lab, "target_labeled"),
        dataset.subset(unl, "target_unlabeled"),
    )


def generate_world(spec: WorldSpec, seed: int) -> World:
    spec.validate()
    rng_proto = np.random.default_rng([seed, 0])
    src_proto, tgt_proto = _sample_prototypes(spec, rng_proto)
    source_space = LabelSpace("source", list(spec.source_classes), src_proto, 0)
    target_space = LabelSpace(
        "target", list(spec.target_classes), tgt_proto, len(spec.source_classes)
    )

    def make(tag, space, affine, n, stream):
        imgs, labs = render_images(
            spec, space.prototypes, affine, n, np.random.default_rng([seed, stream])
        )
        return DomainDataset(tag, imgs, labs, space, seed)

    source = make("source", source_space, spec.source_affine, spec.n_source, 1)
    bridge = make("bridge", source_space, spec.bridge_affine, spec.n_bridge, 2)
    pool = make("target_pool", target_space, spec.target_affine, spec.n_target, 3)
    val = make("target_val", target_space, spec.target_affine, spec.n_val, 4)
    labeled, unlabeled = split_target(pool, spec.sigma, seed)
    domains = {
        "source": source,
        "bridge": bridge,
        "target_labeled": labeled,
        "target_unlabeled": unlabeled,
        "target_val": val,
    }
    return World(spec, seed, source_space, target_space, domains)


# ---------------------------------------------------------------- on-disk form

MANIFEST = "world.json"


def save_world(world: World, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = {}
    for tag, ds in world.domains.items():
        entry = {"label_space": ds.label_space.name, "n": len(ds)}
        if len(ds):
            img_name, lab_name = f"{tag}.images.c2at", f"{tag}.labels.c2at"
            write_tensor_file(out / img_name, ds.images)
            write_tensor_file(out / lab_name, ds.labels)
            entry.update(images=img_name, labels=lab_name)
        domains[tag] = entry
    manifest = {
        "format": "c2a-world",
        "version": 1,
        "seed": int(world.seed),
        "spec": world.spec.to_json(),
        "label_spaces": {
            "source": world.source_space.to_json(),
            "target": world.target_space.to_json(),
        },
        "domains": domains,
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_world(world_dir: str | os.PathLike) -> World:
    root = Path(world_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    spec = WorldSpec.from_json(manifest["spec"])
    spaces = {k: LabelSpace.from_json(v) for k, v in manifest["label_spaces"].items()}
    seed = int(manifest["seed"])
    domains = {}
    for tag, entry in manifest["domains"].items():
        space = spaces[entry["label_space"]]
        if entry["n"]:
            images = read_tensor_file(root / entry["images"])
            labels = read_tensor_file(root / entry["labels"])
        else:
            images = np.empty((0, spec.height, spec.width, PROTO_DIM))
            labels = np.empty((0, spec.height, spec.width), dtype=np.uint16)
        domains[tag] = DomainDataset(tag, images, labels, space, seed)
    return World(spec, seed, spaces["source"], spaces["target"], domains)


def tree_digest(root: str | os.PathLike) -> str:
    """sha256 over relative paths and file contents, in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def sample_batch(n: int, batch_size: int, seed: int, it: int, stream: int) -> np.ndarray:
    """Indices of a mini-batch; a pure function of (seed, iteration, stream)."""
    if n == 0:
        return np.empty(0, dtype=np.int64)
    rng = np.random.default_rng([seed, it, stream])
    if n <= batch_size:
        return rng.permutation(n)
    return rng.choice(n, size=batch_size, replace=False)
