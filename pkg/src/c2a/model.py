"""Network components with explicit forward/backward passes.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes that cache plus the output gradient, accumulates parameter gradients
and returns the gradient wrt the input. Convolutions are replaced by
patchify + linear layers, so a stride-``s`` conv with an ``s x s`` kernel
becomes a linear map over flattened ``s x s`` patches.

All maps are batched: images are ``(N, H, W, 3)``, encoder maps
``(N, H', W', f_d)``, probability maps ``(N, H, W, C)``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import (
    LinearLayer,
    NonFiniteError,
    Parameter,
    ShapeError,
    check_finite,
    leaky_relu_backward,
    leaky_relu_forward,
    softmax,
    softmax_backward,
)
from .tensorio import read_tensor_file, write_tensor_file


def patchify(x: np.ndarray, s: int) -> np.ndarray:
    """(N, H, W, C) -> (N, H/s, W/s, s*s*C), patches flattened row-major."""
    N, H, W, C = x.shape
    if H % s or W % s:
        raise ShapeError(f"spatial dims {(H, W)} not divisible by stride {s}")
    p = x.reshape(N, H // s, s, W // s, s, C).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(N, H // s, W // s, s * s * C)


def unpatchify(p: np.ndarray, s: int, C: int) -> np.ndarray:
    N, h, w, _ = p.shape
    x = p.reshape(N, h, w, s, s, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, h * s, w * s, C)


def upsample_nearest(x: np.ndarray, s: int) -> np.ndarray:
    return np.repeat(np.repeat(x, s, axis=1), s, axis=2)


def upsample_nearest_backward(g: np.ndarray, s: int) -> np.ndarray:
    N, H, W, C = g.shape
    return g.reshape(N, H // s, s, W // s, s, C).sum(axis=(2, 4))


def _require_rank(x: np.ndarray, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank-{rank} input, got shape {x.shape}")


class Encoder:
    def __init__(self, stride: int, hidden: int, out_dim: int, slope: float, rng=None):
        self.stride = stride
        self.slope = slope
        self.l1 = LinearLayer(stride * stride * 3, hidden, rng)
        self.l2 = LinearLayer(hidden, out_dim, rng)

    def named_layers(self):
        return {"l1": self.l1, "l2": self.l2}

    def forward(self, images: np.ndarray):
        _require_rank(images, 4, "encoder_forward")
        if images.shape[-1] != 3:
            raise ShapeError(f"encoder_forward: expected 3 channels, got {images.shape}")
        patches = patchify(images, self.stride)
        z1 = self.l1.forward(patches)
        a1 = leaky_relu_forward(z1, self.slope)
        out = check_finite(self.l2.forward(a1), "encoder map")
        return out, (patches, z1, a1)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        patches, z1, a1 = cache
        g = self.l2.backward(a1, grad_out)
        g = leaky_relu_backward(z1, g, self.slope)
        g = self.l1.backward(patches, g)
        return unpatchify(g, self.stride, 3)


class Decoder:
    """Per-cell linear classifier, softmax, nearest upsampling by ``stride``."""

    def __init__(self, in_dim: int, num_classes: int, stride: int, rng=None):
        self.stride = stride
        self.linear = LinearLayer(in_dim, num_classes, rng)

    def named_layers(self):
        return {"linear": self.linear}

    @property
    def num_classes(self) -> int:
        return self.linear.out_dim

    def forward(self, emap: np.ndarray):
        _require_rank(emap, 4, "decoder_forward")
        logits = check_finite(self.linear.forward(emap), "decoder logits")
        p_cell = softmax(logits)
        return upsample_nearest(p_cell, self.stride), (emap, p_cell)

    def backward(self, cache, grad_prob: np.ndarray) -> np.ndarray:
        emap, p_cell = cache
        g_cell = upsample_nearest_backward(grad_prob, self.stride)
        g_logit = softmax_backward(p_cell, g_cell)
        return self.linear.backward(emap, g_logit)

    def predict(self, emap: np.ndarray) -> np.ndarray:
        logits = self.linear.forward(emap)
        return upsample_nearest(logits.argmax(axis=-1)[..., None], self.stride)[..., 0]


class FeatureTransform:
    """Per-cell linear map f_d -> f_e (1x1 convolution analogue)."""

    def __init__(self, in_dim: int, out_dim: int, rng=None):
        self.linear = LinearLayer(in_dim, out_dim, rng)

    def named_layers(self):
        return {"linear": self.linear}

    def forward(self, emap: np.ndarray):
        _require_rank(emap, 4, "ftn_forward")
        return check_finite(self.linear.forward(emap), "embedding map"), emap

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        return self.linear.backward(cache, grad_out)


class Discriminator:
    """Four stride-2 patch-linear layers with leaky ReLU, spatial mean, scalar head.

    The score is unsquashed; the least-squares losses target 0 and 1 directly.
    """

    def __init__(self, in_channels: int, channels=(16, 16, 16, 16), slope: float = 0.2, rng=None):
        self.slope = slope
        self.layers: list[LinearLayer] = []
        c = in_channels
        for c_out in channels:
            self.layers.append(LinearLayer(4 * c, c_out, rng))
            c = c_out
        self.head = LinearLayer(c, 1, rng)

    def named_layers(self):
        out = {f"l{i + 1}": layer for i, layer in enumerate(self.layers)}
        out["head"] = self.head
        return out

    def forward(self, prob_map: np.ndarray):
        _require_rank(prob_map, 4, "discriminator_forward")
        if prob_map.shape[-1] * 4 != self.layers[0].in_dim:
            raise ShapeError(
                f"discriminator_forward: expected {self.layers[0].in_dim // 4} channels, "
                f"got {prob_map.shape}"
            )
        acts = []
        h = prob_map
        for layer in self.layers:
            p = patchify(h, 2)
            z = layer.forward(p)
            acts.append((p, z, h.shape[-1]))
            h = leaky_relu_forward(z, self.slope)
        pooled = h.mean(axis=(1, 2))
        score = check_finite(self.head.forward(pooled)[:, 0], "discriminator score")
        return score, (acts, h.shape, pooled)

    def backward(self, cache, grad_score: np.ndarray, accumulate: bool = True) -> np.ndarray:
        """Gradient wrt the probability map; parameter grads only if ``accumulate``."""
        acts, h_shape, pooled = cache
        g = self.head.backward(pooled, grad_score[:, None], accumulate=accumulate)
        N, h, w, c = h_shape
        g = np.broadcast_to(g[:, None, None, :] / (h * w), h_shape)
        for layer, (p, z, c_in) in zip(reversed(self.layers), reversed(acts)):
            g = leaky_relu_backward(z, g, self.slope)
            g = layer.backward(p, g, accumulate=accumulate)
            g = unpatchify(g, 2, c_in)
        return g


def _normalize(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= 1e-8):
        raise ValueError(f"{what}: zero-norm vector (norm <= 1e-8)")
    return x / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray):
    radial = (unit * grad_unit).sum(axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


class ClusterBank:
    """K trainable centers; soft assignment by softmax over cosine similarity."""

    def __init__(self, centers: np.ndarray, temperature: float = 1.0):
        centers = np.asarray(centers, dtype=np.float64)
        if centers.ndim != 2:
            raise ShapeError(f"centers must be (K, f_e), got {centers.shape}")
        self.centers = Parameter(centers)
        self.temperature = temperature
        self.check()

    @property
    def K(self) -> int:
        return self.centers.value.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.value.shape[1]

    def check(self) -> None:
        norms = np.linalg.norm(self.centers.value, axis=1)
        if np.any(norms <= 1e-8):
            raise ValueError(f"cluster center with norm <= 1e-8: {norms.min():.3g}")

    def set_centers(self, centers: np.ndarray) -> None:
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape != self.centers.value.shape:
            raise ShapeError(f"centers {centers.shape} != bank {self.centers.value.shape}")
        self.centers.value[...] = centers
        self.check()

    def parameters(self):
        return [self.centers]

    def zero_grad(self):
        self.centers.zero_grad()

    def cosine(self, V: np.ndarray):
        if V.ndim != 2 or V.shape[1] != self.dim:
            raise ShapeError(f"embeddings {V.shape} incompatible with centers {self.centers.shape}")
        vn, vnorm = _normalize(V, "cluster_assign")
        mn, mnorm = _normalize(self.centers.value, "cluster centers")
        return vn @ mn.T, (vn, vnorm, mn, mnorm)

    def assign(self, V: np.ndarray):
        """(M, f_e) -> soft assignments (M, K)."""
        cos, norm_cache = self.cosine(V)
        P = softmax(cos / self.temperature)
        return P, (P, norm_cache)

    def assign_backward(self, cache, grad_P: np.ndarray, accumulate: bool = True) -> np.ndarray:
        P, (vn, vnorm, mn, mnorm) = cache
        g_cos = softmax_backward(P, grad_P) / self.temperature
        g_vn = g_cos @ mn
        if accumulate:
            g_mn = g_cos.T @ vn
            self.centers.grad += _normalize_backward(mn, mnorm, g_mn)
        return _normalize_backward(vn, vnorm, g_vn)


def cluster_assign(bank: ClusterBank, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return bank.assign(v.reshape(1, -1))[0][0]


def encoder_forward(E: Encoder, image):
    return E.forward(image)


def decoder_forward(G: Decoder, encoder_map):
    return G.forward(encoder_map)


def ftn_forward(F: FeatureTransform, encoder_map):
    return F.forward(encoder_map)


def discriminator_forward(D: Discriminator, prob_map):
    return D.forward(prob_map)


@dataclass
class ModelConfig:
    height: int = 16
    width: int = 16
    stride: int = 4
    hidden: int = 32
    f_d: int = 32
    f_e: int = 16
    K: int = 10
    n_source_classes: int = 4
    n_target_classes: int = 3
    slope: float = 0.2
    disc_channels: list = field(default_factory=lambda: [16, 16, 16, 16])
    temperature: float = 1.0

    def validate(self) -> None:
        if self.height % self.stride or self.width % self.stride:
            raise ShapeError(
                f"image size {(self.height, self.width)} not divisible by stride {self.stride}"
            )
        d = 2 ** len(self.disc_channels)
        if self.height % d or self.width % d:
            raise ShapeError(
                f"image size {(self.height, self.width)} not divisible by discriminator "
                f"downsampling {d}"
            )


class C2AModel:
    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 101])
        self.encoder = Encoder(cfg.stride, cfg.hidden, cfg.f_d, cfg.slope, rng)
        self.decoder_s = Decoder(cfg.f_d, cfg.n_source_classes, cfg.stride, rng)
        self.decoder_t = Decoder(cfg.f_d, cfg.n_target_classes, cfg.stride, rng)
        self.ftn = FeatureTransform(cfg.f_d, cfg.f_e, rng)
        self.disc = Discriminator(cfg.n_source_classes, tuple(cfg.disc_channels), 0.2, rng)
        centers = rng.normal(size=(cfg.K, cfg.f_e))
        self.clusters = ClusterBank(centers, cfg.temperature)

    def modules(self):
        return {
            "encoder": self.encoder,
            "decoder_s": self.decoder_s,
            "decoder_t": self.decoder_t,
            "ftn": self.ftn,
            "disc": self.disc,
        }

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for mname, mod in self.modules().items():
            for lname, layer in mod.named_layers().items():
                out[f"{mname}.{lname}.weight"] = layer.weight
                out[f"{mname}.{lname}.bias"] = layer.bias
        out["clusters.centers"] = self.clusters.centers
        return out

    def group(self, name: str) -> list[Parameter]:
        params = self.named_parameters()
        prefixes = {
            "generator": ("encoder.", "decoder_s.", "decoder_t.", "ftn."),
            "disc": ("disc.",),
            "clusters": ("clusters.",),
        }[name]
        return [p for k, p in params.items() if k.startswith(prefixes)]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def copy(self) -> "C2AModel":
        return copy.deepcopy(self)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError("missing parameters: " + ", ".join(missing))
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value[...] = v
        self.clusters.check()

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Flattened embedding cells F(E(x)), image-major then row-major."""
        emap, _ = self.encoder.forward(images)
        emb, _ = self.ftn.forward(emap)
        return emb.reshape(-1, emb.shape[-1])

    def predict_target(self, images: np.ndarray) -> np.ndarray:
        emap, _ = self.encoder.forward(images)
        return self.decoder_t.predict(emap)

    def predict_source(self, images: np.ndarray) -> np.ndarray:
        emap, _ = self.encoder.forward(images)
        return self.decoder_s.predict(emap)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MANIFEST = "checkpoint.json"


def save_checkpoint(
    model: C2AModel,
    out_dir: str | os.PathLike,
    meta: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in model.named_parameters().items():
        fname = f"{name}.c2at"
        write_tensor_file(out / fname, p.value)
        tensors[name] = fname
    extra_files = {}
    for name, arr in (extras or {}).items():
        fname = f"{name}.c2at"
        write_tensor_file(out / fname, np.asarray(arr, dtype=np.float64))
        extra_files[name] = fname
    manifest = {
        "format": "c2a-checkpoint",
        "version": 1,
        "model_config": asdict(model.cfg),
        "params": tensors,
        "extras": extra_files,
        "meta": meta or {},
    }
    (out / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(ckpt_dir: str | os.PathLike):
    """Returns ``(model, meta, extras)``."""
    root = Path(ckpt_dir)
    manifest = json.loads((root / CHECKPOINT_MANIFEST).read_text())
    cfg = ModelConfig(**manifest["model_config"])
    model = C2AModel(cfg, seed=0)
    state = {k: read_tensor_file(root / f) for k, f in manifest["params"].items()}
    model.load_state(state)
    extras = {k: read_tensor_file(root / f) for k, f in manifest.get("extras", {}).items()}
    return model, manifest.get("meta", {}), extras


__all__ = [
    "C2AModel",
    "ClusterBank",
    "Decoder",
    "Discriminator",
    "Encoder",
    "FeatureTransform",
    "ModelConfig",
    "NonFiniteError",
    "cluster_assign",
    "decoder_forward",
    "discriminator_forward",
    "encoder_forward",
    "ftn_forward",
    "load_checkpoint",
    "save_checkpoint",
]
