"""Finite-difference checks for every network component and every loss.

Each case builds a small random instance from a seed, computes analytic
gradients through the hand-written backward passes and compares them with
central differences via :func:`finite_diff_check`.
"""

from __future__ import annotations

import numpy as np

from .losses import (
    adv_loss,
    cluster_loss,
    disc_loss,
    kl_loss,
    sup_loss,
    target_distribution_q,
)
from .model import C2AModel, ModelConfig
from .synthworld import IGNORE
from .tensorcore import finite_diff_check

SMALL = ModelConfig(
    height=16,
    width=16,
    stride=4,
    hidden=5,
    f_d=6,
    f_e=4,
    K=3,
    n_source_classes=3,
    n_target_classes=2,
    disc_channels=[3, 3, 3, 3],
)


def _small(seed: int) -> tuple[C2AModel, np.random.Generator]:
    model = C2AModel(SMALL, seed)
    rng = np.random.default_rng([seed, 77])
    for p in model.named_parameters().values():
        if p.value.ndim == 1:  # random biases so no unit sits exactly at a kink
            p.value[:] = rng.normal(scale=0.3, size=p.value.shape)
    return model, rng


def _check(loss_fn, tensors, grads, rng, n=40):
    return finite_diff_check(loss_fn, tensors, grads, eps=1e-5, n_samples=n, rng=rng)


def _values(params):
    return [p.value for p in params]


def _grads(params):
    # snapshot: some losses accumulate into the buffers on every call
    return [p.grad.copy() for p in params]


def check_encoder(seed: int) -> float:
    model, rng = _small(seed)
    E = model.encoder
    x = rng.normal(size=(2, 16, 16, 3))
    c = rng.normal(size=(2, 4, 4, SMALL.f_d))

    def loss():
        return float((c * E.forward(x)[0]).sum())

    model.zero_grad()
    _, cache = E.forward(x)
    gx = E.backward(cache, c)
    params = [E.l1.weight, E.l1.bias, E.l2.weight, E.l2.bias]
    return max(_check(loss, _values(params), _grads(params), rng), _check(loss, [x], [gx], rng))


def check_decoder(seed: int) -> float:
    model, rng = _small(seed)
    G = model.decoder_s
    emap = rng.normal(size=(2, 4, 4, SMALL.f_d))
    c = rng.normal(size=(2, 16, 16, SMALL.n_source_classes))

    def loss():
        return float((c * G.forward(emap)[0]).sum())

    model.zero_grad()
    _, cache = G.forward(emap)
    g = G.backward(cache, c)
    params = [G.linear.weight, G.linear.bias]
    return max(_check(loss, _values(params), _grads(params), rng), _check(loss, [emap], [g], rng))


def check_ftn(seed: int) -> float:
    model, rng = _small(seed)
    F = model.ftn
    emap = rng.normal(size=(2, 4, 4, SMALL.f_d))
    c = rng.normal(size=(2, 4, 4, SMALL.f_e))

    def loss():
        return float((c * F.forward(emap)[0]).sum())

    model.zero_grad()
    _, cache = F.forward(emap)
    g = F.backward(cache, c)
    params = [F.linear.weight, F.linear.bias]
    return max(_check(loss, _values(params), _grads(params), rng), _check(loss, [emap], [g], rng))


def check_discriminator(seed: int) -> float:
    model, rng = _small(seed)
    D = model.disc
    x = rng.normal(size=(3, 16, 16, SMALL.n_source_classes))
    c = rng.normal(size=3)

    def loss():
        return float((c * D.forward(x)[0]).sum())

    model.zero_grad()
    _, cache = D.forward(x)
    gx = D.backward(cache, c)
    params = model.group("disc")
    return max(_check(loss, _values(params), _grads(params), rng), _check(loss, [x], [gx], rng))


def check_cluster_assign(seed: int) -> float:
    model, rng = _small(seed)
    bank = model.clusters
    V = rng.normal(size=(7, SMALL.f_e))
    c = rng.normal(size=(7, SMALL.K))

    def loss():
        return float((c * bank.assign(V)[0]).sum())

    model.zero_grad()
    _, cache = bank.assign(V)
    gV = bank.assign_backward(cache, c)
    return max(
        _check(loss, [bank.centers.value], [bank.centers.grad.copy()], rng),
        _check(loss, [V], [gV], rng),
    )


def _labels(rng, n, C, ignore_frac=0.2):
    lab = rng.integers(0, C, size=(n, 16, 16)).astype(np.int64)
    lab[rng.random(lab.shape) < ignore_frac] = IGNORE
    return lab


def check_sup_loss(seed: int) -> float:
    """Cross-entropy through decoder and encoder."""
    model, rng = _small(seed)
    E, G = model.encoder, model.decoder_t
    x = rng.normal(size=(2, 16, 16, 3))
    y = _labels(rng, 2, SMALL.n_target_classes)

    def loss():
        return sup_loss(G.forward(E.forward(x)[0])[0], y)[0]

    model.zero_grad()
    emap, ec = E.forward(x)
    prob, dc = G.forward(emap)
    _, g = sup_loss(prob, y)
    E.backward(ec, G.backward(dc, g))
    params = [E.l1.weight, E.l2.weight, E.l2.bias, G.linear.weight, G.linear.bias]
    return _check(loss, _values(params), _grads(params), rng)


def check_adv_loss(seed: int) -> float:
    """Generator-side gradient with the discriminator held fixed."""
    model, rng = _small(seed)
    E, G, D = model.encoder, model.decoder_s, model.disc
    x = rng.normal(size=(2, 16, 16, 3))

    def loss():
        return adv_loss(D, G.forward(E.forward(x)[0])[0])[0]

    model.zero_grad()
    emap, ec = E.forward(x)
    prob, dc = G.forward(emap)
    _, g = adv_loss(D, prob)
    E.backward(ec, G.backward(dc, g))
    if any(p.grad.any() for p in model.group("disc")):
        return float("inf")
    params = [E.l1.weight, E.l1.bias, E.l2.weight, G.linear.weight, G.linear.bias]
    return _check(loss, _values(params), _grads(params), rng)


def check_disc_loss(seed: int) -> float:
    model, rng = _small(seed)
    D = model.disc
    C = SMALL.n_source_classes
    src = rng.dirichlet(np.ones(C), size=(2, 16, 16))
    aux = rng.dirichlet(np.ones(C), size=(3, 16, 16))

    def loss():
        return disc_loss(D, src, aux)

    model.zero_grad()
    disc_loss(D, src, aux)
    gen = model.group("generator") + model.group("clusters")
    if any(p.grad.any() for p in gen):
        return float("inf")
    params = model.group("disc")
    return _check(loss, _values(params), _grads(params), rng)


def check_cluster_loss(seed: int) -> float:
    """Hard-assignment loss through the bank, F and E."""
    model, rng = _small(seed)
    E, F, bank = model.encoder, model.ftn, model.clusters
    x = rng.normal(size=(2, 16, 16, 3))

    def embed():
        return F.forward(E.forward(x)[0])[0].reshape(-1, SMALL.f_e)

    def loss():
        return cluster_loss(bank, embed())[0]

    model.zero_grad()
    emap, ec = E.forward(x)
    emb, fc = F.forward(emap)
    _, gV = cluster_loss(bank, emb.reshape(-1, SMALL.f_e))
    E.backward(ec, F.backward(fc, gV.reshape(emb.shape)))
    params = [bank.centers, F.linear.weight, F.linear.bias, E.l2.weight, E.l1.weight]
    return _check(loss, _values(params), _grads(params), rng)


def check_kl_loss(seed: int) -> float:
    """KL to a frozen target distribution, through the soft assignment."""
    model, rng = _small(seed)
    bank = model.clusters
    V = rng.normal(size=(9, SMALL.f_e))
    q = target_distribution_q(bank.assign(V)[0])

    def loss():
        return kl_loss(bank.assign(V)[0], q)[0]

    model.zero_grad()
    P, cache = bank.assign(V)
    _, gP = kl_loss(P, q)
    gV = bank.assign_backward(cache, gP)
    return max(
        _check(loss, [bank.centers.value], [bank.centers.grad.copy()], rng),
        _check(loss, [V], [gV], rng),
    )


CASES = {
    "encoder": check_encoder,
    "decoder": check_decoder,
    "ftn": check_ftn,
    "discriminator": check_discriminator,
    "cluster_assign": check_cluster_assign,
    "sup_loss": check_sup_loss,
    "adv_loss": check_adv_loss,
    "disc_loss": check_disc_loss,
    "cluster_loss": check_cluster_loss,
    "kl_loss": check_kl_loss,
}


def run_suite(seeds=range(20)) -> dict[str, float]:
    """Worst relative error per case over ``seeds``."""
    return {name: max(fn(s) for s in seeds) for name, fn in CASES.items()}
