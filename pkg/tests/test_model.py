import numpy as np
import pytest

from c2a.model import (
    C2AModel,
    ClusterBank,
    ModelConfig,
    ShapeError,
    cluster_assign,
    decoder_forward,
    encoder_forward,
    ftn_forward,
    discriminator_forward,
    load_checkpoint,
    patchify,
    save_checkpoint,
    unpatchify,
)


def images(n=2, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 16, 16, 3))


def test_zero_weights_give_uniform_probabilities():
    m = C2AModel(ModelConfig(), 0)
    for p in m.named_parameters().values():
        if p is not m.clusters.centers:
            p.value[...] = 0.0
    emap, _ = encoder_forward(m.encoder, images())
    prob, _ = decoder_forward(m.decoder_t, emap)
    np.testing.assert_array_equal(prob, np.full_like(prob, 1 / 3))


def test_shapes():
    m = C2AModel(ModelConfig(), 0)
    emap, _ = encoder_forward(m.encoder, images(3))
    assert emap.shape == (3, 4, 4, 32)
    prob, _ = decoder_forward(m.decoder_s, emap)
    assert prob.shape == (3, 16, 16, 4)
    emb, _ = ftn_forward(m.ftn, emap)
    assert emb.shape == (3, 4, 4, 16)
    score, _ = discriminator_forward(m.disc, prob)
    assert score.shape == (3,)
    assert m.embed(images(3)).shape == (48, 16)


def test_prob_map_on_simplex():
    m = C2AModel(ModelConfig(), 4)
    prob, _ = m.decoder_t.forward(m.encoder.forward(images(seed=4) * 5)[0])
    assert np.all(prob >= 0)
    np.testing.assert_allclose(prob.sum(-1), 1.0, atol=1e-12)


def test_forward_deterministic():
    a, b = C2AModel(ModelConfig(), 9), C2AModel(ModelConfig(), 9)
    x = images(seed=1)
    assert a.predict_target(x).tobytes() == b.predict_target(x).tobytes()
    assert a.embed(x).tobytes() == b.embed(x).tobytes()


def test_patchify_round_trip():
    x = images()
    np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 3), x)


def test_bad_shape_rejected():
    m = C2AModel(ModelConfig(), 0)
    with pytest.raises(ShapeError):
        m.encoder.forward(np.zeros((1, 15, 16, 3)))
    with pytest.raises(ShapeError):
        C2AModel(ModelConfig(height=12, width=12), 0)


def test_cluster_assign_antipodal():
    v = np.array([0.3, -1.2, 2.0])
    p = cluster_assign(ClusterBank(np.stack([v, -v])), v)
    e = np.e
    np.testing.assert_allclose(p, [e / (e + 1 / e), (1 / e) / (e + 1 / e)], atol=1e-12)
    assert p[0] == pytest.approx(0.8808, abs=1e-4)


def test_cluster_assign_identical_centers_uniform():
    c = np.tile([1.0, 2.0, 3.0], (5, 1))
    p = cluster_assign(ClusterBank(c), np.array([0.2, -0.1, 4.0]))
    np.testing.assert_allclose(p, 0.2, atol=1e-15)


def test_cluster_assign_scale_invariant():
    rng = np.random.default_rng(2)
    bank = ClusterBank(rng.normal(size=(6, 4)))
    for _ in range(50):
        v = rng.normal(size=4)
        a = rng.uniform(1e-3, 1e3)
        p1, p2 = cluster_assign(bank, v), cluster_assign(bank, a * v)
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        assert p1.argmax() == p2.argmax()


def test_cluster_assign_zero_vector_errors():
    bank = ClusterBank(np.eye(3))
    with pytest.raises(ValueError):
        cluster_assign(bank, np.zeros(3))
    with pytest.raises(ValueError):
        ClusterBank(np.zeros((2, 3)))


def test_parameter_groups_partition():
    m = C2AModel(ModelConfig(), 0)
    groups = [m.group(g) for g in ("generator", "disc", "clusters")]
    ids = [id(p) for g in groups for p in g]
    assert len(ids) == len(set(ids)) == len(m.named_parameters())


def test_checkpoint_round_trip(tmp_path):
    m = C2AModel(ModelConfig(), 3)
    save_checkpoint(m, tmp_path / "ck", {"iter": 7}, {"pca.mean": np.arange(3.0)})
    back, meta, extras = load_checkpoint(tmp_path / "ck")
    assert meta == {"iter": 7}
    np.testing.assert_array_equal(extras["pca.mean"], np.arange(3.0))
    for k, v in m.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
