import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advmask.models import Encoder, EncoderConfig, MaskGenerator, MaskGeneratorConfig, Projector, make_rng
from advmask.objectives import (ObjectiveConfig, adversary_loss, adversary_terms, apply_adversarial_mask,
                                encoder_loss, ntxent_loss, soft_binarize, sparse_penalty)
from advmask.params import adam_step
from advmask.tensor import Tensor


def brute_ntxent(z, za, tau, include_positive=False):
    """Double loop over anchors and candidates in plain Python floats."""
    B = len(z)

    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    total = 0.0
    for i in range(B):
        denom = 0.0
        for j in range(B):
            if j != i or include_positive:
                denom += math.exp(cos(z[i], za[j]) / tau)
        total += -math.log(math.exp(cos(z[i], za[i]) / tau) / denom)
    return total / B


def f64(a):
    return Tensor(a, dtype=np.float64)


@pytest.mark.parametrize("B", [2, 4, 8])
@pytest.mark.parametrize("include_positive", [False, True])
def test_ntxent_matches_double_loop(B, include_positive):
    rng = np.random.default_rng(B)
    z, za = rng.normal(size=(B, 16)), rng.normal(size=(B, 16))
    got = ntxent_loss(f64(z), f64(za), 0.1, include_positive).item()
    assert abs(got - brute_ntxent(z.tolist(), za.tolist(), 0.1, include_positive)) <= 1e-5


def test_ntxent_hand_example():
    z = np.eye(2)
    assert ntxent_loss(f64(z), f64(z), 0.1).item() == pytest.approx(-10.0, abs=1e-9)


def test_ntxent_errors():
    with pytest.raises(ValueError, match="at least 2"):
        ntxent_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(ValueError, match="zero norm"):
        ntxent_loss(Tensor([[0.0, 0.0], [1.0, 0.0]]), Tensor(np.ones((2, 2))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)).filter(lambda a: np.all(np.abs(a).sum(1) > 0.1)),
       st.integers(0, 3), st.floats(0.1, 10))
def test_ntxent_row_scale_invariance(z, row, scale):
    za = np.roll(z, 1, axis=1) + 0.5
    base = ntxent_loss(f64(z), f64(za)).item()
    z2 = z.copy()
    z2[row] *= scale
    assert ntxent_loss(f64(z2), f64(za)).item() == pytest.approx(base, abs=1e-8)


def test_soft_binarize_values():
    out = soft_binarize(f64([0.5, 1.0, 0.0]), 25.0).data
    np.testing.assert_allclose(out, [0.5, 1 / (1 + math.exp(-12.5)), 1 / (1 + math.exp(12.5))], rtol=1e-12)
    assert out[1] == pytest.approx(0.9999963, abs=1e-7)
    assert out[2] == pytest.approx(3.73e-6, rel=1e-3)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(0, 1)))
def test_soft_binarize_symmetric_and_monotone(m):
    b = soft_binarize(f64(m), 25.0).data
    np.testing.assert_allclose(soft_binarize(f64(1 - m), 25.0).data, 1 - b, atol=1e-6)
    order = np.argsort(m, kind="stable")
    assert np.all(np.diff(b[order]) >= 0)


def test_sparse_penalty_values():
    assert sparse_penalty(f64(np.full((2, 1, 10), 0.5))).item() == pytest.approx(1.0, abs=1e-12)
    assert sparse_penalty(f64(np.full((1, 1, 8), 0.25))).item() == pytest.approx(1.4142, abs=1e-4)
    assert sparse_penalty(f64(np.zeros((1, 1, 8)))).item() == pytest.approx(1e3)
    assert sparse_penalty(f64(np.zeros((1, 1, 8))), clamp=50).item() == pytest.approx(50)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 12), elements=st.floats(0, 1)))
def test_sparse_penalty_symmetric_with_minimum_one(m):
    p = sparse_penalty(f64(m)).item()
    assert p == pytest.approx(sparse_penalty(f64(1 - m)).item(), abs=1e-6)
    assert p >= 1 - 1e-12


def test_objective_config_defaults_and_checks():
    cfg = ObjectiveConfig()
    assert (cfg.temperature, cfg.binarize_gamma, cfg.sparse_weight, cfg.penalty_clamp) == (0.1, 25, 0.1, 1e3)
    for bad in ({"temperature": 0}, {"binarize_gamma": -1}, {"sparse_weight": -0.1}):
        with pytest.raises(ValueError):
            ObjectiveConfig(**bad)


def test_mask_all_ones_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 12, 32))
    out = apply_adversarial_mask(Tensor(x), Tensor(np.ones((2, 2, 32))), 25.0, index=1).data
    np.testing.assert_allclose(out, x, rtol=4e-6)


def test_complementary_masks_partition_energy():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 12, 64))
    m0 = (rng.random(64) > 0.5).astype(float)
    m = Tensor(np.stack([m0, 1 - m0])[None])
    e = [np.sum(apply_adversarial_mask(Tensor(x), m, 25.0, index=i).data.astype(np.float64) ** 2) for i in (0, 1)]
    assert abs(sum(e) - np.sum(x**2)) <= 1e-5 * np.sum(x**2)


def test_per_lead_masks_touch_only_their_lead():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 12, 16)))
    m = rng.random((1, 12, 16))
    base = apply_adversarial_mask(x, Tensor(m), 25.0).data
    m2 = m.copy()
    m2[0, 4] = 1 - m2[0, 4]
    changed = np.any(apply_adversarial_mask(x, Tensor(m2), 25.0).data != base, axis=2)[0]
    assert changed.tolist() == [k == 4 for k in range(12)]


def test_unbatched_and_too_many_masks():
    x = Tensor(np.ones((12, 8)))
    assert apply_adversarial_mask(x, Tensor(np.ones((3, 8))), 25.0, index=0).shape == (12, 8)
    with pytest.raises(ValueError):
        apply_adversarial_mask(Tensor(np.ones((1, 3, 8))), Tensor(np.ones((1, 4, 8))), 25.0, index=0)


@pytest.fixture
def models():
    rng = make_rng(4)
    cfg = EncoderConfig()
    return Encoder(cfg, rng), Projector(cfg, rng), MaskGenerator(MaskGeneratorConfig(), rng)


def _zero(*models):
    for m in models:
        m.params.zero_grad()


def test_encoder_loss_with_identity_masks(models):
    enc, proj, gen = models
    x = Tensor(np.random.default_rng(0).normal(size=(4, 12, 64)))
    got = encoder_loss(x, enc, proj, gen, None, masks=Tensor(np.ones((4, 2, 64))), index=0, mode="eval").item()
    want = ntxent_loss(proj(enc(x, "eval")), proj(enc(x, "eval"))).item()
    assert got == pytest.approx(want, abs=1e-4)


def test_encoder_loss_gradient_reaches_encoder_only(models):
    enc, proj, gen = models
    _zero(*models)
    encoder_loss(Tensor(np.random.default_rng(0).normal(size=(4, 12, 64))), enc, proj, gen, None, index=0).backward()
    assert all(np.all(p.grad == 0) for p in gen.params.params.values())
    assert any(np.any(p.grad != 0) for p in enc.params.params.values())
    assert any(np.any(p.grad != 0) for p in proj.params.params.values())


def test_adversary_loss_gradient_reaches_mask_model_only(models):
    enc, proj, gen = models
    _zero(*models)
    before = enc.params.checksum()
    adversary_loss(Tensor(np.random.default_rng(0).normal(size=(4, 12, 64))), enc, proj, gen, None, index=0).backward()
    assert all(p.grad is None or np.all(p.grad == 0) for p in enc.params.params.values())
    assert all(p.grad is None or np.all(p.grad == 0) for p in proj.params.params.values())
    assert any(np.any(p.grad != 0) for p in gen.params.params.values())
    assert enc.params.checksum() == before


def test_adversary_loss_composition(models):
    enc, proj, gen = models
    x = Tensor(np.random.default_rng(0).normal(size=(4, 12, 64)))
    l_ssl, l_sparse = adversary_terms(x, enc, proj, gen, None, index=1, mode="eval")
    full = adversary_loss(x, enc, proj, gen, None, index=1, mode="eval").item()
    assert full == pytest.approx(0.1 * l_sparse.item() - l_ssl.item(), abs=1e-5)
    pure = adversary_loss(x, enc, proj, gen, None, ObjectiveConfig(sparse_weight=0), index=1, mode="eval").item()
    assert pure == pytest.approx(-l_ssl.item(), abs=1e-5)


def test_encoder_loss_decreases_on_fixed_batch(models):
    enc, proj, gen = models
    x = Tensor(np.random.default_rng(3).normal(size=(8, 12, 64)))
    losses = []
    for _ in range(20):
        _zero(enc, proj)
        loss = encoder_loss(x, enc, proj, gen, None, index=0)
        losses.append(loss.item())
        loss.backward()
        adam_step(enc.params, 1e-3)
        adam_step(proj.params, 1e-3)
    assert losses[-1] < losses[0]
