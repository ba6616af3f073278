import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import linear_model, orth_identity_model
from mmcert.attacks import (AttackError, AttackSpec, fgm, gaussian_noise, feature_mask,
                            min_radius_oracle, missing_modality, pgd_l2, run_attack)
from mmcert.model import ModelConfig, init_model, logits
from mmcert.rng import PortableRNG


def _hyperplane_model(w, b):
    """Binary model whose logit gap is ``w.x + b`` on modality 1; modality 2 is inert."""
    w = np.asarray(w, float)
    return linear_model([np.stack([w / 2, -w / 2]), np.zeros((2, 2))], [b / 2, -b / 2],
                        dims=[w.size, 2])


def _seeded(head="standard", seed=0):
    model = init_model(ModelConfig([5, 4], 3, hidden=[8], out_dim=5, head=head), seed=seed)
    xs = [PortableRNG(seed + 10, m).normal((12, d)) for m, d in enumerate([5, 4])]
    return model, xs, np.argmax(logits(model, xs), axis=1)


def test_fgm_normalise_and_scale():
    model = linear_model([np.array([[0.0, 0.0], [0.3, 0.4]]), np.zeros((2, 2))], [0.0, 0.0])
    res = fgm(model, [[[0.0, 0.0]], [[1.0, 1.0]]], [0], AttackSpec("fgm", 0.5, targets=(0,)))
    np.testing.assert_allclose(res.xs[0][0], [0.3, 0.4], rtol=0, atol=1e-15)
    assert res.xs[1].tobytes() == np.array([[1.0, 1.0]]).tobytes()


@pytest.mark.parametrize("family", ["fgm", "pgd_l2", "gaussian_noise", "feature_mask", "missing"])
def test_non_targets_bit_identical(family):
    model, xs, ys = _seeded()
    eps = 0.5 if family == "feature_mask" else 1.0
    res = run_attack(model, xs, ys, AttackSpec(family, eps, targets=(1,)))
    assert res.xs[0].tobytes() == xs[0].tobytes()


def test_fgm_linear_direction():
    w = np.array([1.0, -2.0, 2.0])
    model = _hyperplane_model(w, 0.5)
    x = np.array([[1.0, 0.0, 1.0]])
    res = fgm(model, [x, np.zeros((1, 2))], [0], AttackSpec("fgm", 0.7, targets=(0,)))
    np.testing.assert_allclose((res.xs[0] - x)[0] / 0.7, -w / 3, atol=1e-12)


def test_fgm_zero_gradient_flagged():
    model = linear_model([np.zeros((2, 2)), np.zeros((2, 2))], [1.0, 0.0])
    xs = [np.ones((1, 2)), np.ones((1, 2))]
    res = fgm(model, xs, [0], AttackSpec("fgm", 1.0))
    assert res.zero_grad[0] and not res.success[0]
    assert all(a.tobytes() == x.tobytes() for a, x in zip(res.xs, xs))


@pytest.mark.parametrize("head", ["standard", "orthogonal"])
def test_pgd_single_step_equals_fgm(head):
    model, xs, ys = _seeded(head, seed=3)
    a = fgm(model, xs, ys, AttackSpec("fgm", 0.8))
    b = pgd_l2(model, xs, ys, AttackSpec("pgd_l2", 0.8, steps=1, step_size=0.8))
    for u, v in zip(a.xs, b.xs):
        assert u.tobytes() == v.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 5.0), st.integers(1, 30), st.integers(1, 3), st.sampled_from([(0,), (1,), (0, 1)]))
def test_pgd_respects_budget(eps, steps, restarts, targets):
    model, xs, ys = _seeded(seed=1)
    res = pgd_l2(model, xs, ys, AttackSpec("pgd_l2", eps, targets=targets, steps=steps,
                                           restarts=restarts, seed=2))
    assert np.all(res.total_norm <= eps + 1e-9)


def test_fgm_budget():
    model, xs, ys = _seeded(seed=2)
    res = fgm(model, xs, ys, AttackSpec("fgm", 1.3))
    assert np.all(res.total_norm <= 1.3 + 1e-9)


def test_pgd_linear_breaks_and_beats_fgm():
    w = np.array([2.0, 1.0])
    model = _hyperplane_model(w, 0.0)
    x = np.array([[1.0, 1.0]])
    dist = 3 / np.sqrt(5)
    xs = [x, np.zeros((1, 2))]
    spec = dict(epsilon=dist * 1.1, targets=(0,))
    p = pgd_l2(model, xs, [0], AttackSpec("pgd_l2", **spec))
    f = fgm(model, xs, [0], AttackSpec("fgm", **spec))
    assert p.success[0] and p.loss[0] >= f.loss[0] - 1e-12


def test_pgd_is_deterministic():
    model, xs, ys = _seeded(seed=4)
    spec = AttackSpec("pgd_l2", 0.6, restarts=3, seed=9)
    a, b = pgd_l2(model, xs, ys, spec), pgd_l2(model, xs, ys, spec)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a.xs, b.xs))
    assert a.success.tolist() == b.success.tolist()


def test_missing_is_zero_fill():
    model, xs, ys = _seeded(seed=5)
    res = missing_modality(model, xs, ys, AttackSpec("missing", targets=(0,)))
    expected = logits(model, [np.zeros_like(xs[0]), xs[1]])
    assert logits(model, res.xs).tobytes() == expected.tobytes()


def test_missing_silenced_modality_logits_unchanged():
    model = orth_identity_model([np.eye(2), np.eye(2)], [[1, 2], [0, 0]], [0.1, 0])
    xs = [np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])]
    res = missing_modality(model, xs, [1], AttackSpec("missing", targets=(1,)))
    assert logits(model, res.xs).tobytes() == logits(model, xs).tobytes()


def test_noise_zero_sigma_unchanged():
    model, xs, ys = _seeded(seed=6)
    res = gaussian_noise(model, xs, ys, AttackSpec("gaussian_noise", 0.0))
    assert all(a.tobytes() == x.tobytes() for a, x in zip(res.xs, xs))


def test_full_mask_equals_missing():
    model, xs, ys = _seeded(seed=6)
    a = feature_mask(model, xs, ys, AttackSpec("feature_mask", 1.0, targets=(0,)))
    b = missing_modality(model, xs, ys, AttackSpec("missing", targets=(0,)))
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a.xs, b.xs))


@pytest.mark.parametrize("family,eps", [("gaussian_noise", 0.3), ("feature_mask", 0.5)])
def test_corruptions_are_deterministic(family, eps):
    model, xs, ys = _seeded(seed=7)
    spec = AttackSpec(family, eps, seed=4)
    a, b = run_attack(model, xs, ys, spec), run_attack(model, xs, ys, spec)
    assert all(u.tobytes() == v.tobytes() for u, v in zip(a.xs, b.xs))
    assert any(u.tobytes() != x.tobytes() for u, x in zip(a.xs, xs))


def test_mask_fraction_count():
    model, xs, ys = _seeded(seed=8)
    xs = [np.ones_like(x) for x in xs]
    res = feature_mask(model, xs, ys, AttackSpec("feature_mask", 0.4, targets=(0,)))
    assert np.all(np.sum(res.xs[0] == 0.0, axis=1) == 2)


@pytest.mark.parametrize("bad", [dict(family="linf"), dict(family="fgm", epsilon=-1.0),
                                 dict(family="fgm", targets=()), dict(family="pgd_l2", steps=0),
                                 dict(family="feature_mask", epsilon=1.5)])
def test_invalid_specs(bad):
    with pytest.raises(AttackError):
        AttackSpec(**bad)


def test_target_out_of_range():
    model, xs, ys = _seeded()
    with pytest.raises(AttackError):
        fgm(model, xs, ys, AttackSpec("fgm", 1.0, targets=(2,)))


def test_oracle_matches_hyperplane_distance():
    w = np.array([1.5, -0.5, 2.0])
    b = 0.3
    model = _hyperplane_model(w, b)
    x = PortableRNG(3).normal((6, 3))
    ys = np.where(x @ w + b > 0, 0, 1)
    xs = [x, np.zeros((6, 2))]
    radius = min_radius_oracle(model, xs, ys, targets=(0,), tol=1e-4, steps=100, restarts=5)
    exact = np.abs(x @ w + b) / np.linalg.norm(w)
    assert np.all(radius >= exact - 1e-9)
    assert np.all(radius - exact <= 1e-4 + 1e-9)


def test_oracle_tolerance_convergence():
    model, xs, ys = _seeded(seed=2)
    coarse = min_radius_oracle(model, xs, ys, (0, 1), tol=1e-3, steps=30, restarts=2)
    fine = min_radius_oracle(model, xs, ys, (0, 1), tol=1e-5, steps=30, restarts=2)
    finite = np.isfinite(coarse)
    assert finite.tolist() == np.isfinite(fine).tolist()
    assert np.all(np.abs(coarse[finite] - fine[finite]) <= 1e-3)


def test_oracle_unbreakable_is_infinite():
    w = np.array([1.0, 0.0])
    model = _hyperplane_model(w, 1.0)
    xs = [np.array([[0.0, 0.0]]), np.zeros((1, 2))]
    radius = min_radius_oracle(model, xs, [0], targets=(1,), steps=5, restarts=1, max_doublings=3)
    assert np.isinf(radius[0])
