import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from miramet import autodiff as ad
from miramet import mirror as mm


def random_spec(rng, d=None, psd=True):
    layers = int(rng.integers(1, 4))
    return mm.MirrorMapSpec(
        input_dim=int(d or rng.integers(1, 6)), num_layers=layers,
        hidden_widths=tuple(int(w) for w in rng.integers(1, 5, layers - 1)),
        activation=("softplus", "elu")[int(rng.integers(2))],
        weight_bound=float(rng.uniform(0.5, 2.0)), skip_bound=float(rng.uniform(0.5, 2.0)),
        include_quadratic=bool(rng.integers(2)), quadratic_bound=float(rng.uniform(1.1, 3.0)),
        enforce_psd_quadratic=psd)


def randomized_params(spec, seed):
    """init_params plus random biases and P, so tests do not only see the init."""
    p = mm.init_params(spec, seed)
    rng = np.random.default_rng(seed + 1000)
    p.bias = [rng.normal(size=b.shape) for b in p.bias]
    if p.raw_P is not None:
        p.raw_P = rng.normal(size=p.raw_P.shape)
    return p


def test_spec_validation():
    with pytest.raises(mm.MirrorSpecError):
        mm.MirrorMapSpec(3, 0, include_quadratic=False)
    with pytest.raises(mm.MirrorSpecError):
        mm.MirrorMapSpec(3, 2, ())
    with pytest.raises(mm.MirrorSpecError):
        mm.MirrorMapSpec(3, 1, activation="relu")
    with pytest.raises(mm.MirrorSpecError):
        mm.MirrorMapSpec(3, 1, weight_bound=0.0)
    spec = mm.MirrorMapSpec(3, 2, (4,))
    assert mm.MirrorMapSpec.from_dict(spec.to_dict()) == spec


def test_init_identity_start_and_determinism():
    spec = mm.MirrorMapSpec(4, 0, include_quadratic=True, quadratic_bound=2.0)
    p = mm.init_params(spec, 0)
    z = np.array([0.3, -1.0, 2.0, 5.0])
    np.testing.assert_allclose(mm.inverse_map(z, p, spec), z, rtol=1e-12)
    spec = mm.MirrorMapSpec(4, 2, (3,))
    a, b, c = mm.init_params(spec, 7), mm.init_params(spec, 7), mm.init_params(spec, 8)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), c.arrays()))
    for w, m in zip(a.raw_W, a.raw_M):
        assert np.all(np.abs(w) <= 0.5) and np.all(np.abs(m) <= 0.5)
    assert all(np.all(b == 0) for b in a.bias)


def test_flatten_round_trip():
    spec = mm.MirrorMapSpec(3, 2, (2,))
    p = randomized_params(spec, 1)
    q = mm.MirrorMapParams.unflatten(p.flatten(), spec)
    assert all(np.array_equal(x, y) for x, y in zip(p.arrays(), q.arrays()))
    assert p.flatten().size == mm.num_params(spec)
    with pytest.raises(mm.MirrorSpecError):
        mm.MirrorMapParams.unflatten(np.zeros(3), spec)


def test_effective_weights_are_bounded():
    spec = mm.MirrorMapSpec(3, 2, (4,), weight_bound=1.5, skip_bound=0.7)
    p = randomized_params(spec, 3)
    p.raw_W = [10 * w for w in p.raw_W]
    eff = mm.effective_weights(p, spec)
    for W in eff.W:
        assert np.all(W > 0) and np.all(W < 1.5)
    for M in eff.M:
        assert np.all(np.abs(M) < 0.7)


def test_conjugate_value_examples():
    spec, p = mm.identity_map(2)
    assert mm.conjugate_value(np.array([3.0, 4.0]), p, spec) == 12.5
    # One softplus layer with W1 + M1 = (1, 1), b1 = 0, evaluated at the origin.
    spec = mm.MirrorMapSpec(2, 1, (), include_quadratic=False)
    eff = mm.EffectiveWeights(W=[np.array([[0.5], [0.5]])], M=[np.array([[0.5], [0.5]])],
                              bias=[np.zeros(1)])
    assert mm.conjugate_value(np.zeros(2), eff, spec) == pytest.approx(np.log(2.0), abs=1e-15)
    with pytest.raises(ad.ShapeError):
        mm.conjugate_value(np.zeros(3), eff, spec)


def test_inverse_map_examples():
    spec, p = mm.identity_map(3)
    z = np.array([1.5, -2.25, 7.0])
    np.testing.assert_array_equal(mm.inverse_map(z, p, spec), z)
    spec, p = mm.quadratic_map(np.diag([0.5, 0.5, 0.5]))
    np.testing.assert_allclose(mm.inverse_map(z, p, spec), 0.5 * z, rtol=1e-15)
    spec = mm.MirrorMapSpec(2, 0, include_quadratic=True, quadratic_bound=4.0)
    eff = mm.EffectiveWeights([], [], [], P=np.diag([2.0, 3.0]))
    np.testing.assert_array_equal(mm.inverse_map(np.ones(2), eff, spec), [2.0, 3.0])


def test_inverse_map_matches_finite_differences():
    rng = np.random.default_rng(0)
    for seed in range(10):
        spec = random_spec(rng)
        p = randomized_params(spec, seed)
        z = rng.normal(size=spec.input_dim)
        fd = ad.finite_difference_grad(lambda x: mm.conjugate_value(x, p, spec), z, 1e-5)
        g = mm.inverse_map(z, p, spec)
        assert np.linalg.norm(g - fd) / max(1.0, np.linalg.norm(g)) < 1e-6


def test_inverse_map_hvp_examples_and_symmetry():
    spec, p = mm.identity_map(3)
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(mm.inverse_map_hvp(np.ones(3), p, spec, v), v)
    spec = mm.MirrorMapSpec(3, 0, include_quadratic=True, enforce_psd_quadratic=True)
    p = randomized_params(spec, 2)
    P = mm.effective_P(p, spec)
    np.testing.assert_allclose(mm.inverse_map_hvp(np.zeros(3), p, spec, v), 0.5 * (P + P.T) @ v,
                               rtol=1e-13)
    rng = np.random.default_rng(4)
    for seed in range(10):
        spec = random_spec(rng)
        p = randomized_params(spec, seed)
        z, v1, v2 = rng.normal(size=(3, spec.input_dim))
        a = v1 @ mm.inverse_map_hvp(z, p, spec, v2)
        b = v2 @ mm.inverse_map_hvp(z, p, spec, v1)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_second_derivatives_match_hvp_and_fd():
    spec = mm.MirrorMapSpec(3, 2, (2,), enforce_psd_quadratic=True)
    p = randomized_params(spec, 5)
    z = np.array([0.2, -0.4, 1.0])
    hess, mixed = mm.mirror_second_derivatives(z, p, spec)
    for j, e in enumerate(np.eye(3)):
        np.testing.assert_allclose(hess[:, j], mm.inverse_map_hvp(z, p, spec, e), atol=1e-14)
    flat = p.flatten()
    for j in range(3):
        f = lambda x: mm.inverse_map(z, mm.MirrorMapParams.unflatten(x, spec), spec)[j]
        fd = ad.finite_difference_grad(f, flat, 1e-6)
        np.testing.assert_allclose(mixed[j], fd, atol=1e-7)


def test_lipschitz_bounds_examples():
    b = mm.lipschitz_bounds(mm.MirrorMapSpec(1, 1, (), include_quadratic=False))
    assert (b.L_h, b.G_h) == (2.0, 1.0)
    b = mm.lipschitz_bounds(mm.MirrorMapSpec(1, 2, (1,), include_quadratic=False))
    assert (b.L_h, b.G_h) == (3.0, 3.25)
    b = mm.lipschitz_bounds(mm.MirrorMapSpec(1, 1, (), activation="elu", include_quadratic=False))
    assert (b.L_h, b.G_h) == (2.0, 4.0)
    spec, _ = mm.identity_map(3)
    assert mm.lipschitz_bounds(spec) == mm.LipschitzBounds(0.0, 6.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_bounds_depend_on_spec_only_and_hold_empirically(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, psd=bool(rng.integers(2)))
    bound = mm.lipschitz_bounds(spec)
    assert bound.L_h >= 0 and bound.G_h >= 0
    for k in range(2):
        p = randomized_params(spec, seed % 1000 + k)
        assert mm.empirical_smoothness(p, spec, 300, 5.0, seed) <= bound.G_h


def test_check_convexity_valid_maps_have_no_violations():
    rng = np.random.default_rng(11)
    for seed in range(5):
        spec = random_spec(rng, d=3)
        rep = mm.check_convexity(randomized_params(spec, seed), spec, 2000, 10.0, seed)
        assert rep.total_violations == 0
    spec, p = mm.identity_map(4)
    rep = mm.check_convexity(p, spec, 1000, 10.0, 0)
    assert rep.total_violations == 0
    assert rep.worst_gap <= 1e-12
    with pytest.raises(ValueError):
        mm.check_convexity(p, spec, 0, 1.0, 0)


def corrupted_instance():
    """Brute-force search for a negated-weight network that check_convexity flags."""
    spec = mm.MirrorMapSpec(1, 2, (1,), include_quadratic=False)
    for w2, m1, b1 in itertools.product((-0.5, -1.0, -2.0), (0.5, 1.0), (0.0, 1.0)):
        eff = mm.EffectiveWeights(W=[np.array([[0.5]]), np.array([[w2]])],
                                  M=[np.array([[m1]]), np.array([[0.0]])],
                                  bias=[np.array([b1]), np.zeros(1)])
        rep = mm.check_convexity(eff, spec, 2000, 5.0, 0)
        if rep.total_violations:
            return spec, eff, rep
    return None


def test_corrupted_weights_break_convexity():
    found = corrupted_instance()
    assert found is not None
    _, _, rep = found
    assert rep.total_violations >= 1 and rep.worst_gap > 1e-9


def test_quadratic_map_constructor():
    with pytest.raises(mm.MirrorSpecError):
        mm.quadratic_map(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(mm.MirrorSpecError):
        mm.quadratic_map(np.diag([1.0, -1.0]))
    with pytest.raises(mm.MirrorSpecError):
        mm.quadratic_map(np.diag([3.0, 1.0]))
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    P = A @ A.T / 10 + 0.5 * np.eye(4)
    spec, p = mm.quadratic_map(P, quadratic_bound=4.0)
    np.testing.assert_allclose(mm.effective_P(p, spec), P, rtol=1e-14, atol=1e-15)


def test_inverse_pair_for_quadratic_dgf():
    # h(phi) = (phi - c)^T Q (phi - c) / 2 has grad h*(z) = Q^{-1} z + c.
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T + np.eye(4)
    c = rng.normal(size=4)
    grad_h = lambda phi: Q @ (phi - c)
    grad_h_star = lambda z: np.linalg.solve(Q, z) + c
    for _ in range(20):
        phi = rng.normal(size=4) * 3
        np.testing.assert_allclose(grad_h_star(grad_h(phi)), phi, atol=1e-10)
