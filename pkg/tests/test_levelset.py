import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmcf.calculus import ScalarField, jet
from hmcf.crossval import grid_radius_at, radial_cap_field, radial_cap_profile
from hmcf.geometry import euclidean, heisenberg
from hmcf.levelset import (GridField, SchemeParams, envelope_rhs, evolve, grid_from_function, rhs_from_arrays,
                           zero_level_extract)
from hmcf.rotational import evolve_profile


def test_envelopes_at_characteristic_point():
    p, hh = np.zeros(2), np.diag([1.0, 3.0])
    assert rhs_from_arrays(p, hh, "lower_envelope", None) == pytest.approx(1.0)
    assert rhs_from_arrays(p, hh, "upper_envelope", None) == pytest.approx(3.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_h1_branch_identity(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(2, 2))
    hh = a + a.T
    w = np.linalg.eigvalsh(hh)
    p = np.zeros(2)
    tr = np.trace(hh)
    assert tr - w[1] == pytest.approx(w[0], abs=1e-12)
    assert rhs_from_arrays(p, hh, "lower_envelope", None) == pytest.approx(w[0], abs=1e-12)
    assert rhs_from_arrays(p, hh, "upper_envelope", None) == pytest.approx(w[1], abs=1e-12)


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2 ** 32 - 1), st.sampled_from([1e-8, 1e-3, 0.1]),
       st.sampled_from([0.0, 1e-9, 1e-2, 1.0]))
def test_envelope_ordering(m, seed, eps, pscale):
    r = np.random.default_rng(seed)
    a = r.normal(size=(m, m))
    hh = a + a.T
    p = pscale * r.normal(size=m)
    lo = rhs_from_arrays(p, hh, "lower_envelope", eps, char_tol=eps)
    reg = rhs_from_arrays(p, hh, "regularized", eps, char_tol=eps)
    up = rhs_from_arrays(p, hh, "upper_envelope", eps, char_tol=eps)
    assert lo <= reg + 1e-12 and reg <= up + 1e-12


def test_branches_agree_off_characteristic(rng):
    for _ in range(50):
        a = rng.normal(size=(2, 2))
        hh = a + a.T
        p = rng.normal(size=2) + np.array([2.0, 0.0])
        eps = 1e-3
        exact = np.trace(hh) - p @ hh @ p / (p @ p)
        bound = 4 * eps ** 2 * np.abs(hh).max() / (p @ p)
        for b in ("regularized", "upper_envelope", "lower_envelope"):
            assert abs(rhs_from_arrays(p, hh, b, eps) - exact) <= bound


def test_envelopes_at_rotational_axis():
    # u = f(r) - z with f = r^2/2: (X^2 u)* = I at the origin, so both envelopes give f''(0) = 1
    u = ScalarField.from_expression("(x1^2 + x2^2)/2 - x3", 3)
    j = jet(heisenberg(1), u, np.zeros(3))
    for b in ("upper_envelope", "lower_envelope"):
        assert envelope_rhs(j, b) == pytest.approx(1.0, abs=1e-14)


def test_regularized_needs_epsilon():
    with pytest.raises(ValueError):
        rhs_from_arrays(np.zeros(2), np.eye(2), "regularized", None)
    with pytest.raises(ValueError):
        SchemeParams(branch="sideways")
    with pytest.raises(ValueError):
        SchemeParams(cfl=1.5)
    with pytest.raises(ValueError):
        SchemeParams(epsilon=0.0)


def test_vertical_plane_stationary():
    u0 = ScalarField.from_expression("x1 + 2*x2 - 1", 3)
    g = grid_from_function(u0, [-0.5] * 3, [0.5] * 3, 1 / 8)
    res = evolve(heisenberg(1), g, 0.3)
    assert np.max(np.abs(res.final.values - g.values)) <= 1e-10


def test_shrinking_circle():
    u0 = ScalarField.from_expression("x1^2 + x2^2 - 1", 2)
    g = grid_from_function(u0, [-1.5] * 2, [1.5] * 2, 1 / 32)
    res = evolve(euclidean(2), g, 0.1, snap_every=0.025)
    radii = [np.mean(np.linalg.norm(zero_level_extract(s)[0], axis=1)) for s in res.snapshots]
    assert all(b < a for a, b in zip(radii, radii[1:]))
    # circles under curve shortening: r(t)^2 = 1 - 2t
    for s, r in zip(res.snapshots, radii):
        assert r == pytest.approx(np.sqrt(1 - 2 * s.time), abs=2 / 32)


def test_snapshot_times_exact():
    u0 = ScalarField.from_expression("x1^2 + x2^2 - 1", 2)
    g = grid_from_function(u0, [-1.5] * 2, [1.5] * 2, 1 / 8)
    res = evolve(euclidean(2), g, 0.1, snap_times=[0.013, 0.05])
    assert [s.time for s in res.snapshots] == [0.0, 0.013, 0.05, 0.1]


def test_zero_level_examples():
    x = grid_from_function(lambda p: p[..., 0], [-1, -1], [1, 1], 0.1)
    pts, empty = zero_level_extract(x)
    assert not empty and np.max(np.abs(pts[:, 0])) < 0.1 ** 2
    c = grid_from_function(lambda p: p[..., 0] ** 2 + p[..., 1] ** 2 - 1, [-1.5, -1.5], [1.5, 1.5], 0.05)
    pts, _ = zero_level_extract(c)
    assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 1)) < 0.05 ** 2
    pts, empty = zero_level_extract(grid_from_function(lambda p: np.ones(p.shape[:-1]), [0, 0], [1, 1], 0.25))
    assert empty and pts.shape == (0, 2)


def _sphere_run(R2, h=1 / 8, T=0.05):
    u0 = ScalarField.from_expression(f"x1^2 + x2^2 + x3^2 - {R2}", 3)
    g = grid_from_function(u0, [-1] * 3, [1] * 3, h)
    return g, evolve(heisenberg(1), g, T, snap_every=0.01)


def test_discrete_maximum_principle():
    # interior values stay inside the range of the previous snapshot; the
    # box boundary carries the extremes, so per-snapshot interior max may rise
    g, res = _sphere_run(0.25)
    inner = (slice(1, -1),) * 3
    for prev, cur in zip(res.snapshots, res.snapshots[1:]):
        assert cur.values[inner].max() <= prev.values.max() + 1e-12
        assert cur.values[inner].min() >= prev.values.min() - 1e-12
    assert res.snapshots[-1].values.min() >= g.values.min()


def test_discrete_comparison():
    _, ru = _sphere_run(0.25)
    _, rv = _sphere_run(0.16)   # v0 = u0 + 0.09 >= u0
    for su, sv in zip(ru.snapshots, rv.snapshots):
        assert np.all(su.values <= sv.values + 1e-12)


def test_radial_refinement_first_order():
    prof = evolve_profile(radial_cap_profile, 0.05, r_max=2, h=1 / 256)[-1]
    target = prof.radius_at(0.25)
    errs = []
    for h in (1 / 8, 1 / 16):
        g = grid_from_function(radial_cap_field(), (-1, -1, -0.25), (1, 1, 0.75), h)
        res = evolve(heisenberg(1), g, 0.05, SchemeParams(cfl=0.9))
        errs.append(abs(grid_radius_at(res.final, 0.25) - target))
    assert errs[1] <= errs[0] / 2


def test_determinism_and_metadata():
    g, a = _sphere_run(0.25)
    _, b = _sphere_run(0.25)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.snapshots, b.snapshots))
    assert a.dt > 0 and a.s_max > 0 and a.n_steps >= 1


def test_grid_validation():
    with pytest.raises(ValueError):
        GridField([0, 0], [0.1, 0.1], np.zeros((2, 5)))
    with pytest.raises(ValueError):
        GridField([0, 0], [0.1, 0.1], np.full((4, 4), np.nan))
    with pytest.raises(ValueError):
        grid_from_function(lambda p: p[..., 0], [0, 0], [1, 1], 0.3)
