import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmcf.calculus import ScalarField
from hmcf.control import (ConstantPolicy, ControlMatrix, CustomPolicy, FeedbackPolicy, UnconstrainedPolicy,
                          control_hamiltonian, default_policy_family, direction_fan, drift_vector, ess_sup,
                          estimate_v, estimate_vp, feedback_directions, feedback_optimal_control, integrate_path,
                          path_rng, simulate, step_ito)
from hmcf.geometry import euclidean, group_op, grusin, heisenberg, make_geometry

SQ2 = math.sqrt(2)
BUILTINS = ["euclidean(2)", "euclidean(3)", "heisenberg(1)", "heisenberg(2)", "grusin", "rototranslation"]


# -- control matrices --------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_admissibility(m, seed):
    v = np.random.default_rng(seed).normal(size=m)
    c = ControlMatrix.from_vector(v)
    nu = c.nu
    np.testing.assert_allclose(nu, nu.T, atol=1e-12)
    assert np.linalg.eigvalsh(nu).min() >= -1e-10
    assert np.linalg.eigvalsh(np.eye(m) - nu @ nu).min() >= -1e-10
    assert np.trace(np.eye(m) - nu @ nu) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(c.nu_squared, nu, atol=1e-12)
    assert c.admissible


def test_control_matrix_errors():
    with pytest.raises(ValueError):
        ControlMatrix(2, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        ControlMatrix.from_vector(np.zeros(3))
    assert not ControlMatrix.unconstrained(2).admissible
    np.testing.assert_array_equal(ControlMatrix.unconstrained(3).nu, np.eye(3))


# -- drift and single steps --------------------------------------------------------

def _drift_oracle(frame, nu2, x):
    nab = frame.nabla_fd(x)
    return sum(nu2[i, j] * nab[i, j] for i in range(frame.m) for j in range(frame.m))


@pytest.mark.parametrize("name", BUILTINS)
def test_drift_against_fd_nabla(name, rng):
    frame = make_geometry(name)
    for _ in range(20):
        c = ControlMatrix.from_vector(rng.normal(size=frame.m))
        x = rng.normal(size=frame.n)
        np.testing.assert_allclose(drift_vector(frame, c, x), _drift_oracle(frame, c.nu_squared, x), atol=1e-6)


def test_drift_examples(rng):
    for frame in (heisenberg(1), heisenberg(2), euclidean(3)):
        c = ControlMatrix.from_vector(rng.normal(size=frame.m))
        np.testing.assert_array_equal(drift_vector(frame, c, rng.normal(size=frame.n)), 0.0)
    # Grusin: nabla_{X1}X1 = nabla_{X2}X2 = 0, so nu = I leaves no drift
    np.testing.assert_array_equal(drift_vector(grusin(), ControlMatrix.unconstrained(2), np.array([1.0, 0.0])),
                                  [0.0, 0.0])
    # a = (1,1)/sqrt2: nu^2 = [[1,-1],[-1,1]]/2 picks -(nabla_{X1}X2 + nabla_{X2}X1)/2 = (0,-1/2)
    c = ControlMatrix.from_vector([1.0, 1.0])
    np.testing.assert_allclose(drift_vector(grusin(), c, np.array([1.0, 0.0])), [0.0, -0.5])


def test_step_examples():
    w = np.array([0.3, -0.7])
    np.testing.assert_array_equal(step_ito(heisenberg(1), np.array([1.0, 2, 3]), ControlMatrix.unconstrained(2),
                                           0.1, np.zeros(2)), [1.0, 2, 3])
    np.testing.assert_allclose(step_ito(euclidean(2), np.zeros(2), ControlMatrix(2, np.array([1.0, 0.0])), 0.1, w),
                               [0.0, SQ2 * w[1]])
    np.testing.assert_allclose(step_ito(heisenberg(1), np.zeros(3), ControlMatrix.unconstrained(2), 0.1, w),
                               [SQ2 * w[0], SQ2 * w[1], 0.0])
    with pytest.raises(ValueError):
        step_ito(heisenberg(1), np.zeros(3), ControlMatrix.unconstrained(2), 0.0, w)


def test_integrate_path_matches_step_ito(rng):
    frame = grusin()
    inc = rng.normal(size=(50, 2)) * 0.1
    pol = ConstantPolicy([0.6, 0.8])
    path = integrate_path(frame, np.array([0.5, 0.1]), inc, 0.01, pol)
    x = np.array([0.5, 0.1])
    for k in range(50):
        x = step_ito(frame, x, pol.control(0, x), 0.01, inc[k])
    np.testing.assert_allclose(path[-1], x, atol=1e-13)


def test_heisenberg_stratonovich_matches_ito(rng):
    # Heun's predictor-corrector integrates the Stratonovich form; with a
    # constant control its extra area terms cancel in H^1
    frame = heisenberg(1)
    c = ControlMatrix.from_vector([0.3, 0.9])
    inc = rng.normal(size=(200, 2)) * 0.05
    x_ito = integrate_path(frame, np.zeros(3), inc, 0.0025, ConstantPolicy(c.direction))[-1]
    x = np.zeros(3)
    for dw in inc:
        k1 = SQ2 * frame.sigma(x).T @ c.nu @ dw
        k2 = SQ2 * frame.sigma(x + k1).T @ c.nu @ dw
        x = x + 0.5 * (k1 + k2)
    np.testing.assert_allclose(x, x_ito, atol=1e-12)


# -- simulation ---------------------------------------------------------------------

def test_determinism_across_workers_and_blocks():
    frame = grusin()
    pol = ConstantPolicy([1.0, 2.0])
    a = simulate(frame, [0.2, 0.1], 0.0, 0.3, pol, 1, 0.01, seed=5).states
    b = simulate(frame, [0.2, 0.1], 0.0, 0.3, pol, 1, 0.01, seed=5).states
    assert np.array_equal(a, b)
    ref = simulate(frame, [0.2, 0.1], 0.0, 0.3, pol, 300, 0.01, seed=5).states
    other = simulate(frame, [0.2, 0.1], 0.0, 0.3, pol, 300, 0.01, seed=5, workers=4, block=37, chunk_steps=7).states
    assert np.array_equal(ref, other)
    assert np.array_equal(ref[:1], a)


def test_final_step_lands_on_T():
    ens, times, rec = simulate(heisenberg(1), np.zeros(3), 0.0, 0.105, UnconstrainedPolicy(), 4, 0.01, 1,
                               record_every=1)
    assert times[-1] == 0.105 and len(times) == 12 and rec.shape == (12, 4, 3)
    assert ens.t == 0.105


def test_heisenberg_martingale_mean():
    ens = simulate(heisenberg(1), np.zeros(3), 0.0, 0.1, UnconstrainedPolicy(), 100_000, 0.01, seed=11, block=20000)
    mean = ens.states.mean(axis=0)
    se = ens.states.std(axis=0, ddof=1) / math.sqrt(ens.n_paths)
    assert np.all(np.abs(mean) <= 4 * se)


def test_endpoint_variance_is_2t():
    n, T = 20_000, 0.3
    ens = simulate(euclidean(2), np.zeros(2), 0.0, T, UnconstrainedPolicy(), n, 0.05, seed=3)
    sq = ens.states ** 2
    se = sq.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(sq.mean(axis=0) - 2 * T) <= 4 * se)
    proj = simulate(euclidean(2), np.zeros(2), 0.0, T, ConstantPolicy([1.0, 0.0]), n, 0.05, seed=3)
    np.testing.assert_array_equal(proj.states[:, 0], 0.0)


def test_quadratic_variation():
    dt = 1e-3
    _, _, rec = simulate(heisenberg(1), np.zeros(3), 0.0, 10.0, UnconstrainedPolicy(), 1, dt, seed=8,
                         record_every=1)
    inc = np.diff(rec[:, 0, :2], axis=0)
    q = np.sum(inc ** 2, axis=1) / dt
    assert abs(q.mean() - 2 * 2) <= 4 * q.std(ddof=1) / math.sqrt(q.size)


def test_simulate_errors():
    with pytest.raises(ValueError):
        simulate(heisenberg(1), np.zeros(3), 0.5, 0.5, UnconstrainedPolicy(), 2, 0.1, 1)
    with pytest.raises(ValueError):
        simulate(heisenberg(1), np.zeros(2), 0.0, 0.5, UnconstrainedPolicy(), 2, 0.1, 1)
    with pytest.raises(ValueError):
        path_rng(-1, 0)


def test_blowup_reports_path():
    from hmcf.control import PathBlowUpError
    frame = make_geometry({"n": 1, "m": 1, "sigma": lambda x: np.exp(50 * x)[..., None], "label": "wild"})
    with pytest.raises(PathBlowUpError) as err, np.errstate(over="ignore"):
        simulate(frame, np.array([10.0]), 0.0, 1.0, UnconstrainedPolicy(), 3, 0.1, 1)
    assert err.value.path_index in (0, 1, 2)


# -- feedback --------------------------------------------------------------------------

def test_feedback_examples():
    e2 = euclidean(2)
    c = feedback_optimal_control(e2, ScalarField.from_expression("x1^2 + x2^2", 2), 0.0, [1.0, 0.0])
    np.testing.assert_allclose(c.direction, [1.0, 0.0])
    np.testing.assert_allclose(c.nu, np.diag([0.0, 1.0]))
    c = feedback_optimal_control(e2, ScalarField.from_expression("3*x1 + 0*x2", 2), 0.0, [0.3, 0.4])
    np.testing.assert_allclose(c.nu, np.diag([0.0, 1.0]))
    c = feedback_optimal_control(e2, ScalarField.from_expression("x1^2/2 + 3*x2^2/2", 2), 0.0, [0.0, 0.0])
    np.testing.assert_allclose(c.direction, [0.0, 1.0])


def test_feedback_tie_break_is_deterministic():
    u = ScalarField.from_expression("(x1^2 + x2^2)/2 - x3", 3)
    a = feedback_directions(heisenberg(1), u, np.zeros((1, 3)))
    np.testing.assert_allclose(a, [[1.0, 0.0]])
    v = ScalarField.from_expression("x1^2 + x2^2 + x3^2", 3)
    np.testing.assert_allclose(feedback_directions(euclidean(3), v, np.zeros((1, 3))), [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("name", BUILTINS)
def test_policies_admissible(name, rng):
    frame = make_geometry(name)
    u = ScalarField.from_expression("x1^2 - x2 + 0.3*x1*x2", frame.n)
    x = rng.normal(size=(50, frame.n))
    for pol in default_policy_family(frame, u):
        pol = pol.bind(frame) if isinstance(pol, FeedbackPolicy) else pol
        a = pol.directions(0.0, x)
        np.testing.assert_allclose(np.linalg.norm(a, axis=-1), 1.0, atol=1e-12)
    custom = CustomPolicy(lambda t, y: ControlMatrix.from_vector(np.ones(frame.m)))
    assert custom.directions(0.0, x).shape == (50, frame.m)


def test_direction_fan():
    for m in (1, 2, 3, 4):
        fan = direction_fan(m, 32)
        np.testing.assert_allclose(np.linalg.norm(fan, axis=1), 1.0)
        assert len({tuple(np.round(a, 12)) for a in fan}) == fan.shape[0]


# -- estimators ------------------------------------------------------------------------

def test_constant_cost():
    frame = heisenberg(1)
    g = ScalarField(lambda x: np.full(x.shape[:-1], 0.7))
    fam = default_policy_family(frame, ScalarField.from_expression("x1", 3), fan=4)
    for p in (1, 2, 5, 50):
        assert estimate_vp(frame, np.zeros(3), 0, 0.2, g, p, fam[1], 50, 0.05, seed=p) == pytest.approx(0.7)
    assert estimate_v(frame, np.zeros(3), 0, 0.2, g, fam, 50, 0.05, seed=2).value == 0.7


def test_lp_mean_and_ess_sup_on_fixed_sample(rng):
    frame = heisenberg(1)
    g = ScalarField.from_expression("sin(x1) + x2", 3)
    pol = ConstantPolicy([1.0, 0.0])
    vals = g(simulate(frame, np.zeros(3), 0, 0.5, pol, 500, 0.05, seed=4).states)
    assert estimate_vp(frame, np.zeros(3), 0, 0.5, g, 1, pol, 500, 0.05, seed=4) == pytest.approx(vals.mean())
    vps = estimate_vp(frame, np.zeros(3), 0, 0.5, g, [1, 2, 4, 8, 100, 1e6], pol, 500, 0.05, seed=4)
    assert all(b >= a for a, b in zip(vps, vps[1:]))
    vmax = ess_sup(vals, "max")
    vq = ess_sup(vals, "quantile:0.9")
    assert vmax >= vq and all(vmax >= v - 1e-12 for v in vps)
    assert vq in vals
    assert vps[-1] == pytest.approx(vmax, abs=1e-4)
    with pytest.raises(ValueError):
        ess_sup(vals, "median")
    with pytest.raises(ValueError):
        ess_sup(vals, "quantile:1.5")
    with pytest.raises(ValueError):
        estimate_vp(frame, np.zeros(3), 0, 0.5, g, 0.5, pol, 10, 0.05, seed=4)


def test_huge_p_does_not_overflow():
    v = estimate_vp(heisenberg(1), np.zeros(3), 0, 0.1, ScalarField.from_expression("100 + x1", 3), 1e4,
                    ConstantPolicy([0, 1.0]), 100, 0.05, seed=1)
    assert math.isfinite(v)


def test_estimate_v_family_and_errors():
    frame = heisenberg(1)
    g = ScalarField.from_expression("x1^2 + x2^2", 3)
    est = estimate_v(frame, np.zeros(3), 0, 0.2, g, None, 200, 0.05, seed=9, keep_samples=True)
    assert est.value == min(est.per_policy.values())
    assert est.policy in est.per_policy and set(est.samples) == set(est.per_policy)
    assert est.stderr >= 0
    with pytest.raises(ValueError):
        estimate_v(frame, np.zeros(3), 0, 0.2, g, [], 10, 0.05, seed=9)


def test_seeded_comparison_and_geometric():
    frame = grusin()
    g1 = ScalarField.from_expression("sin(x1) + cos(x2)", 2)
    g2 = ScalarField.from_expression("sin(x1) + cos(x2) + 0.1*x1^2", 2)
    fam = default_policy_family(frame, g1, fan=6)
    x0 = np.array([0.4, 0.2])
    e1 = estimate_v(frame, x0, 0, 0.3, g1, fam, 200, 0.02, seed=6)
    e2 = estimate_v(frame, x0, 0, 0.3, g2, fam, 200, 0.02, seed=6)
    assert e1.value <= e2.value
    phi = lambda s: np.exp(s)  # noqa: E731
    ephi = estimate_v(frame, x0, 0, 0.3, ScalarField(lambda x: phi(g1.fn(x))), fam, 200, 0.02, seed=6)
    assert ephi.value == phi(e1.value)


# -- Hamiltonian --------------------------------------------------------------------------

def test_hamiltonian_examples(rng):
    e2 = euclidean(2)
    assert control_hamiltonian(e2, np.zeros(2), rng.normal(size=2), np.diag([1.0, 3.0])) == pytest.approx(-1.0)
    for c in (-2.0, 0.5, 3.0):
        assert control_hamiltonian(e2, np.zeros(2), np.zeros(2), c * np.eye(2)) == pytest.approx(-c)


def test_hamiltonian_is_sup_over_projection_controls(rng):
    # -Tr(nu^2 S~) over nu = I - a a^T equals -Tr S~ + <S~ a, a>
    frame = heisenberg(2)
    x, d = rng.normal(size=(2, 5))
    S = rng.normal(size=(5, 5))
    S = S + S.T
    from hmcf.calculus import jet_from_derivatives
    st_ = jet_from_derivatives(frame, x, d, S).horiz_hess
    best = max(-np.trace(ControlMatrix.from_vector(a).nu_squared @ st_) for a in rng.normal(size=(20000, 4)))
    assert best <= control_hamiltonian(frame, x, d, S) + 1e-12
    assert best >= control_hamiltonian(frame, x, d, S) - 0.05


def test_left_translation_commutes(rng):
    frame = heisenberg(1)
    inc = rng.normal(size=(100, 2)) * 0.1
    a, x = rng.normal(size=(2, 3))
    pol = ConstantPolicy([0.2, -0.5])
    np.testing.assert_allclose(integrate_path(frame, group_op(a, x), inc, 0.01, pol),
                               group_op(a, integrate_path(frame, x, inc, 0.01, pol)), atol=1e-12)
