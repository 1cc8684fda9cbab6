import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rpems import atom, forward as fw, qipm
from rpems.atom import Alphabet
from conftest import square_spec
from oracles import direct_convergence_index, exhaustive_cell_quantize, exhaustive_global_quantize

POL = np.array([1.0, 0.0, 0.0])
powers = arrays(np.float64, (6, 5), elements=st.floats(0, 1e3))


@pytest.fixture(scope="module")
def square10():
    spec = square_spec(10)
    op = fw.assemble_operator(spec)
    alpha = atom.derive_alphabet(atom.NOMINAL_G, spec.incident)
    ref = float(np.max(np.abs(op.forward(np.full((10, 10), alpha.state_values[1]))) ** 2))
    desired = spec.footprints[0].power(ref).ravel()
    return spec, op, alpha, desired


def assert_feasible(res, alphabet, weights=None, pairing="state"):
    mi, pi = res.mag_index, res.phase_index
    assert set(np.unique(mi)) <= {0, 1} and set(np.unique(pi)) <= {0, 1}
    if pairing == "state":
        assert np.array_equal(mi, pi)
    w = np.ones(mi.shape) if weights is None else weights
    expected = w * alphabet.mags[mi] * np.exp(1j * alphabet.phases[pi])
    assert np.array_equal(res.coeffs, expected)
    assert np.all(np.isin(res.magnitudes, alphabet.mags))
    assert np.all(np.isin(res.phases, alphabet.phases))


# -- cost, projection, convergence index -----------------------------------


def test_macro_cost_examples():
    d = np.full((4, 4), 2.0)
    assert qipm.macro_cost(d, d) == 0.0
    assert qipm.macro_cost(d + 1, d) == 0.0
    assert qipm.macro_cost(d - 0.5, d, cell_area=3.0) == pytest.approx(0.5 * 16 * 3.0)
    with pytest.raises(ValueError, match="grid mismatch"):
        qipm.macro_cost(d, np.ones((3, 3)))


def test_projection_examples():
    d = np.ones(4)
    assert np.array_equal(qipm.project_footprint(np.zeros(4), d), d)
    assert np.array_equal(qipm.project_footprint(3 * d, d), 3 * d)
    assert np.array_equal(qipm.project_footprint([0.5, 2.0], [1.0, 1.0]), [1.0, 2.0])


@settings(max_examples=100, deadline=None)
@given(powers, powers)
def test_projection_properties(f, d):
    r = qipm.project_footprint(f, d)
    assert np.all(r >= d) and np.all(r >= f)
    assert np.array_equal(qipm.project_footprint(r, d), r)


def test_convergence_index_examples(rng):
    f = rng.uniform(0.1, 1, (5, 5))
    assert qipm.convergence_index(f, f) == 0.0
    u = np.full((5, 5), 0.7)
    assert qipm.convergence_index(2 * u, u) == pytest.approx(1.0, rel=1e-15)
    for _ in range(10):
        r, f = rng.uniform(0, 5, (5, 5)), rng.uniform(0, 5, (5, 5))
        assert qipm.convergence_index(r, f) == pytest.approx(direct_convergence_index(r, f), rel=1e-13)
    with pytest.raises(ValueError, match="zero"):
        qipm.convergence_index(f, np.zeros((5, 5)))


# -- quantizer -------------------------------------------------------------


def test_quantize_real_axis_examples():
    a = Alphabet([1.0, 1.0], [0.0, math.pi], POL)
    alpha, chi, *_ = qipm.quantize_current(np.array([[-0.9]]), a)
    assert (alpha[0, 0], chi[0, 0]) == (1.0, math.pi)
    alpha, chi, *_ = qipm.quantize_current(np.array([[0.1]]), a)
    assert (alpha[0, 0], chi[0, 0]) == (1.0, 0.0)


def test_quantize_ties_go_to_state_zero():
    a = Alphabet([1.0, 1.0], [0.0, math.pi], POL)
    for pairing in ("state", "product"):
        *_, mi, pi, _ = qipm.quantize_current(np.array([[0.5j]]), a, pairing)
        assert (mi[0, 0], pi[0, 0]) == (0, 0)


def test_quantize_zero_target_rejected():
    a = Alphabet([1.0, 2.0], [0.0, 1.0], POL)
    with pytest.raises(ValueError, match="zero-norm"):
        qipm.quantize_current(np.zeros((2, 2)), a)


def test_quantize_matches_global_enumeration_3x3(rng):
    for _ in range(3):
        a = Alphabet(rng.uniform(0.1, 2, 2), rng.uniform(-math.pi, math.pi, 2), POL)
        t = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        alpha, chi, _, _, rho = qipm.quantize_current(t, a)
        best, cost = exhaustive_global_quantize(t, a.mags, a.phases)
        ea, ec = exhaustive_cell_quantize(t, a.mags, a.phases)
        assert np.array_equal(alpha, ea) and np.array_equal(chi, ec)
        assert np.allclose(alpha * np.exp(1j * chi), best, rtol=1e-15, atol=0)
        assert rho == pytest.approx(cost / np.sum(np.abs(t) ** 2), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quantize_cellwise_optimal(seed):
    rng = np.random.default_rng(seed)
    a = Alphabet(rng.uniform(0, 2, 2), rng.uniform(-math.pi, math.pi, 2), POL)
    t = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    alpha, chi, *_ = qipm.quantize_current(t, a)
    ea, ec = exhaustive_cell_quantize(t, a.mags, a.phases)
    assert np.array_equal(alpha, ea) and np.array_equal(chi, ec)


# -- minimum-norm step -----------------------------------------------------


def test_min_norm_of_zero_is_zero(square10):
    _, op, _, _ = square10
    c = qipm.min_norm_current(np.zeros(op.n_samples), np.ones(op.n_samples), op)
    assert not np.any(c)


def test_min_norm_rejects_negative_power(square10):
    _, op, _, _ = square10
    r = np.ones(op.n_samples)
    r[3] = -1.0
    with pytest.raises(ValueError):
        qipm.min_norm_current(r, r, op)


def test_min_norm_reproduces_retained_field(square10):
    _, op, alpha, _ = square10
    c = np.full((10, 10), alpha.state_values[0])
    e = op.forward(c)
    out = qipm.min_norm_current(np.abs(e) ** 2, e, op)
    # only the retained singular subspace is reproduced
    uk = op.u_vecs[:, : op.retained(1e-3)]
    lhs, rhs = uk.conj().T @ op.forward(out), uk.conj().T @ e
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


# -- solver loop -----------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        qipm.QipmConfig(max_iters=0)
    with pytest.raises(ValueError):
        qipm.QipmConfig(conv_threshold=0)
    with pytest.raises(ValueError):
        qipm.QipmConfig(svd_rel_threshold=1.0)
    with pytest.raises(ValueError):
        qipm.QipmConfig(pairing="nope")


def test_no_demand_converges_immediately(square10):
    _, op, alpha, _ = square10
    ref, tr = qipm.run_qipm(np.zeros(op.n_samples), alpha, op, qipm.QipmConfig(seed=4))
    assert tr.stop_reason == "converged" and len(tr) == 1 and tr.xi[0] == 0.0
    assert_feasible(ref, alpha)


@pytest.mark.parametrize("pairing", ["state", "product"])
def test_square_scenario_output_feasible(square10, pairing):
    _, op, alpha, desired = square10
    cfg = qipm.QipmConfig(max_iters=100, seed=0, pairing=pairing)
    ref, tr = qipm.run_qipm(desired, alpha, op, cfg)
    assert_feasible(ref, alpha, pairing=pairing)
    assert len(tr) <= 100
    assert ref.cost == min(tr.cost)
    assert (tr.stop_reason == "converged") == (tr.xi[-1] <= cfg.conv_threshold)
    if pairing == "state":
        assert np.array_equal(ref.states, ref.mag_index)


def test_qipm_deterministic(square10):
    _, op, alpha, desired = square10
    cfg = qipm.QipmConfig(max_iters=30, seed=9)
    a, ta = qipm.run_qipm(desired, alpha, op, cfg)
    b, tb = qipm.run_qipm(desired, alpha, op, cfg)
    assert ta.rows() == tb.rows() and ta.stop_reason == tb.stop_reason
    assert np.array_equal(a.coeffs, b.coeffs)
    c, _ = qipm.run_ipm(desired, alpha, op, cfg)
    d, _ = qipm.run_ipm(desired, alpha, op, cfg)
    assert np.array_equal(c.coeffs, d.coeffs)


def test_ipm_converges_on_reachable_target(square10):
    _, op, alpha, _ = square10
    c = np.full((10, 10), alpha.state_values[1])
    target = np.abs(op.forward(c)) ** 2
    _, tr = qipm.run_ipm(target, alpha, op, qipm.QipmConfig(max_iters=100, seed=3))
    assert tr.stop_reason == "converged"
    assert tr.xi[-1] <= 1e-4


def test_ipm_approaches_random_reachable_target(square10, rng):
    _, op, alpha, _ = square10
    c = (rng.normal(size=(10, 10)) + 1j * rng.normal(size=(10, 10))) * alpha.mags[0]
    target = np.abs(op.forward(c)) ** 2
    _, tr = qipm.run_ipm(target, alpha, op, qipm.QipmConfig(max_iters=100, seed=3))
    assert tr.xi[-1] < 1e-2 * tr.xi[0]


def test_ipm_cost_not_above_qipm_at_matched_iterations(square10):
    _, op, alpha, desired = square10
    cfg = qipm.QipmConfig(max_iters=100, seed=0)
    _, tq = qipm.run_qipm(desired, alpha, op, cfg, rng=np.random.default_rng(0))
    _, ti = qipm.run_ipm(desired, alpha, op, cfg, rng=np.random.default_rng(0))
    n = min(len(tq), len(ti))
    assert tq.cost[0] == ti.cost[0]  # same starting point
    assert all(ti.cost[p] <= tq.cost[p] for p in range(n))


def test_oblique_weights_enter_feasible_set():
    spec = square_spec(6, incident={"theta_inc": 30.0, "phi_inc": 20.0, "e_perp": 1.0, "e_par": 1.0})
    w = spec.incident
    op = fw.assemble_operator(spec)
    alpha = atom.derive_alphabet(atom.NOMINAL_G, w)
    weights = fw.cell_average_factors(w, spec)
    desired = spec.footprints[0].power(1e-12).ravel()
    ref, _ = qipm.run_qipm(desired, alpha, op, qipm.QipmConfig(max_iters=20, seed=1), weights=weights)
    assert_feasible(ref, alpha, weights)
