import math

import numpy as np
import pytest

from rpems import atom, surrogate as sg
from rpems.scenario import IncidentWave

WAVE = IncidentWave(0.0, 0.0, 1.0, 1.0, atom.F0_DESIGN)


@pytest.fixture(scope="module")
def trained():
    ts = sg.oracle_training_set(200, rng=5)
    return ts, sg.train(ts, nugget=0.0)


def oracle_outputs(g, s):
    out = []
    for gi, si in zip(g, s):
        gam = atom.oracle_reflection(gi, int(si))
        out.append(sg.response_vector(gam, atom.gamma_to_susceptibility(gam, WAVE)))
    return np.array(out)


def fresh_queries(ts, n, seed):
    rng = np.random.default_rng(seed)
    g = atom.expand_free(ts.lo + rng.random((n, 8)) * (ts.hi - ts.lo))
    s = rng.integers(0, 2, n)
    return g, s


def test_response_vector_round_trip():
    gam = atom.oracle_reflection(atom.NOMINAL_G, 1)
    k = atom.gamma_to_susceptibility(gam, WAVE)
    y = sg.response_vector(gam, k)
    assert y.shape == (20,)
    g2, k2 = sg.split_response(y)
    assert np.array_equal(g2.as_array(), gam.as_array())
    assert np.array_equal(k2.as_array(), k.as_array())


def test_training_set_validation():
    ts = sg.oracle_training_set(6, rng=1)
    with pytest.raises(ValueError, match="duplicate"):
        sg.TrainingSet(np.vstack([ts.g, ts.g]), np.concatenate([ts.s, ts.s]), np.vstack([ts.y, ts.y]),
                       ts.lo, ts.hi, ts.f0)
    with pytest.raises(ValueError, match="at least 2"):
        sg.TrainingSet(ts.g[:1], ts.s[:1], ts.y[:1], ts.lo, ts.hi, ts.f0)


def test_inputs_in_unit_box():
    ts = sg.oracle_training_set(50, rng=2)
    x = ts.inputs()
    assert x.shape == (50, sg.N_IN)
    assert np.all(x >= 0) and np.all(x <= 1)
    assert set(np.unique(x[:, -1])) == {0.0, 1.0}


def test_exact_interpolation_zero_nugget(trained):
    ts, model = trained
    mean, var = model.predict(ts.g, ts.s)
    span = np.ptp(ts.y, axis=0)
    span = np.where(span > 0, span, 1.0)
    assert np.max(np.abs(mean - ts.y) / span) <= 1e-8
    sig = np.array([m.sigma2 for m in model.models])
    for cols, s2 in zip(model.groups, sig):
        assert np.max(var[:, cols]) <= 1e-8 * s2


def test_variance_nonnegative_and_positive_off_data(trained):
    ts, model = trained
    g, s = fresh_queries(ts, 50, 7)
    _, var = model.predict(g, s)
    assert np.all(var >= 0)
    for cols in model.groups:
        assert np.all(var[:, cols[0]] > 0)


def test_held_out_accuracy(trained):
    ts, model = trained
    g, s = fresh_queries(ts, 100, 8)
    pred, _ = model.predict(g, s)
    truth = oracle_outputs(g, s)
    span = np.ptp(ts.y, axis=0)
    live = span > 0
    rmse = np.sqrt(np.mean((pred - truth) ** 2, axis=0))
    assert np.all(rmse[live] / span[live] <= 0.05)
    assert np.array_equal(pred[:, ~live], truth[:, ~live])


def test_far_query_reverts_to_trend(trained):
    ts, model = trained
    g = atom.NOMINAL_G.copy()
    g[atom.FREE] = ts.hi + 40 * (ts.hi - ts.lo)
    g = atom.expand_free(g[atom.FREE])
    mean, _ = model.predict(g, 0)
    for cols, m in zip(model.groups, model.models):
        assert mean[cols[0]] == pytest.approx(m.mu, rel=1e-12, abs=1e-300)
    assert not model.in_box(g)
    assert model.in_box(atom.NOMINAL_G)


def test_constant_data():
    ts = sg.oracle_training_set(12, rng=3)
    const = sg.TrainingSet(ts.g, ts.s, np.tile(ts.y[0], (12, 1)), ts.lo, ts.hi, ts.f0)
    model = sg.train(const)
    assert not model.groups
    g, s = fresh_queries(ts, 5, 1)
    mean, var = model.predict(g, s)
    assert np.array_equal(mean, np.tile(ts.y[0], (5, 1)))
    assert not np.any(var)
    rep = sg.cross_validate(const, k=3)
    assert all(v == 0.0 for v in rep.values())


def test_permutation_invariance():
    ts = sg.oracle_training_set(60, rng=4)
    perm = np.random.default_rng(0).permutation(60)
    a = sg.train(ts, lengths=0.5)
    b = sg.train(ts.subset(perm), lengths=0.5)
    g, s = fresh_queries(ts, 20, 2)
    pa, _ = a.predict(g, s)
    pb, _ = b.predict(g, s)
    span = np.where(np.ptp(ts.y, axis=0) > 0, np.ptp(ts.y, axis=0), 1.0)
    assert np.max(np.abs(pa - pb) / span) <= 1e-9


def test_training_deterministic():
    ts = sg.oracle_training_set(40, rng=6)
    a, b = sg.train(ts), sg.train(ts)
    g, s = fresh_queries(ts, 10, 3)
    assert np.array_equal(a.predict(g, s)[0], b.predict(g, s)[0])
    assert a.header() == b.header()
    assert all(np.all(np.array(ls) > 0) for ls in a.header()["lengths"])


def test_cross_validate_report():
    ts = sg.oracle_training_set(40, rng=6)
    rep = sg.cross_validate(ts, k=5, seed=1, lengths=0.5)
    assert list(rep) == sg.OUTPUT_NAMES
    assert all(math.isfinite(v) and v >= 0 for v in rep.values())
    assert rep == sg.cross_validate(ts, k=5, seed=1, lengths=0.5)
    with pytest.raises(ValueError):
        sg.cross_validate(ts, k=41)
    with pytest.raises(ValueError):
        sg.cross_validate(ts, k=1)


def test_save_load_round_trip(trained, tmp_path):
    ts, model = trained
    p = tmp_path / "twin.krg"
    model.save(p)
    back = sg.KrigingModel.load(p)
    g, s = fresh_queries(ts, 10, 4)
    assert np.array_equal(back.predict(g, s)[0], model.predict(g, s)[0])
    assert np.array_equal(back.predict(g, s)[1], model.predict(g, s)[1])
    assert back.header() == model.header()
    raw = p.read_bytes()
    assert raw.startswith(sg.MAGIC)
    bad = tmp_path / "bad.krg"
    bad.write_bytes(b"NOTMODEL" + raw[8:])
    with pytest.raises(sg.KrigingError):
        sg.KrigingModel.load(bad)


def test_twin_alphabet_close_to_oracle(trained):
    _, model = trained
    twin = sg.KrigingTwin(model)
    a = atom.derive_alphabet(atom.NOMINAL_G, WAVE, model=twin)
    b = atom.derive_alphabet(atom.NOMINAL_G, WAVE)
    assert np.allclose(a.mags, b.mags, rtol=1e-2)
    assert np.allclose(a.phases, b.phases, atol=1e-2)
