import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from trajcvae import latent
from trajcvae.latent import DSI, DSI_SAME_DAY, GSI, EmbeddingStore, LatentGaussian

D0 = dt.date(2015, 3, 1)


def _quad_bc(m1, v1, m2, v2):
    f = lambda x: math.sqrt(stats.norm.pdf(x, m1, math.sqrt(v1)) * stats.norm.pdf(x, m2, math.sqrt(v2)))
    lo = min(m1 - 12 * math.sqrt(v1), m2 - 12 * math.sqrt(v2))
    hi = max(m1 + 12 * math.sqrt(v1), m2 + 12 * math.sqrt(v2))
    val, _ = integrate.quad(f, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=200,
                            points=sorted({m1, m2}))
    return val


# -- BC --------------------------------------------------------------------------


def test_bc_identical_is_one(rng):
    p = LatentGaussian(rng.normal(size=4), rng.uniform(0.1, 2, 4))
    assert abs(latent.bc_pair(p, p) - 1.0) <= 1e-12


def test_bc_unit_shift_value():
    bc = latent.bc_pair(LatentGaussian([0.0], [1.0]), LatentGaussian([1.0], [1.0]))
    assert bc == pytest.approx(math.exp(-1 / 8), abs=1e-15)
    assert bc == pytest.approx(_quad_bc(0, 1, 1, 1), abs=1e-9)


def test_bc_matches_quadrature(rng):
    for _ in range(50):
        m1, m2 = rng.normal(0, 1.5, 2)
        v1, v2 = rng.uniform(0.05, 3.0, 2)
        got = latent.bc_pair(LatentGaussian([m1], [v1]), LatentGaussian([m2], [v2]))
        assert abs(got - _quad_bc(m1, v1, m2, v2)) < 1e-6


def test_bc_factorizes_over_dimensions(rng):
    mu_p, mu_q = rng.normal(size=(2, 2))
    var_p, var_q = rng.uniform(0.2, 2, (2, 2))
    full = latent.bc_pair(LatentGaussian(mu_p, var_p), LatentGaussian(mu_q, var_q))
    parts = [latent.bc_pair(LatentGaussian([mu_p[k]], [var_p[k]]), LatentGaussian([mu_q[k]], [var_q[k]]))
             for k in range(2)]
    assert abs(full - parts[0] * parts[1]) < 1e-12
    np.testing.assert_allclose(np.prod(latent.bc_factors(mu_p, var_p, mu_q, var_q)), full, rtol=0, atol=1e-15)


finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.01, 10.0, allow_nan=False)


@settings(max_examples=200)
@given(st.lists(st.tuples(finite, positive, finite, positive), min_size=1, max_size=4))
def test_bc_range_and_equality(dims):
    a = LatentGaussian([d[0] for d in dims], [d[1] for d in dims])
    b = LatentGaussian([d[2] for d in dims], [d[3] for d in dims])
    bc = latent.bc_pair(a, b)
    assert 0.0 <= bc <= 1.0 + 1e-15
    # strictly positive unless exp underflows double precision
    log_bc = sum(0.5 * np.log(2 * np.sqrt(va * vb) / (va + vb)) - 0.25 * (ma - mb) ** 2 / (va + vb)
                 for ma, va, mb, vb in dims)
    if log_bc > -700:
        assert bc > 0.0
    assert bc == pytest.approx(latent.bc_pair(b, a), rel=1e-14)
    assert latent.bc_pair(a, a) == 1.0
    if not (np.array_equal(a.mu, b.mu) and np.array_equal(a.var, b.var)):
        # distinct parameters can only reach 1 through rounding
        assert bc < 1.0 or np.allclose(a.mu, b.mu, atol=1e-6) and np.allclose(a.var, b.var, rtol=1e-6)


def test_bc_validation_and_hellinger():
    with pytest.raises(ValueError):
        LatentGaussian([0.0], [0.0])
    with pytest.raises(ValueError):
        LatentGaussian([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        latent.bc_pair(LatentGaussian([0.0], [1.0]), LatentGaussian([0.0, 0.0], [1.0, 1.0]))
    p, q = LatentGaussian([0.0], [1.0]), LatentGaussian([1.0], [1.0])
    assert latent.hellinger(p, q) == pytest.approx(math.sqrt(1 - math.exp(-1 / 8)))


# -- store and series ------------------------------------------------------------------


def _store(rng, vessels=("A", "B", "C"), n_days=6, drop=0.0, d=2, spread=0.6):
    vids, dates, mus, vars_ = [], [], [], []
    for v in vessels:
        for t in range(n_days):
            if rng.random() < drop:
                continue
            vids.append(v)
            dates.append(D0 + dt.timedelta(days=t))
            mus.append(rng.normal(0, spread, d))
            vars_.append(rng.uniform(0.2, 1.0, d))
    return EmbeddingStore(vids, dates, np.array(mus), np.array(vars_))


def test_bc_series_self_symmetric_and_loop(rng, backend):
    store = _store(rng)
    keys = list(zip(store.vessel_ids, store.dates))
    np.testing.assert_allclose(latent.bc_series(store, [(k, k) for k in keys]), 1.0, atol=1e-12)
    idx = rng.integers(0, len(keys), (100, 2))
    pairs = [(keys[i], keys[j]) for i, j in idx]
    vals = latent.bc_series(store, pairs)
    np.testing.assert_allclose(vals, latent.bc_series(store, [(b, a) for a, b in pairs]), rtol=1e-15)
    loop = [latent.bc_pair(store.get(*a), store.get(*b)) for a, b in pairs]
    np.testing.assert_allclose(vals, loop, rtol=1e-14, atol=0)


def test_bc_series_missing_key_named(rng):
    store = _store(rng)
    with pytest.raises(KeyError, match="Z"):
        latent.bc_series(store, [(("Z", D0), ("A", D0))])
    with pytest.raises(ValueError, match="duplicate"):
        EmbeddingStore(["A", "A"], [D0, D0], np.zeros((2, 1)), np.ones((2, 1)))


# -- stability -----------------------------------------------------------------------


def brute_vessel(store, v, kind, s):
    rows = [i for i in range(len(store)) if store.vessel_ids[i] == v]
    hits = total = 0
    for a in rows:
        for b in rows:
            ta, tb = store.dates[a], store.dates[b]
            if kind == GSI and ta < tb or kind == DSI and (tb - ta).days == 1:
                total += 1
                hits += latent.bc_pair(store.get(v, ta), store.get(v, tb)) >= s
    return (hits / total if total else None), total


def brute_fleet(store, kind, s):
    vessels = sorted(set(store.vessel_ids))
    hits = total = 0
    for i, b in enumerate(vessels):
        for bp in vessels[i + 1 :]:
            for ta in [d for v, d in zip(store.vessel_ids, store.dates) if v == b]:
                for tb in [d for v, d in zip(store.vessel_ids, store.dates) if v == bp]:
                    gap = abs((tb - ta).days)
                    if {GSI: gap != 0, DSI: gap == 1, DSI_SAME_DAY: gap == 0}[kind]:
                        total += 1
                        hits += latent.bc_pair(store.get(b, ta), store.get(bp, tb)) >= s
    return (hits / total if total else None), total


@pytest.mark.parametrize("seed", range(5))
def test_stability_matches_brute_force(seed, backend):
    rng = np.random.default_rng(seed)
    store = _store(rng, n_days=12, drop=0.25)
    for v in store.vessels():
        for kind in (GSI, DSI):
            got = latent.stability_index(store, v, kind, 0.7)
            assert (got.value, got.pair_count) == brute_vessel(store, v, kind, 0.7)


@pytest.mark.parametrize("seed", range(3))
def test_fleet_stability_matches_brute_force(seed, backend):
    store = _store(np.random.default_rng(seed), n_days=5, drop=0.2, spread=0.4)
    for kind in (GSI, DSI, DSI_SAME_DAY):
        got = latent.fleet_stability(store, kind, 0.75)
        assert (got.value, got.pair_count) == brute_fleet(store, kind, 0.75)


def test_stability_trivial_cases(rng):
    n = 6
    same = EmbeddingStore(["A"] * n + ["B"] * n, [D0 + dt.timedelta(days=t) for t in range(n)] * 2,
                          np.tile([0.3, -0.1], (2 * n, 1)), np.tile([0.5, 0.7], (2 * n, 1)))
    for kind in (GSI, DSI):
        assert latent.stability_index(same, "A", kind, 1.0).value == 1.0
    assert latent.fleet_stability(same, GSI, 1.0).value == 1.0
    store = _store(rng)
    assert latent.stability_index(store, "A", GSI, 1e-300).value == 1.0
    one = EmbeddingStore(["A"], [D0], np.zeros((1, 1)), np.ones((1, 1)))
    empty = latent.stability_index(one, "A", GSI)
    assert empty.value is None and empty.pair_count == 0
    assert latent.fleet_stability(one).value is None
    gap = EmbeddingStore(["A", "A"], [D0, D0 + dt.timedelta(days=2)], np.zeros((2, 1)), np.ones((2, 1)))
    assert latent.stability_index(gap, "A", DSI).pair_count == 0
    with pytest.raises(ValueError):
        latent.stability_index(store, "A", GSI, 0.0)
    with pytest.raises(ValueError):
        latent.stability_index(store, "A", "XSI")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_stability_monotone_in_threshold(seed, s1, s2):
    store = _store(np.random.default_rng(seed), vessels=("A", "B"), n_days=7)
    lo, hi = sorted((s1, s2))
    for kind in (GSI, DSI):
        assert latent.stability_index(store, "A", kind, lo).value >= latent.stability_index(store, "A", kind, hi).value
    assert latent.fleet_stability(store, GSI, lo).value >= latent.fleet_stability(store, GSI, hi).value


# -- exports --------------------------------------------------------------------------


def test_stability_export(tmp_path, rng):
    store = _store(rng)
    one = EmbeddingStore(["A", "A", "Q"], [D0, D0 + dt.timedelta(days=1), D0], np.zeros((3, 2)), np.ones((3, 2)))
    for st_ in (store, one):
        rep = latent.stability_report(st_, 0.8)
        latent.export_stability(rep, tmp_path / "s.csv")
        rows = latent.read_stability(tmp_path / "s.csv")
        assert list(rows[0]) == ["vessel_id", "index_kind", "value", "pair_count", "threshold"]
        assert {r["index_kind"] for r in rows if r["vessel_id"] == latent.FLEET} == {GSI, DSI, DSI_SAME_DAY}
        assert all(r["threshold"] == "0.8" for r in rows)
    q_rows = [r for r in rows if r["vessel_id"] == "Q"]
    assert all(r["value"] == "NA" and r["pair_count"] == "0" for r in q_rows)


def test_embeddings_round_trip(tmp_path, rng):
    store = _store(rng, d=3)
    latent.export_embeddings(store, tmp_path / "e.csv")
    back = latent.read_embeddings(tmp_path / "e.csv")
    assert back.vessel_ids == store.vessel_ids and back.dates == store.dates
    np.testing.assert_array_equal(back.mu, store.mu)
    np.testing.assert_array_equal(back.var, store.var)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "vessel_id,date,mu_1,mu_2,mu_3,var_1,var_2,var_3"


def test_bc_long_export(tmp_path, rng):
    store = _store(rng, n_days=3)
    pairs = list(latent.default_bc_pairs(store))
    # 3 vessels x 2 consecutive pairs, then 3 same-day pairs on each of 3 days
    assert len(pairs) == 6 + 9
    latent.export_bc_long(store, tmp_path / "bc.csv", pairs)
    lines = (tmp_path / "bc.csv").read_text().splitlines()
    assert lines[0] == "b,t,b_prime,t_prime,bc" and len(lines) == 16
    b, t, bp, tp, v = lines[1].split(",")
    assert float(v) == latent.bc_pair(store.get(b, dt.date.fromisoformat(t)), store.get(bp, dt.date.fromisoformat(tp)))
