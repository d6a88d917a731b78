import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajcvae import latent, proximity
from trajcvae.latent import EmbeddingStore
from trajcvae.proximity import PeriodSpec

D0 = dt.date(2015, 1, 1)


def _days(start, n):
    return [start + dt.timedelta(days=i) for i in range(n)]


def _random_store(rng, n_vessels=5, n_days=10, p_fish=0.6, d=2):
    vids, dates, mus, vars_ = [], [], [], []
    for v in range(n_vessels):
        for day in _days(D0, n_days):
            if rng.random() < p_fish:
                vids.append(f"V{v}")
                dates.append(day)
                mus.append(rng.normal(0, 0.5, d))
                vars_.append(rng.uniform(0.3, 1.0, d))
    return EmbeddingStore(vids, dates, np.array(mus).reshape(-1, d), np.array(vars_).reshape(-1, d))


def brute_graph(store, days, s, q):
    present = sorted({v for v, t in zip(store.vessel_ids, store.dates) if t in days})
    n = len(present)
    adj = np.full((n, n), np.nan)
    for i, a in enumerate(present):
        for j, b in enumerate(present):
            if i == j:
                continue
            common = [t for t in sorted(days) if (a, t) in store and (b, t) in store]
            if not common:
                continue
            share = np.mean([latent.bc_pair(store.get(a, t), store.get(b, t)) >= s for t in common])
            adj[i, j] = float(share >= q)
    return present, adj


# -- periods -------------------------------------------------------------------------


def test_quarters_over_five_years():
    periods = proximity.partition_quarters([dt.date(2011, 1, 1), dt.date(2015, 12, 31)])
    assert len(periods) == 20
    assert periods[0].label == "2011-Q1" and periods[-1].label == "2015-Q4"
    all_days = [d for p in periods for d in p.days]
    assert len(all_days) == len(set(all_days)) == (dt.date(2016, 1, 1) - dt.date(2011, 1, 1)).days


def test_quarter_boundaries_and_single_day():
    periods = proximity.partition_quarters([dt.date(2015, 3, 31), dt.date(2015, 4, 1)])
    assert [p.label for p in periods] == ["2015-Q1", "2015-Q2"]
    assert dt.date(2015, 3, 31) in periods[0].days and dt.date(2015, 4, 1) in periods[1].days
    assert len(proximity.partition_quarters([dt.date(2015, 8, 9)])) == 1
    with pytest.raises(ValueError):
        proximity.partition_quarters([])


def test_month_and_whole_schemes():
    months = proximity.partition_months([dt.date(2015, 11, 30), dt.date(2016, 2, 1)])
    assert [p.label for p in months] == ["2015-11", "2015-12", "2016-01", "2016-02"]
    assert len(months[3].days) == 29
    whole = proximity.partition_whole([dt.date(2015, 1, 5), dt.date(2015, 1, 1)])
    assert len(whole) == 1 and len(whole[0].days) == 5


# -- graph construction ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(8))
def test_graph_matches_brute_force(seed, backend):
    rng = np.random.default_rng(seed)
    store = _random_store(rng)
    s = float(rng.uniform(0.5, 0.95))
    q = float(rng.choice([0.2, 0.5, 1.0]))
    period = PeriodSpec("p", frozenset(_days(D0, 10)))
    g = proximity.build_graph(store, period, s, q)
    vessels, adj = brute_graph(store, period.days, s, q)
    assert g.vessels == vessels
    np.testing.assert_array_equal(g.adj, adj)


def test_graph_invariants_and_na(rng):
    store = _random_store(rng, n_vessels=6, p_fish=0.3)
    g = proximity.build_graph(store, PeriodSpec("p", frozenset(_days(D0, 10))))
    assert np.all(np.isnan(np.diag(g.adj)))
    np.testing.assert_array_equal(np.isnan(g.adj), np.isnan(g.adj.T))
    np.testing.assert_array_equal(np.nan_to_num(g.adj, nan=-1), np.nan_to_num(g.adj.T, nan=-1))
    for i, a in enumerate(g.vessels):
        for j, b in enumerate(g.vessels):
            if i != j:
                common = any((a, t) in store and (b, t) in store for t in _days(D0, 10))
                assert np.isnan(g.adj[i, j]) == (not common)


def test_disjoint_days_give_na_and_absent_vessels_omitted():
    store = EmbeddingStore(["A", "B", "C"], [D0, D0 + dt.timedelta(days=1), D0 + dt.timedelta(days=40)],
                           np.zeros((3, 1)), np.ones((3, 1)))
    g = proximity.build_graph(store, PeriodSpec("p", frozenset(_days(D0, 10))))
    assert g.vessels == ["A", "B"]
    assert np.isnan(g.adj[0, 1])


def test_identical_embeddings_always_connected():
    store = EmbeddingStore(["A", "B"] * 3, [d for d in _days(D0, 3) for _ in range(2)],
                           np.full((6, 2), 0.4), np.full((6, 2), 0.6))
    for s in (0.1, 0.8, 1.0):
        for q in (0.01, 0.5, 1.0):
            g = proximity.build_graph(store, PeriodSpec("p", frozenset(_days(D0, 3))), s, q)
            assert g.adj[0, 1] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_density_monotone_in_s_and_q(seed, a, b, q):
    store = _random_store(np.random.default_rng(seed), n_vessels=5, n_days=8)
    period = PeriodSpec("p", frozenset(_days(D0, 8)))
    lo, hi = sorted((a, b))
    d_lo = proximity.build_graph(store, period, lo, q).adj
    d_hi = proximity.build_graph(store, period, hi, q).adj
    assert np.nansum(d_hi) <= np.nansum(d_lo)
    assert np.all(np.nan_to_num(d_hi) <= np.nan_to_num(d_lo))
    q_lo, q_hi = sorted((a, b))
    e_lo = proximity.build_graph(store, period, q, q_lo).adj
    e_hi = proximity.build_graph(store, period, q, q_hi).adj
    assert np.all(np.nan_to_num(e_hi) <= np.nan_to_num(e_lo))


@pytest.mark.parametrize("seed", range(4))
def test_minimal_q_means_any_common_day(seed):
    store = _random_store(np.random.default_rng(seed))
    days = _days(D0, 10)
    g = proximity.build_graph(store, PeriodSpec("p", frozenset(days)), 0.85, np.nextafter(0.0, 1.0))
    for i, a in enumerate(g.vessels):
        for j, b in enumerate(g.vessels):
            if i == j or np.isnan(g.adj[i, j]):
                continue
            any_hit = any(latent.bc_pair(store.get(a, t), store.get(b, t)) >= 0.85
                          for t in days if (a, t) in store and (b, t) in store)
            assert g.adj[i, j] == float(any_hit)


def test_invalid_thresholds(rng):
    store = _random_store(rng)
    p = PeriodSpec("p", frozenset(_days(D0, 3)))
    for s, q in ((0.0, 0.5), (1.2, 0.5), (0.8, 0.0), (0.8, 1.5)):
        with pytest.raises(ValueError):
            proximity.build_graph(store, p, s, q)
    with pytest.raises(ValueError):
        PeriodSpec("empty", frozenset())


# -- export / import --------------------------------------------------------------------


def _collection(rng, n_periods=20):
    vids, dates, mus, vars_ = [], [], [], []
    start = dt.date(2011, 1, 1)
    for k in range(n_periods):
        quarter_start = dt.date(2011 + k // 4, 3 * (k % 4) + 1, 1)
        for v in range(4):
            for t in range(3):
                if rng.random() < 0.7:
                    vids.append(f"V{v}")
                    dates.append(quarter_start + dt.timedelta(days=t))
                    mus.append(rng.normal(0, 0.4, 2))
                    vars_.append(rng.uniform(0.3, 1, 2))
    store = EmbeddingStore(vids, dates, np.array(mus), np.array(vars_))
    periods = proximity.partition_quarters([start, dt.date(2011 + (n_periods - 1) // 4, 12, 31)])
    return proximity.build_collection(store, periods[:n_periods], 0.8, 0.5)


def test_collection_round_trip(tmp_path, rng):
    coll = _collection(rng)
    proximity.export_collection(coll, tmp_path / "g.csv")
    assert (tmp_path / "g_roster.csv").is_file()
    back = proximity.import_collection(tmp_path / "g.csv")
    assert back.labels() == coll.labels() and len(set(back.labels())) == 20
    assert back.node_ids() == coll.node_ids()
    for a, b in zip(back.adjacencies(), coll.adjacencies()):
        np.testing.assert_array_equal(a, b)
    text = (tmp_path / "g.csv").read_text()
    assert text.splitlines()[0] == "period,vessel_a,vessel_b,edge"
    edges = {line.rsplit(",", 1)[1] for line in text.splitlines()[1:]}
    assert edges <= {"0", "1", "NA"}


def test_import_errors_carry_row_numbers(tmp_path, rng):
    coll = _collection(rng, 2)
    proximity.export_collection(coll, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    bad = lines[:2] + [lines[2].rsplit(",", 1)[0] + ",maybe"] + lines[3:]
    (tmp_path / "g.csv").write_text("\n".join(bad) + "\n")
    with pytest.raises(ValueError, match=r"g\.csv:3:"):
        proximity.import_collection(tmp_path / "g.csv")
    (tmp_path / "g.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError, match="expected"):
        proximity.import_collection(tmp_path / "g.csv")
