"""Per-period proximity graphs from same-day latent overlaps."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .latent import DEFAULT_THRESHOLD, EmbeddingStore

DEFAULT_Q = 0.5


@dataclass(frozen=True)
class PeriodSpec:
    label: str
    days: frozenset

    def __post_init__(self):
        if not self.days:
            raise ValueError(f"period {self.label!r} has no days")


def _quarter_of(day: dt.date) -> int:
    return (day.month - 1) // 3 + 1


def _quarter_days(year: int, q: int) -> frozenset:
    start = dt.date(year, 3 * (q - 1) + 1, 1)
    end = dt.date(year + 1, 1, 1) if q == 4 else dt.date(year, 3 * q + 1, 1)
    return frozenset(start + dt.timedelta(days=i) for i in range((end - start).days))


def partition_quarters(dates: Iterable[dt.date]) -> list[PeriodSpec]:
    """Calendar quarters from the first to the last observed date, labelled like ``2015-Q2``."""
    dates = list(dates)
    if not dates:
        raise ValueError("no dates to partition")
    lo, hi = min(dates), max(dates)
    out = []
    year, q = lo.year, _quarter_of(lo)
    while (year, q) <= (hi.year, _quarter_of(hi)):
        out.append(PeriodSpec(f"{year}-Q{q}", _quarter_days(year, q)))
        year, q = (year + 1, 1) if q == 4 else (year, q + 1)
    return out


def partition_months(dates: Iterable[dt.date]) -> list[PeriodSpec]:
    dates = list(dates)
    if not dates:
        raise ValueError("no dates to partition")
    lo, hi = min(dates), max(dates)
    out = []
    year, m = lo.year, lo.month
    while (year, m) <= (hi.year, hi.month):
        start = dt.date(year, m, 1)
        nxt = dt.date(year + 1, 1, 1) if m == 12 else dt.date(year, m + 1, 1)
        out.append(PeriodSpec(f"{year}-{m:02d}", frozenset(start + dt.timedelta(days=i) for i in range((nxt - start).days))))
        year, m = (year + 1, 1) if m == 12 else (year, m + 1)
    return out


def partition_whole(dates: Iterable[dt.date]) -> list[PeriodSpec]:
    dates = list(dates)
    if not dates:
        raise ValueError("no dates to partition")
    lo, hi = min(dates), max(dates)
    return [PeriodSpec("all", frozenset(lo + dt.timedelta(days=i) for i in range((hi - lo).days + 1)))]


PERIOD_SCHEMES = {"quarter": partition_quarters, "month": partition_months, "all": partition_whole}


@dataclass
class ProximityGraph:
    """Ternary adjacency over the vessels active in a period; NaN marks NA."""

    label: str
    vessels: list
    adj: np.ndarray

    def __post_init__(self):
        self.adj = np.asarray(self.adj, dtype=np.float64)
        n = len(self.vessels)
        if self.adj.shape != (n, n):
            raise ValueError(f"graph {self.label}: adjacency shape {self.adj.shape} for {n} vessels")

    def density(self) -> float:
        iu = np.triu_indices(len(self.vessels), 1)
        vals = self.adj[iu]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if vals.size else float("nan")


@dataclass
class GraphCollection:
    graphs: list
    s: float = DEFAULT_THRESHOLD
    q: float = DEFAULT_Q

    def __len__(self):
        return len(self.graphs)

    def adjacencies(self) -> list:
        return [g.adj for g in self.graphs]

    def node_ids(self) -> list:
        return [list(g.vessels) for g in self.graphs]

    def labels(self) -> list:
        return [g.label for g in self.graphs]


def build_graph(store: EmbeddingStore, period: PeriodSpec, s: float = DEFAULT_THRESHOLD, q: float = DEFAULT_Q) -> ProximityGraph:
    """Edge when the share of common days with BC >= s reaches q; NA without common days."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"s={s} outside (0, 1]")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q={q} outside (0, 1]")
    by_day: dict = {}
    for i, day in enumerate(store.dates):
        if day in period.days:
            by_day.setdefault(day, []).append(i)
    vessels = sorted({store.vessel_ids[i] for rows in by_day.values() for i in rows})
    pos = {v: k for k, v in enumerate(vessels)}
    n = len(vessels)
    hits = np.zeros((n, n))
    common = np.zeros((n, n))
    for day in sorted(by_day):
        rows = np.array(by_day[day], dtype=np.int64)
        if rows.size < 2:
            continue
        ia, ib = np.triu_indices(rows.size, 1)
        ra, rb = rows[ia], rows[ib]
        vals = kernels.bc_rows(store.mu[ra], store.var[ra], store.mu[rb], store.var[rb])
        pa = np.array([pos[store.vessel_ids[i]] for i in ra])
        pb = np.array([pos[store.vessel_ids[i]] for i in rb])
        np.add.at(common, (pa, pb), 1.0)
        np.add.at(hits, (pa, pb), (vals >= s).astype(np.float64))
    common = common + common.T
    hits = hits + hits.T
    with np.errstate(invalid="ignore", divide="ignore"):
        share = hits / common
    adj = np.where(common > 0, (share >= q).astype(np.float64), np.nan)
    np.fill_diagonal(adj, np.nan)
    return ProximityGraph(period.label, vessels, adj)


def build_collection(store: EmbeddingStore, periods: Sequence[PeriodSpec], s: float = DEFAULT_THRESHOLD,
                     q: float = DEFAULT_Q, drop_empty: bool = True) -> GraphCollection:
    graphs = [build_graph(store, p, s, q) for p in periods]
    if drop_empty:
        graphs = [g for g in graphs if g.vessels]
    return GraphCollection(graphs, s, q)


def roster_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_roster" + path.suffix)


def export_collection(coll: GraphCollection, path, roster=None) -> None:
    """Write ``period,vessel_a,vessel_b,edge`` for every vessel pair plus a roster file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("period", "vessel_a", "vessel_b", "edge"))
        for g in coll.graphs:
            n = len(g.vessels)
            for a in range(n):
                for b in range(a + 1, n):
                    v = g.adj[a, b]
                    w.writerow((g.label, g.vessels[a], g.vessels[b], "NA" if np.isnan(v) else int(v)))
    with open(roster or roster_path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("period", "vessel_id"))
        for g in coll.graphs:
            for v in g.vessels:
                w.writerow((g.label, v))


def import_collection(path, roster=None, s: float = DEFAULT_THRESHOLD, q: float = DEFAULT_Q) -> GraphCollection:
    path = Path(path)
    roster = Path(roster) if roster else roster_path(path)
    order: list = []
    members: dict = {}
    with open(roster, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"period", "vessel_id"}:
            raise ValueError(f"{roster}: expected columns period,vessel_id")
        for line, row in enumerate(reader, start=2):
            if not row.get("period") or not row.get("vessel_id"):
                raise ValueError(f"{roster}:{line}: malformed row")
            if row["period"] not in members:
                order.append(row["period"])
                members[row["period"]] = []
            members[row["period"]].append(row["vessel_id"])
    graphs = {}
    for label in order:
        n = len(members[label])
        adj = np.full((n, n), np.nan)
        graphs[label] = (adj, {v: i for i, v in enumerate(members[label])})
    seen = {label: 0 for label in order}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != ["period", "vessel_a", "vessel_b", "edge"]:
            raise ValueError(f"{path}: expected header period,vessel_a,vessel_b,edge")
        for line, row in enumerate(reader, start=2):
            try:
                adj, pos = graphs[row["period"]]
                a, b = pos[row["vessel_a"]], pos[row["vessel_b"]]
                tok = row["edge"]
                val = np.nan if tok == "NA" else {"0": 0.0, "1": 1.0}[tok]
            except (KeyError, TypeError):
                raise ValueError(f"{path}:{line}: malformed row {row}") from None
            adj[a, b] = adj[b, a] = val
            seen[row["period"]] += 1
    for label in order:
        n = len(members[label])
        if seen[label] != n * (n - 1) // 2:
            raise ValueError(f"{path}: period {label} lists {seen[label]} pairs, expected {n * (n - 1) // 2}")
    return GraphCollection([ProximityGraph(label, members[label], graphs[label][0]) for label in order], s, q)
