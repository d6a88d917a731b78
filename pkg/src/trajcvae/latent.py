"""Bhattacharyya overlap between latent Gaussians and behavioural stability indices."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .kernels import PAIRS_ADJACENT_DAYS, PAIRS_DISTINCT_DAYS, PAIRS_SAME_DAY

DEFAULT_THRESHOLD = 0.8
FLEET = "__fleet__"

GSI = "GSI"
DSI = "DSI"
DSI_SAME_DAY = "DSI_same_day"
_KIND_MODE = {GSI: PAIRS_DISTINCT_DAYS, DSI: PAIRS_ADJACENT_DAYS, DSI_SAME_DAY: PAIRS_SAME_DAY}


@dataclass(frozen=True)
class LatentGaussian:
    """Diagonal Gaussian posterior: mean ``mu`` and per-dimension variance ``var``."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        var = np.array(self.var, dtype=np.float64).reshape(-1)
        if mu.shape != var.shape:
            raise ValueError(f"mu has {mu.size} dims but var has {var.size}")
        if not (np.all(np.isfinite(var)) and np.all(var > 0)):
            raise ValueError(f"variances must be positive and finite, got {var}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("non-finite mean")
        mu.flags.writeable = False
        var.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mu.size


def bc_factors(mu_p, var_p, mu_q, var_q) -> np.ndarray:
    """Per-dimension BC factors; their product over the last axis is the BC."""
    tot = np.asarray(var_p) + np.asarray(var_q)
    diff = np.asarray(mu_p) - np.asarray(mu_q)
    return np.sqrt(2.0 * np.sqrt(np.asarray(var_p) * np.asarray(var_q)) / tot) * np.exp(-0.25 * diff * diff / tot)


def bc_pair(p: LatentGaussian, q: LatentGaussian) -> float:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return float(np.prod(bc_factors(p.mu, p.var, q.mu, q.var)))


def hellinger(p: LatentGaussian, q: LatentGaussian) -> float:
    return float(np.sqrt(max(0.0, 1.0 - bc_pair(p, q))))


@dataclass
class EmbeddingStore:
    """(vessel_id, date) -> latent Gaussian, held as parallel arrays."""

    vessel_ids: list
    dates: list
    mu: np.ndarray
    var: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.vessel_ids = list(self.vessel_ids)
        self.dates = list(self.dates)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        n = len(self.vessel_ids)
        if len(self.dates) != n or self.mu.shape[0] != n or self.var.shape != self.mu.shape:
            raise ValueError("vessel_ids, dates, mu and var must have matching lengths")
        if not np.all(self.var > 0):
            raise ValueError("all variances must be positive")
        self._index = {}
        for i, key in enumerate(zip(self.vessel_ids, self.dates)):
            if key in self._index:
                raise ValueError(f"duplicate embedding for vessel {key[0]} on {key[1]}")
            self._index[key] = i

    def __len__(self):
        return len(self.vessel_ids)

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def __contains__(self, key):
        return key in self._index

    def index(self, vessel_id, date) -> int:
        try:
            return self._index[(vessel_id, date)]
        except KeyError:
            raise KeyError(f"no embedding for vessel {vessel_id!r} on {date}") from None

    def get(self, vessel_id, date) -> LatentGaussian:
        i = self.index(vessel_id, date)
        return LatentGaussian(self.mu[i], self.var[i])

    def vessels(self) -> list:
        return sorted(set(self.vessel_ids))

    def rows_for(self, vessel_id) -> np.ndarray:
        """Row indices of one vessel sorted by date."""
        rows = [i for i, v in enumerate(self.vessel_ids) if v == vessel_id]
        return np.array(sorted(rows, key=lambda i: self.dates[i]), dtype=np.int64)

    def day_numbers(self, rows) -> np.ndarray:
        return np.array([self.dates[i].toordinal() for i in rows], dtype=np.int64)


def bc_series(store: EmbeddingStore, pairs: Sequence) -> np.ndarray:
    """BC for each ((vessel, date), (vessel', date')) pair."""
    ia = np.array([store.index(*a) for a, _ in pairs], dtype=np.int64)
    ib = np.array([store.index(*b) for _, b in pairs], dtype=np.int64)
    if ia.size == 0:
        return np.zeros(0)
    return kernels.bc_rows(store.mu[ia], store.var[ia], store.mu[ib], store.var[ib])


# ---------------------------------------------------------------------------
# stability indices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityValue:
    value: float | None
    pair_count: int
    hits: int


def _check_threshold(s):
    if not 0.0 < s <= 1.0:
        raise ValueError(f"threshold s={s} outside (0, 1]")


def stability_index(store: EmbeddingStore, vessel_id, kind: str = GSI, s: float = DEFAULT_THRESHOLD) -> StabilityValue:
    """Share of a vessel's day pairs whose BC reaches ``s``.

    ``GSI`` uses all distinct observed day pairs, ``DSI`` calendar-consecutive
    observed days. ``value`` is ``None`` when no pair is available.
    """
    _check_threshold(s)
    if kind not in (GSI, DSI):
        raise ValueError(f"unknown index kind {kind!r}")
    rows = store.rows_for(vessel_id)
    days = store.day_numbers(rows)
    mu, var = store.mu[rows], store.var[rows]
    hits, total = kernels.bc_exceed_count(mu, var, days, mu, var, days, s, _KIND_MODE[kind], True)
    return StabilityValue(hits / total if total else None, total, hits)


def fleet_stability(store: EmbeddingStore, kind: str = GSI, s: float = DEFAULT_THRESHOLD) -> StabilityValue:
    """Pooled share over unordered vessel pairs and their day pairs of ``kind``.

    For ``DSI`` a pair (b, b') contributes both (b at t, b' at t+1) and
    (b at t+1, b' at t), which is the ordered-pair sum folded by symmetry.
    ``DSI_same_day`` compares the two vessels on common days instead.
    """
    _check_threshold(s)
    if kind not in _KIND_MODE:
        raise ValueError(f"unknown index kind {kind!r}")
    vessels = store.vessels()
    if len(vessels) < 2:
        return StabilityValue(None, 0, 0)
    per = []
    for v in vessels:
        rows = store.rows_for(v)
        per.append((store.mu[rows], store.var[rows], store.day_numbers(rows)))
    hits = total = 0
    for a in range(len(vessels)):
        for b in range(a + 1, len(vessels)):
            mu_a, var_a, d_a = per[a]
            mu_b, var_b, d_b = per[b]
            h, t = kernels.bc_exceed_count(mu_a, var_a, d_a, mu_b, var_b, d_b, s, _KIND_MODE[kind], False)
            hits += h
            total += t
    return StabilityValue(hits / total if total else None, total, hits)


@dataclass
class StabilityReport:
    threshold: float
    per_vessel: dict  # vessel -> {kind: StabilityValue}
    fleet: dict  # kind -> StabilityValue

    def rows(self):
        for v in sorted(self.per_vessel):
            for kind, val in self.per_vessel[v].items():
                yield v, kind, val
        for kind, val in self.fleet.items():
            yield FLEET, kind, val


def stability_report(store: EmbeddingStore, s: float = DEFAULT_THRESHOLD) -> StabilityReport:
    per_vessel = {v: {k: stability_index(store, v, k, s) for k in (GSI, DSI)} for v in store.vessels()}
    fleet = {k: fleet_stability(store, k, s) for k in (GSI, DSI, DSI_SAME_DAY)}
    return StabilityReport(s, per_vessel, fleet)


def _fmt(x) -> str:
    return "NA" if x is None else repr(float(x))


def export_stability(report: StabilityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("vessel_id", "index_kind", "value", "pair_count", "threshold"))
        for v, kind, val in report.rows():
            w.writerow((v, kind, _fmt(val.value), val.pair_count, repr(float(report.threshold))))


def read_stability(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# embeddings and BC exports
# ---------------------------------------------------------------------------


def export_embeddings(store: EmbeddingStore, path) -> None:
    d = store.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vessel_id", "date"] + [f"mu_{k + 1}" for k in range(d)] + [f"var_{k + 1}" for k in range(d)])
        for i in range(len(store)):
            w.writerow([store.vessel_ids[i], store.dates[i].isoformat()]
                       + [repr(float(x)) for x in store.mu[i]] + [repr(float(x)) for x in store.var[i]])


def read_embeddings(path) -> EmbeddingStore:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["vessel_id", "date"]:
            raise ValueError(f"{path}: expected header starting with vessel_id,date")
        mu_cols = [i for i, h in enumerate(header) if h.startswith("mu_")]
        var_cols = [i for i, h in enumerate(header) if h.startswith("var_")]
        if not mu_cols or len(mu_cols) != len(var_cols):
            raise ValueError(f"{path}: need matching mu_k and var_k columns")
        vids, dates, mus, vars_ = [], [], [], []
        for line, row in enumerate(reader, start=2):
            try:
                vids.append(row[0])
                dates.append(dt.date.fromisoformat(row[1]))
                mus.append([float(row[i]) for i in mu_cols])
                vars_.append([float(row[i]) for i in var_cols])
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: malformed row: {exc}") from None
    d = len(mu_cols)
    return EmbeddingStore(vids, dates, np.array(mus).reshape(-1, d), np.array(vars_).reshape(-1, d))


def export_bc_long(store: EmbeddingStore, path, pairs: Iterable) -> None:
    """Long-form BC table ``b,t,b_prime,t_prime,bc`` for the given pairs."""
    pairs = list(pairs)
    vals = bc_series(store, pairs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("b", "t", "b_prime", "t_prime", "bc"))
        for ((b, t), (bp, tp)), v in zip(pairs, vals):
            w.writerow((b, t.isoformat(), bp, tp.isoformat(), repr(float(v))))


def default_bc_pairs(store: EmbeddingStore):
    """Consecutive-day pairs within each vessel, then same-day pairs across vessels."""
    by_vessel = {v: store.rows_for(v) for v in store.vessels()}
    for v, rows in by_vessel.items():
        for i, j in zip(rows[:-1], rows[1:]):
            if (store.dates[j] - store.dates[i]).days == 1:
                yield (v, store.dates[i]), (v, store.dates[j])
    by_day: dict = {}
    for i in range(len(store)):
        by_day.setdefault(store.dates[i], []).append(store.vessel_ids[i])
    for day in sorted(by_day):
        vs = sorted(by_day[day])
        for a in range(len(vs)):
            for b in range(a + 1, len(vs)):
                yield (vs[a], day), (vs[b], day)
