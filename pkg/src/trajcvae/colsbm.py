"""Bernoulli stochastic block model shared across a collection of networks.

Every network gets its own soft memberships while the group proportions
``rho`` and connection probabilities ``alpha`` are common to the whole
collection. NA dyads (stored as NaN) drop out of the likelihood. Inference
is variational EM: Gauss-Seidel mean-field sweeps for the memberships,
closed-form updates for the parameters, so the variational bound never
decreases.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import xlogy
from sklearn.cluster import KMeans

from . import kernels

EPS_P = 1e-6


@dataclass
class SbmParams:
    rho: np.ndarray
    alpha: np.ndarray

    @property
    def R(self) -> int:
        return self.rho.size


@dataclass
class _Net:
    adj: np.ndarray  # 0/1, NA -> 0
    mask: np.ndarray  # 1 on observed off-diagonal dyads

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def n_dyads(self) -> int:
        return int(self.mask.sum()) // 2


@dataclass
class SbmFit:
    params: SbmParams
    tau: list
    bound: float
    criterion: float
    iterations: int
    seed: int
    history: list = field(default_factory=list)
    node_ids: list | None = None

    @property
    def R(self) -> int:
        return self.params.R

    def labels(self) -> list:
        return [t.argmax(axis=1) for t in self.tau]


def _prepare(adjs: Sequence[np.ndarray]) -> list[_Net]:
    nets = []
    for k, a in enumerate(adjs):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"network {k}: adjacency must be square, got {a.shape}")
        observed = ~np.isnan(a)
        np.fill_diagonal(observed, False)
        if not np.array_equal(observed, observed.T) or not np.allclose(np.where(observed, a, 0), np.where(observed, a, 0).T):
            raise ValueError(f"network {k}: adjacency must be symmetric")
        vals = a[observed]
        if vals.size and not np.all((vals == 0) | (vals == 1)):
            raise ValueError(f"network {k}: observed entries must be 0 or 1")
        nets.append(_Net(np.ascontiguousarray(np.where(observed, a, 0.0)), np.ascontiguousarray(observed.astype(np.float64))))
    return nets


def _as_nets(coll) -> list[_Net]:
    if coll and isinstance(coll[0], _Net):
        return list(coll)
    return _prepare(coll)


def counts(coll) -> tuple[int, int]:
    """(observed dyads, node instances) over the collection."""
    nets = _as_nets(coll)
    return sum(n.n_dyads for n in nets), sum(n.n for n in nets)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _block_counts(net: _Net, tau: np.ndarray):
    on = tau.T @ (net.adj * net.mask) @ tau
    tot = tau.T @ net.mask @ tau
    return on, tot


def complete_loglik(coll, tau: Sequence[np.ndarray], params: SbmParams) -> float:
    """Expected log p(A, W) under tau: membership prior plus observed-dyad terms."""
    nets = _as_nets(coll)
    la, l1a = np.log(params.alpha), np.log1p(-params.alpha)
    total = 0.0
    for net, t in zip(nets, tau):
        total += float(np.sum(xlogy(t, params.rho[None, :])))
        on, tot = _block_counts(net, t)
        # each dyad appears twice in the full-matrix sums
        total += 0.5 * float(np.sum(on * la + (tot - on) * l1a))
    return total


def bound(coll, tau: Sequence[np.ndarray], params: SbmParams) -> float:
    """Variational lower bound: expected complete log-likelihood plus entropy of tau."""
    entropy = -sum(float(np.sum(xlogy(t, t))) for t in tau)
    return complete_loglik(coll, tau, params) + entropy


def criterion(bound_value: float, R: int, n_dyads: int, n_nodes: int) -> float:
    """BIC-style penalty on the R(R+1)/2 connection and R-1 proportion parameters."""
    pen = 0.5 * (R * (R + 1) / 2) * math.log(max(n_dyads, 1)) + 0.5 * (R - 1) * math.log(max(n_nodes, 1))
    return bound_value - pen


# ---------------------------------------------------------------------------
# EM steps
# ---------------------------------------------------------------------------


def ve_step(coll, params: SbmParams, tau: Sequence[np.ndarray], sweeps: int = 1) -> list[np.ndarray]:
    """Mean-field update of every node's memberships, node by node."""
    nets = _as_nets(coll)
    with np.errstate(divide="ignore"):
        log_rho = np.log(params.rho)
    la = np.log(params.alpha)
    l1a = np.log1p(-params.alpha)
    out = []
    for net, t in zip(nets, tau):
        t = np.array(t, dtype=np.float64, order="C")
        if params.R == 1:
            out.append(np.ones_like(t))
            continue
        for _ in range(sweeps):
            kernels.ve_sweep(net.adj, net.mask, t, log_rho, la, l1a)
        if not np.all(np.isfinite(t)):
            raise FloatingPointError("non-finite membership update")
        out.append(t)
    return out


def m_step(coll, tau: Sequence[np.ndarray], eps_p: float = EPS_P) -> SbmParams:
    nets = _as_nets(coll)
    R = tau[0].shape[1]
    n_nodes = sum(t.shape[0] for t in tau)
    rho = sum(t.sum(axis=0) for t in tau) / n_nodes
    rho = rho / rho.sum()
    on = np.zeros((R, R))
    tot = np.zeros((R, R))
    for net, t in zip(nets, tau):
        o, a = _block_counts(net, t)
        on += o
        tot += a
    empty = tot <= 0
    if np.any(empty):
        warnings.warn(f"{int(empty.sum())} block pair(s) without observed dyads; alpha set to 0.5", RuntimeWarning)
    alpha = np.where(empty, 0.5, on / np.where(empty, 1.0, tot))
    alpha = np.clip(0.5 * (alpha + alpha.T), eps_p, 1.0 - eps_p)
    return SbmParams(rho, alpha)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _spectral(mat: np.ndarray, R: int, seed: int) -> np.ndarray:
    n = mat.shape[0]
    if R == 1 or n <= R:
        return np.arange(n) % R
    vals, vecs = np.linalg.eigh(mat)
    top = np.argsort(-np.abs(vals), kind="stable")[:R]
    emb = vecs[:, top] * np.abs(vals[top])
    km = KMeans(n_clusters=R, n_init=10, random_state=seed)
    return km.fit_predict(emb)


def _density(nets):
    d, o = counts(nets)
    edges = sum(float((n.adj * n.mask).sum()) / 2 for n in nets)
    return edges / d if d else 0.5


def _global_spectral(nets, node_ids, R, seed):
    roster = sorted({v for ids in node_ids for v in ids})
    pos = {v: i for i, v in enumerate(roster)}
    num = np.zeros((len(roster), len(roster)))
    den = np.zeros_like(num)
    for net, ids in zip(nets, node_ids):
        idx = np.array([pos[v] for v in ids])
        num[np.ix_(idx, idx)] += net.adj * net.mask
        den[np.ix_(idx, idx)] += net.mask
    mean = np.where(den > 0, num / np.where(den > 0, den, 1.0), _density(nets))
    np.fill_diagonal(mean, 0.0)
    lab = _spectral(mean, R, seed)
    return [lab[[pos[v] for v in ids]] for ids in node_ids]


def _hard_block_density(net, lab, R):
    t = np.eye(R)[lab]
    on, tot = _block_counts(net, t)
    return np.where(tot > 0, on / np.where(tot > 0, tot, 1.0), np.nan)


def _aligned_spectral(nets, R, seed):
    dens = _density(nets)
    labels = []
    for net in nets:
        imputed = np.where(net.mask > 0, net.adj, dens)
        np.fill_diagonal(imputed, 0.0)
        labels.append(_spectral(imputed, R, seed))
    if R > 6:
        return labels
    ref = int(np.argmax([n.n for n in nets]))
    ref_alpha = _hard_block_density(nets[ref], labels[ref], R)
    perms = list(itertools.permutations(range(R)))
    out = []
    for net, lab in zip(nets, labels):
        a = _hard_block_density(net, lab, R)
        best, best_cost = None, np.inf
        for p in perms:
            inv = np.argsort(p)
            cand = a[np.ix_(inv, inv)]
            diff = np.nan_to_num(cand - ref_alpha, nan=0.0)
            cost = float(np.sum(diff * diff))
            if cost < best_cost:
                best, best_cost = np.asarray(p), cost
        out.append(best[lab])
    return out


def _initial_taus(nets, R, n_init, seed, node_ids):
    rng = np.random.default_rng(seed)
    if node_ids is not None:
        base = _global_spectral(nets, node_ids, R, seed)
    else:
        base = _aligned_spectral(nets, R, seed)
    inits = [[np.eye(R)[lab] for lab in base]]
    for k in range(1, n_init):
        if k % 2 == 1:
            taus = []
            for lab in base:
                lab = lab.copy()
                flip = rng.random(lab.size) < 0.2
                lab[flip] = rng.integers(0, R, int(flip.sum()))
                taus.append(np.eye(R)[lab])
        else:
            taus = [rng.dirichlet(np.ones(R), size=net.n) for net in nets]
        inits.append(taus)
    return inits


# ---------------------------------------------------------------------------
# fitting and selection
# ---------------------------------------------------------------------------


def _run_em(nets, tau, max_iter, tol):
    params = m_step(nets, tau)
    history = [bound(nets, tau, params)]
    it = 0
    for it in range(1, max_iter + 1):
        tau = ve_step(nets, params, tau)
        params = m_step(nets, tau)
        history.append(bound(nets, tau, params))
        if history[-1] - history[-2] < tol:
            break
    return params, tau, history, it


def fit(coll, R: int, n_init: int = 5, seed: int = 0, node_ids=None, max_iter: int = 500,
        tol: float = 1e-6) -> SbmFit:
    """Best-bound variational EM fit over ``n_init`` initializations.

    ``node_ids`` (one list per network) is used only to build the spectral
    initialization from the mean adjacency of the collection.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    nets = _as_nets(coll)
    nets_used = [n for n in nets if n.n > 0]
    if not nets_used:
        raise ValueError("collection has no nodes")
    ids_used = None
    if node_ids is not None:
        ids_used = [list(ids) for ids, n in zip(node_ids, nets) if n.n > 0]
    n_dyads, n_nodes = counts(nets_used)
    best = None
    for tau0 in _initial_taus(nets_used, R, max(1, n_init) if R > 1 else 1, seed, ids_used):
        params, tau, history, it = _run_em(nets_used, tau0, max_iter, tol)
        if best is None or history[-1] > best[2][-1]:
            best = (params, tau, history, it)
    params, tau, history, it = best
    b = history[-1]
    return SbmFit(params, tau, b, criterion(b, R, n_dyads, n_nodes), it, seed, history, ids_used)


@dataclass
class Selection:
    best: SbmFit
    fits: dict  # R -> SbmFit

    def table(self):
        return [{"R": R, "bound": f.bound, "criterion": f.criterion, "iterations": f.iterations}
                for R, f in sorted(self.fits.items())]


def select_R(coll, R_range=range(1, 7), n_init: int = 5, seed: int = 0, node_ids=None, **kw) -> Selection:
    R_range = list(R_range)
    if not R_range:
        raise ValueError("empty R range")
    fits = {R: fit(coll, R, n_init, seed, node_ids, **kw) for R in R_range}
    best_R = max(R_range, key=lambda R: (fits[R].criterion, -R))
    return Selection(fits[best_R], fits)


@dataclass(frozen=True)
class PartitionComparison:
    joint_criterion: float
    split_criterion: float
    sub_criteria: tuple
    preferred: str  # "joint", "split" or "tie"


def compare_partitions(coll, partition: Sequence[Sequence[int]], R_range=range(1, 7), n_init: int = 5,
                       seed: int = 0, node_ids=None) -> PartitionComparison:
    """Joint fit of the collection against independent fits of its parts.

    ``partition`` lists network indices per sub-collection and must cover
    the collection exactly once.
    """
    nets = _as_nets(coll)
    flat = sorted(i for part in partition for i in part)
    if any(len(part) == 0 for part in partition):
        raise ValueError("empty sub-collection in partition")
    if flat != list(range(len(nets))):
        raise ValueError("partition must cover every network exactly once")
    joint = select_R(nets, R_range, n_init, seed, node_ids).best.criterion
    subs = []
    for part in partition:
        ids = None if node_ids is None else [node_ids[i] for i in part]
        subs.append(select_R([nets[i] for i in part], R_range, n_init, seed, ids).best.criterion)
    split = float(sum(subs))
    preferred = "tie" if split == joint else ("split" if split > joint else "joint")
    return PartitionComparison(joint, split, tuple(subs), preferred)


# ---------------------------------------------------------------------------
# evaluation and export
# ---------------------------------------------------------------------------


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index between two labelings of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"labelings must be 1-D and equally long, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        return float(np.sum(x * (x - 1) / 2))

    index = pairs(table)
    sa, sb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = sa * sb / (n * (n - 1) / 2)
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0 if index == expected else 0.0
    return (index - expected) / (max_index - expected)


def fit_to_json(fit_: SbmFit, labels=None, extra=None) -> str:
    """Serialize a fit; ``labels`` names the networks (periods)."""
    labels = labels or [str(i) for i in range(len(fit_.tau))]
    tau = []
    for k, t in enumerate(fit_.tau):
        ids = fit_.node_ids[k] if fit_.node_ids is not None else [str(i) for i in range(t.shape[0])]
        tau.append({"period": labels[k], "nodes": {str(v): [float(x) for x in row] for v, row in zip(ids, t)}})
    doc = {
        "R": fit_.R,
        "rho": fit_.params.rho.tolist(),
        "alpha": fit_.params.alpha.tolist(),
        "criterion": fit_.criterion,
        "bound": fit_.bound,
        "iterations": fit_.iterations,
        "seed": fit_.seed,
        "tau": tau,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)
