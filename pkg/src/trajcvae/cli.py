"""Command-line pipeline: synth/ingest -> train -> embed -> bc -> stability -> graphs -> sbm -> grid.

Every command reads its inputs from, and writes its outputs to, the run
directory (``--out``). A JSON config describes the data source, model,
thresholds, period scheme and SBM search; one global seed drives every
random stream.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__, colsbm, cvae, latent, proximity, trajdata
from ._accel import backend

log = logging.getLogger("trajcvae")

# artifact file names, keyed by the command that produces them
ARTIFACTS = {
    "synth": ("fleet.csv", "labels.csv"),
    "train": ("model.json", "trace.csv"),
    "embed": ("embeddings.csv", "dims.csv"),
    "bc": ("bc_pairs.csv", "bc_hist.csv"),
    "stability": ("stability.csv", "stability_scatter.csv"),
    "graphs": ("graphs.csv", "graphs_roster.csv"),
    "sbm": ("sbm_fit.json", "sbm_criteria.csv", "membership.csv", "membership_summary.csv"),
    "grid": ("grid.csv",),
    "sweep": ("sweep.csv",),
}
PIPELINE = ("synth", "train", "embed", "bc", "stability", "graphs", "sbm", "grid")
BC_BINS = 20


class CliError(Exception):
    pass


@dataclasses.dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    data_csv: str | None = None
    synth: dict | None = None
    harbour: tuple | None = None
    model: dict = dataclasses.field(default_factory=dict)
    s: float = latent.DEFAULT_THRESHOLD
    q: float = proximity.DEFAULT_Q
    periods: str = "quarter"
    sbm_R: tuple = (1, 6)
    sbm_n_init: int = 5
    grid: dict = dataclasses.field(default_factory=dict)
    sweep_dz: tuple = (2, 3, 4, 5)
    log_every: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        if "seed" not in doc:
            raise CliError("config must set a global 'seed'")
        data = doc.pop("data", {}) or {}
        sbm = doc.pop("sbm", {}) or {}
        cfg = cls(
            seed=int(doc.pop("seed")),
            out=str(doc.pop("out", "run")),
            data_csv=data.get("csv"),
            synth=data.get("synth"),
            harbour=tuple(data["harbour"]) if data.get("harbour") is not None else None,
            model=dict(doc.pop("model", {}) or {}),
            s=float(doc.pop("s", latent.DEFAULT_THRESHOLD)),
            q=float(doc.pop("q", proximity.DEFAULT_Q)),
            periods=str(doc.pop("periods", "quarter")),
            sbm_R=(int(sbm.get("R_min", 1)), int(sbm.get("R_max", 6))),
            sbm_n_init=int(sbm.get("n_init", 5)),
            grid=dict(doc.pop("grid", {}) or {}),
            sweep_dz=tuple(int(v) for v in doc.pop("sweep_dz", (2, 3, 4, 5))),
            log_every=int(doc.pop("log_every", 0)),
        )
        if doc:
            raise CliError(f"unknown config key(s): {', '.join(sorted(doc))}")
        cfg.validate()
        return cfg

    def validate(self):
        if self.data_csv is None and self.synth is None:
            self.synth = {}
        if self.data_csv is not None and self.synth is not None:
            raise CliError("config data must name either 'csv' or 'synth', not both")
        if self.data_csv is not None and not Path(self.data_csv).is_file():
            raise CliError(f"data csv {self.data_csv} not found")
        if self.periods not in proximity.PERIOD_SCHEMES:
            raise CliError(f"unknown period scheme {self.periods!r}; choose from {sorted(proximity.PERIOD_SCHEMES)}")
        if not 0.0 < self.s <= 1.0 or not 0.0 < self.q <= 1.0:
            raise CliError("s and q must lie in (0, 1]")
        lo, hi = self.sbm_R
        if lo < 1 or hi < lo:
            raise CliError(f"invalid SBM range {self.sbm_R}")
        try:
            self.model_config().validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid model config: {exc}") from None

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["sbm_R"] = list(self.sbm_R)
        d["sweep_dz"] = list(self.sweep_dz)
        d["harbour"] = None if self.harbour is None else list(self.harbour)
        return d

    def model_config(self) -> cvae.ModelConfig:
        known = {f.name for f in dataclasses.fields(cvae.ModelConfig)}
        extra = set(self.model) - known
        if extra:
            raise CliError(f"unknown model key(s): {', '.join(sorted(extra))}")
        m = {k: v for k, v in self.model.items() if k != "seed"}
        return cvae.ModelConfig.from_dict({**m, "seed": self.seed})

    def synth_config(self) -> trajdata.SynthConfig:
        d = dict(self.synth or {})
        d.pop("seed", None)
        if "start_date" in d:
            d["start_date"] = dt.date.fromisoformat(d["start_date"])
        for key in ("directions", "distances", "harbour"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        if "harbour" not in d and self.harbour is not None:
            d["harbour"] = tuple(self.harbour)
        try:
            return trajdata.SynthConfig(**d, seed=self.seed)
        except TypeError as exc:
            raise CliError(f"invalid synth config: {exc}") from None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _path(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _require(cfg: PipelineConfig, name: str, producer: str) -> Path:
    p = _path(cfg, name)
    if not p.is_file():
        raise CliError(f"missing artifact {p}; run `trajcvae {producer}` first")
    return p


def _f(x) -> str:
    return repr(float(x))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _harbour(cfg: PipelineConfig):
    if cfg.harbour is not None:
        return np.asarray(cfg.harbour, dtype=np.float64)
    if cfg.data_csv is None:
        return np.asarray(cfg.synth_config().harbour, dtype=np.float64)
    return None


def _load_raw(cfg: PipelineConfig) -> trajdata.FleetDataset:
    H = cfg.model_config().H
    if cfg.data_csv is not None:
        return trajdata.ingest_csv(cfg.data_csv, H=H, harbour=_harbour(cfg))
    return trajdata.ingest_csv(_require(cfg, "fleet.csv", "synth"), H=H, harbour=_harbour(cfg))


def _load_store(cfg: PipelineConfig) -> latent.EmbeddingStore:
    return latent.read_embeddings(_require(cfg, "embeddings.csv", "embed"))


def _labels(cfg: PipelineConfig):
    p = _path(cfg, "labels.csv")
    return trajdata.read_labels(p) if cfg.data_csv is None and p.is_file() else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig) -> None:
    if cfg.data_csv is not None:
        raise CliError("config uses a csv data source; `synth` needs a 'synth' data block")
    data, labels = trajdata.synth_fleet(cfg.synth_config())
    trajdata.export_csv(data, _path(cfg, "fleet.csv"))
    trajdata.export_labels(labels, _path(cfg, "labels.csv"))
    log.info("synth: %d trajectories for %d vessels", len(data), len(labels))


def cmd_train(cfg: PipelineConfig) -> None:
    raw = _load_raw(cfg)
    data, stats = trajdata.normalize(raw)
    mcfg = cfg.model_config()
    try:
        model, trace, adam = cvae.train(data, mcfg, log_every=cfg.log_every, logger=log)
    except cvae.TrainingDiverged as exc:
        exc.trace.to_csv(_path(cfg, "trace.csv"))
        raise CliError(str(exc)) from None
    cvae.save_model(_path(cfg, "model.json"), model, stats, raw.harbour, adam)
    trace.to_csv(_path(cfg, "trace.csv"))
    if len(trace):
        log.info("train: %d epochs, final loss %.5f", len(trace), trace.loss[-1])


def cmd_embed(cfg: PipelineConfig) -> None:
    model, stats, _, _ = cvae.load_model(_require(cfg, "model.json", "train"))
    data = trajdata.apply_norm(_load_raw(cfg), stats)
    mu, var = cvae.embed(model, data)
    store = latent.EmbeddingStore(data.vessel_ids, data.dates, mu, var)
    latent.export_embeddings(store, _path(cfg, "embeddings.csv"))
    rows = []
    if len(store) >= 2:
        diag = cvae.dim_diagnostics(mu, var, seed=cfg.seed)
        for r in diag.summary():
            rows.append((r["dim"], r["rank"]) + tuple(_f(r[k]) for k in
                        ("bc_q1", "bc_median", "bc_q3", "kl_q1", "kl_median", "kl_q3")))
    _write_rows(_path(cfg, "dims.csv"),
                ("dim", "rank", "bc_q1", "bc_median", "bc_q3", "kl_q1", "kl_median", "kl_q3"), rows)
    log.info("embed: %d embeddings, d_z=%d", len(store), store.dim)


def cmd_bc(cfg: PipelineConfig) -> None:
    store = _load_store(cfg)
    pairs = list(latent.default_bc_pairs(store))
    latent.export_bc_long(store, _path(cfg, "bc_pairs.csv"), pairs)
    vals = latent.bc_series(store, pairs)
    kinds = np.array(["within_vessel" if a[0] == b[0] else "same_day" for a, b in pairs])
    edges = np.linspace(0.0, 1.0, BC_BINS + 1)
    rows = []
    for kind in ("within_vessel", "same_day"):
        sel = vals[kinds == kind] if vals.size else vals
        counts, _ = np.histogram(sel, bins=edges)
        rows += [(kind, _f(edges[i]), _f(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    _write_rows(_path(cfg, "bc_hist.csv"), ("kind", "bin_lo", "bin_hi", "count"), rows)
    log.info("bc: %d pairs", len(pairs))


def cmd_stability(cfg: PipelineConfig) -> None:
    store = _load_store(cfg)
    report = latent.stability_report(store, cfg.s)
    latent.export_stability(report, _path(cfg, "stability.csv"))
    labels = _labels(cfg) or {}
    rows = []
    for v in sorted(report.per_vessel):
        g, d = report.per_vessel[v][latent.GSI], report.per_vessel[v][latent.DSI]
        rows.append((v, latent._fmt(g.value), latent._fmt(d.value), labels.get(v, "NA")))
    _write_rows(_path(cfg, "stability_scatter.csv"), ("vessel_id", "GSI", "DSI", "planted_group"), rows)
    fleet = report.fleet
    log.info("stability: fleet GSI=%s DSI=%s", fleet[latent.GSI].value, fleet[latent.DSI].value)


def cmd_graphs(cfg: PipelineConfig) -> None:
    store = _load_store(cfg)
    if len(store) == 0:
        raise CliError("no embeddings to build graphs from")
    periods = proximity.PERIOD_SCHEMES[cfg.periods](store.dates)
    coll = proximity.build_collection(store, periods, cfg.s, cfg.q)
    proximity.export_collection(coll, _path(cfg, "graphs.csv"), _path(cfg, "graphs_roster.csv"))
    log.info("graphs: %d periods (s=%s, q=%s)", len(coll), cfg.s, cfg.q)


def _membership_rows(fit: colsbm.SbmFit, labels):
    rows = []
    for label, ids, tau in zip(labels, fit.node_ids, fit.tau):
        for v, t in zip(ids, tau):
            g = int(np.argmax(t))
            rows.append((v, label, g, float(t[g])))
    return rows


def majority_groups(membership_rows, R: int) -> dict:
    """Most frequent MAP group per vessel; ties go to the larger summed probability, then the lower index."""
    per: dict = {}
    for v, _, g, p in membership_rows:
        cnt, mass = per.setdefault(v, (np.zeros(R), np.zeros(R)))
        cnt[g] += 1
        mass[g] += p
    out = {}
    for v, (cnt, mass) in per.items():
        out[v] = min(range(R), key=lambda r: (-cnt[r], -mass[r], r))
    return out


def cmd_sbm(cfg: PipelineConfig) -> None:
    coll = proximity.import_collection(_require(cfg, "graphs.csv", "graphs"), _path(cfg, "graphs_roster.csv"),
                                       cfg.s, cfg.q)
    graphs = [g for g in coll.graphs if len(g.vessels) > 0]
    if not graphs:
        raise CliError("graph collection is empty")
    adjs = [g.adj for g in graphs]
    ids = [list(g.vessels) for g in graphs]
    labels = [g.label for g in graphs]
    lo, hi = cfg.sbm_R
    sel = colsbm.select_R(adjs, range(lo, hi + 1), cfg.sbm_n_init, cfg.seed, ids)
    best = sel.best
    extra = {"s": cfg.s, "q": cfg.q, "periods": labels}
    _path(cfg, "sbm_fit.json").write_text(colsbm.fit_to_json(best, labels, extra) + "\n")
    _write_rows(_path(cfg, "sbm_criteria.csv"), ("R", "bound", "criterion", "iterations"),
                [(r["R"], _f(r["bound"]), _f(r["criterion"]), r["iterations"]) for r in sel.table()])
    rows = _membership_rows(best, labels)
    _write_rows(_path(cfg, "membership.csv"), ("vessel_id", "period", "group", "probability"),
                [(v, p, g, _f(pr)) for v, p, g, pr in rows])
    maj = majority_groups(rows, best.R)
    counts = Counter()
    n_periods = Counter()
    for v, _, g, _ in rows:
        counts[(v, g)] += 1
        n_periods[v] += 1
    summary = []
    for v in sorted(n_periods):
        summary.append((v, n_periods[v], maj[v]) + tuple(_f(counts[(v, r)] / n_periods[v]) for r in range(best.R)))
    _write_rows(_path(cfg, "membership_summary.csv"),
                ("vessel_id", "n_periods", "majority_group") + tuple(f"prop_{r}" for r in range(best.R)), summary)
    log.info("sbm: selected R=%d (criterion %.3f)", best.R, best.criterion)


def cmd_grid(cfg: PipelineConfig) -> None:
    model, stats, harbour, _ = cvae.load_model(_require(cfg, "model.json", "train"))
    if not model.cfg.conditional or model.cfg.d_z < 2:
        raise CliError("grid needs a conditional model with d_z >= 2")
    g = cfg.grid
    rows = cvae.decode_grid(model, stats, harbour, n_z1=int(g.get("n_z1", 17)), n_z2=int(g.get("n_z2", 21)),
                            z1_range=tuple(g.get("z1_range", cvae.GRID_Z1)),
                            z2_range=tuple(g.get("z2_range", cvae.GRID_Z2)))
    cvae.export_grid(rows, _path(cfg, "grid.csv"))
    log.info("grid: %d decoded points", len(rows))


def cmd_sweep(cfg: PipelineConfig) -> None:
    data, _ = trajdata.normalize(_load_raw(cfg))
    traces = cvae.dim_sweep(data, cfg.sweep_dz, cfg.model_config())
    cvae.export_sweep(traces, _path(cfg, "sweep.csv"))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "bc": cmd_bc,
    "stability": cmd_stability,
    "graphs": cmd_graphs,
    "sbm": cmd_sbm,
    "grid": cmd_grid,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# pipeline and manifest
# ---------------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def recovery_ari(cfg: PipelineConfig):
    """ARI between per-vessel majority SBM groups and planted labels, when both exist."""
    labels = _labels(cfg)
    summary = _path(cfg, "membership_summary.csv")
    if not labels or not summary.is_file():
        return None
    with open(summary, newline="") as fh:
        maj = {r["vessel_id"]: int(r["majority_group"]) for r in csv.DictReader(fh)}
    common = sorted(set(maj) & set(labels))
    if len(common) < 2:
        return None
    return colsbm.ari([maj[v] for v in common], [labels[v] for v in common])


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_manifest(cfg: PipelineConfig, stages, timings: dict) -> Path:
    artifacts = {}
    for stage in stages:
        for name in ARTIFACTS[stage]:
            p = _path(cfg, name)
            if p.is_file():
                artifacts[name] = sha256(p)
    doc = {
        "config": cfg.snapshot(),
        "artifacts": artifacts,
        "versions": _versions(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "recovery_ari": recovery_ari(cfg),
    }
    path = _path(cfg, "manifest.json")
    _atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _versions() -> dict:
    import scipy
    import sklearn

    out = {"trajcvae": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "scikit-learn": sklearn.__version__, "backend": backend()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


def run_pipeline(cfg: PipelineConfig) -> dict:
    stages = [s for s in PIPELINE if not (s == "synth" and cfg.data_csv is not None)]
    mcfg = cfg.model_config()
    if not mcfg.conditional or mcfg.d_z < 2:
        stages.remove("grid")
        log.info("pipeline: skipping grid (needs a conditional model with d_z >= 2)")
    timings = {}
    for stage in stages:
        t0 = time.perf_counter()
        COMMANDS[stage](cfg)
        timings[stage] = time.perf_counter() - t0
    write_manifest(cfg, stages, timings)
    return timings


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajcvae", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(list(COMMANDS) + ["pipeline"]))
    p.add_argument("--config", type=Path, help="JSON pipeline config")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--s", type=float, help="BC threshold")
    p.add_argument("--q", type=float, help="share of common days needed for an edge")
    p.add_argument("--dz", type=int, help="latent dimension")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> PipelineConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CliError(f"config {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config}: invalid JSON ({exc})") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    doc.setdefault("seed", 0)
    if args.out is not None:
        doc["out"] = args.out
    if args.s is not None:
        doc["s"] = args.s
    if args.q is not None:
        doc["q"] = args.q
    model = dict(doc.get("model") or {})
    if args.dz is not None:
        model["d_z"] = args.dz
    if args.epochs is not None:
        model["epochs"] = args.epochs
    doc["model"] = model
    return PipelineConfig.from_dict(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            run_pipeline(cfg)
        else:
            COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"trajcvae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"trajcvae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
