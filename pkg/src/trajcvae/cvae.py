"""Convolutional (conditional) VAE for synchronized daily trajectories.

Trajectories enter as ``(N, H, D)`` arrays of normalized positions and the
seasonal covariates as ``(N, 2)``. In the conditional model the covariates
are replicated along the time axis and stacked as extra channels, for the
encoder input and for the decoder input alike.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .latent import LatentGaussian, bc_factors
from .nncore import (
    AdamState,
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    LeakyReLU,
    ReLU,
    Sequential,
    ShapeError,
    adam_step,
    gaussian_sampler,
    load_checkpoint,
    save_checkpoint,
)
from .trajdata import FleetDataset, NormStats, encode_covariate, traj_features

COVARIATE_DIM = 2
LOGVAR_MIN = math.log(1e-8)
LOGVAR_MAX = math.log(1e4)
GRID_Z1 = (-2.0, 1.2)
GRID_Z2 = (-2.0, 2.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage under one global seed."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


@dataclass(frozen=True)
class Architecture:
    """Length bookkeeping for the encoder/decoder stacks.

    The default trace is 24 -> 12 -> 6 -> 2 -> 1 for the encoder and
    4 -> 3 -> 10 -> 23 -> 24 for the decoder.
    """

    encoder_pads: tuple = (1, 1, 0, 0)
    decoder_in_len: int = 4
    decoder_out_pads: tuple = (1, 1, 0)


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 3
    conditional: bool = True
    sigma2: float = 1.0
    H: int = 24
    D: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 1000
    seed: int = 0
    init: str = "uniform"
    arch: Architecture | None = None

    def validate(self):
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")
        if self.init not in ("uniform", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.H != 24 and self.arch is None:
            raise ValueError(f"the default layer trace is built for H=24; H={self.H} needs an explicit arch override")

    @property
    def covariate_channels(self) -> int:
        return COVARIATE_DIM if self.conditional else 0

    def to_dict(self):
        d = asdict(self)
        d["arch"] = None if self.arch is None else asdict(self.arch)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("arch") is not None:
            a = d["arch"]
            d["arch"] = Architecture(tuple(a["encoder_pads"]), a["decoder_in_len"], tuple(a["decoder_out_pads"]))
        return cls(**d)


class CVAE:
    """Encoder h(y, x) -> (mu, log var) and decoder g(z, x) -> trajectory mean."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        arch = cfg.arch or Architecture()
        self.arch = arch
        rng = substream(cfg.seed, "init")
        c_in = cfg.D + cfg.covariate_channels
        ep = arch.encoder_pads
        self.encoder = Sequential([
            Conv1d(c_in, 8, 4, 2, ep[0], rng), BatchNorm1d(8), LeakyReLU(0.2),
            Conv1d(8, 32, 4, 2, ep[1], rng), BatchNorm1d(32), LeakyReLU(0.2),
            Conv1d(32, 128, 3, 2, ep[2], rng), BatchNorm1d(128), LeakyReLU(0.2),
            Conv1d(128, 2 * cfg.d_z, 2, 1, ep[3], rng),
        ])
        op = arch.decoder_out_pads
        self.decoder = Sequential([
            Conv1d(cfg.d_z + cfg.covariate_channels, 20, 2, 1, 0, rng), BatchNorm1d(20), LeakyReLU(0.2),
            ConvTranspose1d(20, 10, 5, 2, op[0], rng=rng), BatchNorm1d(10), ReLU(),
            ConvTranspose1d(10, 5, 4, 2, op[1], rng=rng), BatchNorm1d(5), ReLU(),
            ConvTranspose1d(5, cfg.D, 2, 1, op[2], rng=rng),
        ])
        if self.encoder.output_length(cfg.H) != 1:
            raise ShapeError(f"encoder trace ends at length {self.encoder.output_length(cfg.H)}, expected 1")
        if self.decoder.output_length(arch.decoder_in_len) != cfg.H:
            raise ShapeError(f"decoder trace ends at length {self.decoder.output_length(arch.decoder_in_len)}, "
                             f"expected H={cfg.H}")
        if cfg.init == "zeros":
            for p in self.params().values():
                p[...] = 0.0

    # -- parameter access ---------------------------------------------------

    def params(self) -> dict:
        return {**self.encoder.named_params("enc."), **self.decoder.named_params("dec.")}

    def grads(self) -> dict:
        return {**self.encoder.named_grads("enc."), **self.decoder.named_grads("dec.")}

    def buffers(self) -> dict:
        return {**self.encoder.named_buffers("enc."), **self.decoder.named_buffers("dec.")}

    def state(self) -> dict:
        return {**self.params(), **self.buffers()}

    def load_state(self, tensors: dict) -> None:
        for name, arr in self.state().items():
            if name not in tensors:
                raise KeyError(f"checkpoint lacks tensor {name}")
            if tensors[name].shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} != model shape {arr.shape}")
            arr[...] = tensors[name]

    def trace(self, batch: int = 1) -> dict:
        """Shapes after every conv layer for a dummy forward pass."""
        out = {"encoder": [], "decoder": []}
        x = np.zeros((batch, self.cfg.D + self.cfg.covariate_channels, self.cfg.H))
        out["encoder"].append(x.shape)
        for layer in self.encoder.layers:
            x = layer.forward(x, train=False)
            layer._cache = None
            if isinstance(layer, (Conv1d, ConvTranspose1d)):
                out["encoder"].append(x.shape)
        x = np.zeros((batch, self.cfg.d_z + self.cfg.covariate_channels, self.arch.decoder_in_len))
        out["decoder"].append(x.shape)
        for layer in self.decoder.layers:
            x = layer.forward(x, train=False)
            layer._cache = None
            if isinstance(layer, (Conv1d, ConvTranspose1d)):
                out["decoder"].append(x.shape)
        return out

    # -- input assembly -------------------------------------------------------

    def _encoder_input(self, y, x):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 3 or y.shape[1:] != (self.cfg.H, self.cfg.D):
            raise ShapeError(f"expected trajectories of shape (N, {self.cfg.H}, {self.cfg.D}), got {y.shape}")
        inp = y.transpose(0, 2, 1)
        if self.cfg.conditional:
            cov = np.repeat(np.asarray(x, dtype=np.float64)[:, :, None], self.cfg.H, axis=2)
            inp = np.concatenate([inp, cov], axis=1)
        return np.ascontiguousarray(inp)

    def _decoder_input(self, z, x):
        z = np.asarray(z, dtype=np.float64)
        parts = [z]
        if self.cfg.conditional:
            parts.append(np.asarray(x, dtype=np.float64))
        flat = np.concatenate(parts, axis=1)
        return np.ascontiguousarray(np.repeat(flat[:, :, None], self.arch.decoder_in_len, axis=2))

    # -- inference ----------------------------------------------------------

    def encode_arrays(self, y, x=None) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode posterior means and variances, each of shape (N, d_z)."""
        h = self.encoder.forward(self._encoder_input(y, x), train=False)
        _drop_caches(self.encoder)
        d = self.cfg.d_z
        mu = h[:, :d, 0]
        logvar = np.clip(h[:, d:, 0], LOGVAR_MIN, LOGVAR_MAX)
        var = np.exp(logvar)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise FloatingPointError("non-finite encoder output")
        return mu, var

    def encode(self, y, x=None) -> LatentGaussian:
        """Posterior of a single (H, D) trajectory."""
        mu, var = self.encode_arrays(np.asarray(y)[None], None if x is None else np.asarray(x)[None])
        return LatentGaussian(mu[0], var[0])

    def decode(self, z, x=None) -> np.ndarray:
        """Eval-mode decoder mean; (N, d_z) -> (N, H, D), or (d_z,) -> (H, D)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
            x = None if x is None else np.asarray(x)[None]
        out = self.decoder.forward(self._decoder_input(z, x), train=False)
        _drop_caches(self.decoder)
        out = out.transpose(0, 2, 1)
        return out[0] if single else out

    # -- objective ----------------------------------------------------------

    def loss_and_grads(self, y, x, eps, scale: float = 1.0, train: bool = True, need_grads: bool = True):
        """Negative ELBO of a batch at fixed noise ``eps`` (N, d_z).

        Returns ``(loss, recon, kl)`` summed over the batch; gradients of
        ``scale * loss`` are left in ``self.grads()``.
        """
        cfg = self.cfg
        d = cfg.d_z
        y = np.asarray(y, dtype=np.float64)
        h = self.encoder.forward(self._encoder_input(y, x), train=train)
        mu = h[:, :d, 0]
        raw_logvar = h[:, d:, 0]
        logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
        var = np.exp(logvar)
        std = np.exp(0.5 * logvar)
        z = mu + std * eps
        yhat = self.decoder.forward(self._decoder_input(z, x), train=train).transpose(0, 2, 1)
        resid = y - yhat
        sq = np.sum(resid * resid, axis=(1, 2))
        kl_each = 0.5 * np.sum(var + mu * mu - logvar - 1.0, axis=1)
        recon = float(np.sum(sq)) / (2.0 * cfg.sigma2)
        kl = float(np.sum(kl_each))
        loss = recon + kl
        if not np.isfinite(loss):
            bad = int(np.flatnonzero(~np.isfinite(sq / (2 * cfg.sigma2) + kl_each))[0])
            raise FloatingPointError(f"non-finite loss at batch sample {bad}")
        if need_grads:
            g_yhat = (-scale / cfg.sigma2) * resid.transpose(0, 2, 1)
            g_in = self.decoder.backward(np.ascontiguousarray(g_yhat))
            g_z = g_in[:, :d, :].sum(axis=2)
            g_mu = g_z + scale * mu
            g_logvar = g_z * eps * 0.5 * std + scale * 0.5 * (var - 1.0)
            g_logvar[(raw_logvar < LOGVAR_MIN) | (raw_logvar > LOGVAR_MAX)] = 0.0
            g_h = np.zeros_like(h)
            g_h[:, :d, 0] = g_mu
            g_h[:, d:, 0] = g_logvar
            self.encoder.backward(g_h)
        else:
            _drop_caches(self.encoder)
            _drop_caches(self.decoder)
        return loss, recon, kl


def _drop_caches(seq: Sequential):
    for layer in seq.layers:
        layer._cache = None


def build_model(cfg: ModelConfig) -> CVAE:
    return CVAE(cfg)


def reparameterize(q: LatentGaussian, seed) -> np.ndarray:
    """z = mu + sd * eps with eps drawn from the seeded stream."""
    var = np.clip(q.var, math.exp(LOGVAR_MIN), math.exp(LOGVAR_MAX))
    return q.mu + np.sqrt(var) * gaussian_sampler(q.mu.shape, seed)


def kl_terms(mu, var) -> np.ndarray:
    """Per-dimension KL(N(mu, var) || N(0, 1))."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    return 0.5 * (var + mu * mu - np.log(var) - 1.0)


def elbo_loss(model: CVAE, y, x, eps=None, seed=0, train: bool = False):
    """(loss, recon, kl) for a batch; draws ``eps`` from ``seed`` when not given."""
    y = np.asarray(y, dtype=np.float64)
    if eps is None:
        eps = gaussian_sampler((y.shape[0], model.cfg.d_z), seed)
    return model.loss_and_grads(y, x, eps, train=train, need_grads=False)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainTrace:
    """Per-epoch means over trajectories of the training objective."""

    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)

    def append(self, epoch, recon, kl):
        self.epoch.append(epoch)
        self.recon.append(recon)
        self.kl.append(kl)
        self.loss.append(recon + kl)

    def __len__(self):
        return len(self.epoch)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "loss", "recon", "kl"))
            for row in zip(self.epoch, self.loss, self.recon, self.kl):
                w.writerow((row[0],) + tuple(repr(float(v)) for v in row[1:]))

    @classmethod
    def from_csv(cls, path):
        t = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                t.epoch.append(int(row["epoch"]))
                t.loss.append(float(row["loss"]))
                t.recon.append(float(row["recon"]))
                t.kl.append(float(row["kl"]))
        return t


def _batches(order, batch_size):
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing single sample cannot go through train-mode batch norm
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(data: FleetDataset, cfg: ModelConfig, model: CVAE | None = None, adam: AdamState | None = None,
          log_every: int = 0, logger=None) -> tuple[CVAE, TrainTrace, AdamState]:
    """Minimize the negative ELBO with shuffled mini-batches and Adam."""
    if data.norm is None:
        raise ValueError("train expects a normalized dataset (see trajdata.normalize)")
    if len(data) < 2:
        raise ValueError("need at least two trajectories to train")
    model = model or CVAE(cfg)
    adam = adam or AdamState(lr=cfg.lr)
    rng = substream(cfg.seed, "train")
    y_all = data.positions
    x_all = data.covariate_array
    params = model.params()
    trace = TrainTrace()
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        recon_sum = kl_sum = 0.0
        for idx in _batches(order, cfg.batch_size):
            eps = rng.standard_normal((idx.size, cfg.d_z))
            _, recon, kl = model.loss_and_grads(y_all[idx], x_all[idx], eps, scale=1.0 / idx.size)
            adam_step(params, model.grads(), adam)
            recon_sum += recon
            kl_sum += kl
        trace.append(epoch, recon_sum / n, kl_sum / n)
        if not np.isfinite(trace.loss[-1]) or trace.loss[-1] > 1e6:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: loss={trace.loss[-1]}", trace)
        if logger is not None and log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.5f recon %.5f kl %.5f", epoch, trace.loss[-1], trace.recon[-1], trace.kl[-1])
    return model, trace, adam


def embed(model: CVAE, data: FleetDataset, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (mu, var) for every trajectory of ``data``."""
    mus, vars_ = [], []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        mu, var = model.encode_arrays(data.positions[sl], data.covariate_array[sl])
        mus.append(mu)
        vars_.append(var)
    if not mus:
        return np.zeros((0, model.cfg.d_z)), np.zeros((0, model.cfg.d_z))
    return np.concatenate(mus), np.concatenate(vars_)


def reconstruction_mse(model: CVAE, data: FleetDataset) -> float:
    """Per-point squared error of decode(encoder mean) in normalized units."""
    mu, _ = embed(model, data)
    yhat = model.decode(mu, data.covariate_array)
    return float(np.mean((data.positions - yhat) ** 2))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: CVAE, norm: NormStats | None, harbour, adam: AdamState | None = None) -> None:
    meta = {
        "model_config": model.cfg.to_dict(),
        "norm": None if norm is None else {"mean": norm.mean.tolist(), "std": norm.std.tolist()},
        "harbour": [float(v) for v in harbour],
    }
    save_checkpoint(path, model.state(), adam, meta)


def load_model(path) -> tuple[CVAE, NormStats | None, np.ndarray, AdamState | None]:
    tensors, adam, meta = load_checkpoint(path)
    model = CVAE(ModelConfig.from_dict(meta["model_config"]))
    model.load_state(tensors)
    norm = None if meta.get("norm") is None else NormStats(meta["norm"]["mean"], meta["norm"]["std"])
    return model, norm, np.asarray(meta["harbour"], dtype=np.float64), adam


def params_digest(model: CVAE) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# latent-space exploration
# ---------------------------------------------------------------------------


def month_covariate(month: int) -> np.ndarray:
    """Covariate of the 15th of ``month`` in a non-leap year."""
    return encode_covariate(dt.date(2015, month, 15))


@dataclass(frozen=True)
class GridRow:
    z1: float
    z2: float
    month: int
    d_max: float
    theta_max: float


def decode_grid(model: CVAE, norm: NormStats | None, harbour, n_z1: int = 17, n_z2: int = 21,
                z1_range=GRID_Z1, z2_range=GRID_Z2, months=range(1, 13), raw_units: bool = True) -> list[GridRow]:
    """Decode a (z1, z2) grid for each month; other latent coordinates stay at 0.

    Features are measured in degrees when ``raw_units`` (needs ``norm``),
    otherwise in normalized units.
    """
    if not model.cfg.conditional:
        raise ValueError("decode_grid needs a conditional model")
    if model.cfg.d_z < 2:
        raise ValueError("decode_grid needs d_z >= 2")
    z1s = np.linspace(*z1_range, n_z1)
    z2s = np.linspace(*z2_range, n_z2)
    zz1, zz2 = np.meshgrid(z1s, z2s, indexing="ij")
    z = np.zeros((zz1.size, model.cfg.d_z))
    z[:, 0] = zz1.ravel()
    z[:, 1] = zz2.ravel()
    harbour = np.asarray(harbour, dtype=np.float64)
    if not raw_units and norm is not None:
        harbour = norm.apply(harbour)
    rows = []
    for m in months:
        cov = np.repeat(month_covariate(m)[None], z.shape[0], axis=0)
        traj = model.decode(z, cov)
        if raw_units:
            if norm is None:
                raise ValueError("raw_units requires normalization statistics")
            traj = norm.invert(traj)
        for i in range(z.shape[0]):
            d_max, theta = traj_features(traj[i], harbour)
            rows.append(GridRow(float(z[i, 0]), float(z[i, 1]), int(m), d_max, theta))
    return rows


def export_grid(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("z1", "z2", "month", "d_max", "theta_max"))
        for r in rows:
            w.writerow((repr(r.z1), repr(r.z2), r.month, repr(r.d_max), repr(r.theta_max)))


def dim_sweep(data: FleetDataset, d_z_list=(2, 3, 4, 5), cfg: ModelConfig | None = None,
              variants=("cvae", "vae")) -> dict:
    """Train one model per (variant, d_z); returns {(variant, d_z): TrainTrace}."""
    cfg = cfg or ModelConfig()
    out = {}
    for variant in variants:
        for d_z in d_z_list:
            c = replace(cfg, d_z=int(d_z), conditional=(variant == "cvae"))
            _, trace, _ = train(data, c)
            out[(variant, int(d_z))] = trace
    return out


def export_sweep(traces: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "d_z", "epoch", "loss", "recon", "kl"))
        for (variant, d_z), tr in traces.items():
            for e, l, r, k in zip(tr.epoch, tr.loss, tr.recon, tr.kl):
                w.writerow((variant, d_z, e, repr(l), repr(r), repr(k)))


@dataclass
class DimDiagnostics:
    pairs: np.ndarray  # (n_pairs, 2) embedding indices
    bc_factors: np.ndarray  # (n_pairs, d)
    kl_terms: np.ndarray  # (M, d)
    ranking: list  # dimensions, most informative first

    def summary(self):
        rows = []
        for k in range(self.bc_factors.shape[1]):
            bq = np.quantile(self.bc_factors[:, k], [0.25, 0.5, 0.75])
            kq = np.quantile(self.kl_terms[:, k], [0.25, 0.5, 0.75])
            rows.append({"dim": k + 1, "rank": self.ranking.index(k) + 1,
                         "bc_q1": bq[0], "bc_median": bq[1], "bc_q3": bq[2],
                         "kl_q1": kq[0], "kl_median": kq[1], "kl_q3": kq[2]})
        return rows


def dim_diagnostics(mu, var, n_pairs: int = 1000, seed=0) -> DimDiagnostics:
    """Per-dimension BC factors on random embedding pairs and per-dimension KL terms.

    Dimensions are ranked by ascending median BC factor; ties (for instance
    several prior-like dimensions) fall back to descending mean KL.
    """
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    m = mu.shape[0]
    if m < 2:
        raise ValueError("need at least two embeddings")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, m, n_pairs)
    j = (i + rng.integers(1, m, n_pairs)) % m
    factors = bc_factors(mu[i], var[i], mu[j], var[j])
    kls = kl_terms(mu, var)
    med = np.median(factors, axis=0)
    ranking = sorted(range(mu.shape[1]), key=lambda k: (med[k], -kls[:, k].mean()))
    return DimDiagnostics(np.column_stack([i, j]), factors, kls, ranking)
