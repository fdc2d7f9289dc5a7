"""Generator training by feature matching with tracked moment differences.

One step: draw noise, generate a batch, extract features, update the
tracked differences (MA or AMA), build the surrogate loss from them and take
an ADAM step on the generator.  The ``naive-eq1`` estimator skips tracking
and differentiates the squared moment differences of the minibatch directly.
"""

from __future__ import annotations

import csv
import io as _io
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io as gio
from . import tensor as T
from .ama import BETA1, BETA2, AMAState, MAState, ama_update, ma_update, surrogate_generator_loss
from .errors import ConfigError, DivergenceError, FingerprintMismatch
from .layers import Module
from .metrics import GaussianStats, frechet_distance
from .moments import MomentStats, batch_stats, delta, layer_weights, loss_terms, precompute_stats
from .nets import GeneratorConfig, build_generator
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

ESTIMATORS = ("ama", "ma", "naive-eq1")
CSV_COLUMNS = ("step", "mean_term", "cov_term", "eq1_loss", "fd", "wall_ms")


@dataclass
class TrainConfig:
    n_z: int = 100
    batch_size: int = 64
    lr_g: float = 1e-4
    lr_ama: float = 5e-5
    estimator: str = "ama"
    layers: int | None = None
    mean_only: bool = False
    steps: int = 1000
    seed: int = 0
    eval_interval: int = 100
    eval_samples: int = 256
    v_init: str = "first"  # first | zero
    update_order: str = "fresh"  # fresh | stale
    normalize_layers: bool = False
    beta1: float = BETA1
    beta2: float = BETA2
    log_wallclock: bool = False

    def validate(self) -> "TrainConfig":
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if self.v_init not in ("first", "zero"):
            raise ConfigError(f"v_init must be 'first' or 'zero', got {self.v_init!r}")
        if self.update_order not in ("fresh", "stale"):
            raise ConfigError(f"update_order must be 'fresh' or 'stale', got {self.update_order!r}")
        if self.batch_size < (1 if self.mean_only else 2):
            raise ConfigError("batch_size must be >= 2 unless mean_only is set")
        if self.n_z < 1 or self.steps < 0 or self.eval_interval < 1 or self.eval_samples < 2:
            raise ConfigError("n_z, eval_interval must be >= 1; eval_samples >= 2; steps >= 0")
        if self.lr_g <= 0 or not 0 < self.lr_ama <= 1:
            raise ConfigError("lr_g must be > 0 and lr_ama in (0, 1]")
        if self.layers is not None and self.layers < 1:
            raise ConfigError("layers must be >= 1")
        return self


@dataclass
class LogRecord:
    step: int
    mean_term: float
    cov_term: float
    eq1_loss: float | None = None
    fd: float | None = None
    wall_ms: float | None = None


@dataclass
class RunLog:
    records: list[LogRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_state: object = None

    def append(self, record: LogRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("log steps must increase")
        self.records.append(record)

    def evaluations(self) -> list[LogRecord]:
        return [r for r in self.records if r.eq1_loss is not None]

    def to_csv(self, wallclock: bool = False) -> str:
        columns = CSV_COLUMNS if wallclock else CSV_COLUMNS[:-1]
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for r in self.records:
            writer.writerow(["" if getattr(r, c) is None else repr(getattr(r, c)) for c in columns])
        return buf.getvalue()

    def write_csv(self, path, wallclock: bool = False) -> None:
        gio.atomic_write(path, self.to_csv(wallclock).encode("utf-8"))


# ---------------------------------------------------------------- noise


def _noise(seed: int, stream: int, index: int, count: int, n_z: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))
    return rng.standard_normal((count, n_z)).astype(np.float32)


def step_noise(seed: int, step: int, count: int, n_z: int) -> np.ndarray:
    """Latent batch for training step ``step``; independent of history."""
    return _noise(seed, 0, step, count, n_z)


def sample(G: Module, count: int, seed: int = 0) -> np.ndarray:
    """``count`` generator outputs from ``N(0, I)`` noise, deterministic in ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    z = _noise(seed, 2, 0, count, G.n_z)
    was_training = G.training
    G.eval()
    try:
        with T.no_grad():
            return G(Tensor(z)).data.copy()
    finally:
        G.train(was_training)


# ---------------------------------------------------------------- checkpoints


def _estimator_sections(state) -> list[gio.Section]:
    if state is None:
        return []
    kind = "ama" if isinstance(state, AMAState) else "ma"
    out = [gio.Section("AMAS", "kind", gio.scalar(ESTIMATORS.index(kind)))]
    tracks = ["v_mean", "v_var"] + (["m_mean", "u_mean", "m_var", "u_var"] if kind == "ama" else [])
    for track in tracks:
        for j, arr in enumerate(getattr(state, track)):
            out.append(gio.Section("AMAS", f"{track}.{j}", arr))
    if kind == "ama":
        out.append(gio.Section("AMAS", "t", gio.scalar(state.t)))
    return out


def _estimator_from_sections(entries: dict[str, np.ndarray], config: TrainConfig):
    if not entries:
        return None
    kind = ESTIMATORS[int(entries["kind"])]

    def track(name):
        j, out = 0, []
        while f"{name}.{j}" in entries:
            out.append(np.array(entries[f"{name}.{j}"], np.float32))
            j += 1
        return tuple(out)

    if kind == "ma":
        return MAState(track("v_mean"), track("v_var"), config.lr_ama)
    return AMAState(track("v_mean"), track("v_var"), track("m_mean"), track("u_mean"), track("m_var"),
                    track("u_var"), int(entries["t"]), config.lr_ama, config.beta1, config.beta2)


def save_training_checkpoint(path, G: Module, opt: Adam, state, step: int) -> None:
    sections = gio.config_sections("GENP", G.config)
    sections += [gio.Section("GENP", f"param.{k}", v) for k, v in sorted(G.state_dict().items())]
    sections += [gio.Section("GENP", f"opt.{k}", v) for k, v in sorted(opt.state_dict().items())]
    sections.append(gio.Section("GENP", "step", gio.scalar(step)))
    sections += _estimator_sections(state)
    gio.write_checkpoint(path, sections)


def load_generator(path) -> Module:
    """Rebuild a generator from any checkpoint holding GENP sections."""
    entries = gio.by_tag(gio.read_checkpoint(path), "GENP")
    G = build_generator(gio.config_from_sections(GeneratorConfig, entries))
    G.load_state_dict({k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")})
    return G


@dataclass
class _Resume:
    step: int
    opt_state: dict
    estimator: object


def _read_resume(path, G: Module, config: TrainConfig) -> _Resume:
    sections = gio.read_checkpoint(path)
    entries = gio.by_tag(sections, "GENP")
    G.load_state_dict({k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")})
    opt_state = {k[len("opt."):]: v for k, v in entries.items() if k.startswith("opt.")}
    return _Resume(int(entries["step"]), opt_state,
                   _estimator_from_sections(gio.by_tag(sections, "AMAS"), config))


# ---------------------------------------------------------------- training


def _deepest_features(E, x: np.ndarray, M: int, chunk: int = 256) -> np.ndarray:
    parts = []
    with T.no_grad():
        for start in range(0, len(x), chunk):
            parts.append(E.extract(Tensor(x[start:start + chunk]), M)[-1].data.astype(np.float64))
    return np.concatenate(parts)


def _finite(arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _sq(xs, weights) -> float:
    return float(sum(w * float(np.sum(np.square(x.astype(np.float64)))) for x, w in zip(xs, weights)))


def evaluate(G: Module, E, stats: MomentStats, M: int, z: np.ndarray,
             data_gaussian: GaussianStats | None = None, weights: Sequence[float] | None = None):
    """Full matching loss (and Frechet distance on the deepest tap) for a fixed latent batch."""
    was_training = G.training
    G.eval()
    try:
        with T.no_grad():
            fake = G(Tensor(z))
            fs = batch_stats(fake, E, M, covariance=stats.var is not None)
            mean_term, var_term = loss_terms(stats, fs, weights)
            eq1 = float(mean_term) + (float(var_term) if var_term is not None else 0.0)
            fd = None
            if data_gaussian is not None:
                fd = frechet_distance(data_gaussian, GaussianStats.fit(_deepest_features(E, fake.data, M)))
    finally:
        G.train(was_training)
    return eq1, fd


def train(config: TrainConfig, data: np.ndarray | None, E, generator: Module, stats: MomentStats | None = None,
          *, checkpoint_dir=None, resume=None, with_fd: bool = True) -> tuple[Module, RunLog]:
    """Train ``generator`` in place to match the feature moments of ``data`` under ``E``.

    ``stats`` defaults to statistics precomputed from ``data``; at least one of
    them must be given.  When ``checkpoint_dir`` is set a checkpoint and the
    CSV log are written every ``eval_interval`` steps.
    """
    config.validate()
    M = config.layers if config.layers is not None else E.num_taps
    if not getattr(E, "frozen", False):
        raise ValueError("the feature extractor must be frozen before training")
    if generator.n_z != config.n_z:
        raise ConfigError(f"generator expects n_z={generator.n_z}, config says {config.n_z}")
    covariance = not config.mean_only
    if stats is None:
        if data is None:
            raise ValueError("either data or precomputed stats are required")
        stats = precompute_stats(data, E, M, covariance=covariance)
    if stats.fingerprint != E.fingerprint(M):
        raise FingerprintMismatch("precomputed statistics do not match the feature extractor "
                                  f"({stats.fingerprint[:12]} vs {E.fingerprint(M)[:12]})")
    if covariance and stats.var is None:
        raise ConfigError("variance matching requested but the statistics hold means only")
    if not covariance and stats.var is not None:
        stats = MomentStats(stats.mean, None, stats.count, stats.fingerprint)
    weights = layer_weights(stats.widths, config.normalize_layers)
    e_print = E.fingerprint(M)

    params = generator.trainable_parameters()
    opt = Adam(params, lr=config.lr_g, beta1=config.beta1, beta2=config.beta2)
    state = None
    start = 0
    if resume is not None:
        r = _read_resume(resume, generator, config)
        opt.load_state_dict(r.opt_state)
        start, state = r.step, r.estimator

    eval_z = _noise(config.seed, 1, 0, config.eval_samples, config.n_z)
    data_gaussian = None
    if with_fd and data is not None:
        data_gaussian = GaussianStats.fit(_deepest_features(E, np.asarray(data, np.float32), M))
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    runlog = RunLog()
    last_ckpt, last_finite = None, None
    generator.train()
    for step in range(start, config.steps):
        t0 = time.perf_counter()
        z = step_noise(config.seed, step, config.batch_size, config.n_z)
        fake = generator(Tensor(z))
        fs = batch_stats(fake, E, M, covariance=covariance)
        d = delta(stats, fs)
        mean_term = _sq(d.mean, weights)
        cov_term = _sq(d.var, weights)
        if config.estimator == "naive-eq1":
            mt, vt = loss_terms(stats, fs, weights, covariance)
            loss = mt if vt is None else mt + vt
        else:
            update = ama_update if config.estimator == "ama" else ma_update
            fresh_init = state is None
            if fresh_init:
                if config.estimator == "ama":
                    init = AMAState.from_delta if config.v_init == "first" else None
                    state = (init(d, config.lr_ama, beta1=config.beta1, beta2=config.beta2) if init else
                             AMAState.zeros(stats.widths, config.lr_ama, covariance,
                                            beta1=config.beta1, beta2=config.beta2))
                else:
                    state = (MAState.from_delta(d, config.lr_ama) if config.v_init == "first"
                             else MAState.zeros(stats.widths, config.lr_ama, covariance))
            # a state initialised from this very delta is already at the fixed point
            skip_update = fresh_init and config.v_init == "first"
            if config.update_order == "fresh" and not skip_update:
                state = update(state, d)
            loss = surrogate_generator_loss(state.v_mean, state.v_var, stats, fs, weights)
            if config.update_order == "stale" and not skip_update:
                state = update(state, d)
        grads = T.backward(loss, params)
        if not (np.isfinite(mean_term) and np.isfinite(cov_term) and _finite(grads.values())):
            raise DivergenceError(f"non-finite loss or gradient at step {step}", last_finite=last_finite,
                                  checkpoint=last_ckpt)
        last_finite = mean_term + cov_term
        opt.step(grads)
        record = LogRecord(step + 1, mean_term, cov_term)
        done = step + 1
        if done % config.eval_interval == 0 or done == config.steps:
            record.eq1_loss, record.fd = evaluate(generator, E, stats, M, eval_z, data_gaussian, weights)
            if not np.isfinite(record.eq1_loss):
                raise DivergenceError(f"non-finite evaluation loss at step {done}", last_finite=last_finite,
                                      checkpoint=last_ckpt)
            if ckpt_dir is not None:
                last_ckpt = ckpt_dir / f"step_{done:06d}.ckpt"
                save_training_checkpoint(last_ckpt, generator, opt, state, done)
                runlog.checkpoints.append(last_ckpt)
        if config.log_wallclock:
            record.wall_ms = (time.perf_counter() - t0) * 1e3
        runlog.append(record)
        if ckpt_dir is not None and record.eq1_loss is not None:
            runlog.write_csv(ckpt_dir / "runlog.csv", config.log_wallclock)
        log.debug("step %d mean %.6g cov %.6g", done, mean_term, cov_term)
    runlog.final_state = state
    if E.fingerprint(M) != e_print:
        raise RuntimeError("feature extractor changed during training")
    return generator, runlog


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    layers: int
    eq1_loss: float
    fd: float | None


def layer_ablation(config: TrainConfig, data: np.ndarray, E, generator_factory: Callable[[], Module],
                   layer_counts: Sequence[int], csv_path=None) -> list[AblationRow]:
    """One full run per layer count with the same seed.

    Every row reports the matching loss over all taps of ``E`` and the
    Frechet distance on the deepest tap, so rows are comparable.
    """
    counts = list(layer_counts)
    if not counts or any(not 1 <= m <= E.num_taps for m in counts):
        raise ValueError(f"layer counts must lie in [1, {E.num_taps}]")
    full_stats = precompute_stats(data, E, E.num_taps, covariance=not config.mean_only)
    data_gaussian = GaussianStats.fit(_deepest_features(E, np.asarray(data, np.float32), E.num_taps))
    eval_z = _noise(config.seed, 1, 0, config.eval_samples, config.n_z)
    rows = []
    for m in counts:
        run_config = TrainConfig(**{f.name: getattr(config, f.name) for f in fields(config)})
        run_config.layers = m
        G, _ = train(run_config, data, E, generator_factory(), with_fd=False)
        eq1, fd = evaluate(G, E, full_stats, E.num_taps, eval_z, data_gaussian)
        rows.append(AblationRow(m, eq1, fd))
    if csv_path is not None:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("layers", "eq1_loss", "fd"))
        for r in rows:
            writer.writerow((r.layers, repr(r.eq1_loss), "" if r.fd is None else repr(r.fd)))
        gio.atomic_write(csv_path, buf.getvalue().encode("utf-8"))
    eq1s = [r.eq1_loss for r in rows]
    trend = "decreasing" if all(a >= b for a, b in zip(eq1s, eq1s[1:])) else "not monotone"
    log.info("layer ablation trend over M=%s: %s", counts, trend)
    return rows
