"""Command-line entry point: ``gfmn <subcommand> [options]``.

Failures print one line ``error: <code>: <message>`` to stderr and exit 1;
usage errors exit 2.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import io as gio
from .checks import gradient_suite
from .errors import ConfigError, GFMNError
from .metrics import GaussianStats, frechet_distance, run_regret
from .moments import full_loss, precompute_stats
from .nets import EncoderConfig, IdentityExtractor, build_generator, pretrain_autoencoder
from .tensor import Tensor, no_grad
from .trainer import layer_ablation, load_generator, sample, train

log = logging.getLogger("gfmn")


def _load_extractor(path: str):
    if path == "identity":
        return IdentityExtractor()
    return gio.load_extractor(path)


def cmd_stats(args) -> int:
    data = gio.read_dataset(args.data)
    E = _load_extractor(args.encoder)
    stats = precompute_stats(data, E, args.layers, chunk=args.chunk, covariance=not args.mean_only)
    gio.save_stats(args.out, stats)
    print(f"wrote {stats.num_layers} layers of statistics over {stats.count} samples to {args.out}")
    return 0


def cmd_pretrain_ae(args) -> int:
    data = gio.read_dataset(args.data)
    if data.ndim != 4:
        raise ConfigError(f"autoencoder pretraining needs (N, C, H, W) images, got shape {data.shape}")
    config = EncoderConfig(image_size=data.shape[2], channels=data.shape[1], latent=args.latent,
                           width_divisor=args.width_divisor, taps=args.taps, seed=args.seed)
    history: list[float] = []
    E = pretrain_autoencoder(data, args.loss, args.epochs, config=config, batch_size=args.batch_size,
                             lr=args.lr, seed=args.seed, history=history)
    gio.save_extractor(args.out, E)
    for epoch, value in enumerate(history):
        print(f"epoch {epoch} loss {value!r}")
    return 0


def _run_setup(path: str):
    run = cfg.load(path)
    if run.generator.n_z != run.trainer.n_z:
        raise ConfigError(f"generator.n_z ({run.generator.n_z}) differs from trainer.n_z ({run.trainer.n_z})")
    if not run.paths.data:
        raise ConfigError("paths.data is required")
    if not run.paths.encoder:
        raise ConfigError("paths.encoder is required")
    data = gio.read_dataset(run.paths.data)
    E = _load_extractor(run.paths.encoder)
    stats = gio.load_stats(run.paths.stats) if run.paths.stats else None
    return run, data, E, stats


def cmd_train(args) -> int:
    run, data, E, stats = _run_setup(args.config)
    out = Path(run.paths.out_dir)
    G = build_generator(run.generator)
    _, runlog = train(run.trainer, data, E, G, stats, checkpoint_dir=out,
                      resume=run.paths.resume or None)
    runlog.write_csv(out / "runlog.csv", run.trainer.log_wallclock)
    last = runlog.evaluations()[-1] if runlog.evaluations() else None
    if last is not None:
        print(f"step {last.step} eq1_loss {last.eq1_loss!r} fd {last.fd!r}")
    return 0


def cmd_sample(args) -> int:
    G = load_generator(args.checkpoint)
    images = sample(G, args.count, args.seed)
    if images.ndim != 4:
        raise ConfigError("sample images only come from image generators")
    paths = gio.write_images(images, args.out_dir)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def _features(E, x: np.ndarray, M: int) -> list[np.ndarray]:
    with no_grad():
        return [f.data.astype(np.float64) for f in E.extract(Tensor(x), M)]


def cmd_eval(args) -> int:
    a, b = gio.read_dataset(args.a), gio.read_dataset(args.b)
    E = _load_extractor(args.encoder)
    M = args.layers or E.num_taps
    if args.metric == "fd":
        value = frechet_distance(GaussianStats.fit(_features(E, a, M)[-1]), GaussianStats.fit(_features(E, b, M)[-1]))
    elif args.metric == "mmd":
        fa = np.concatenate(_features(E, a, M), axis=1)
        fb = np.concatenate(_features(E, b, M), axis=1)
        diff = fa.mean(axis=0) - fb.mean(axis=0)
        value = float(diff @ diff)
    else:
        value = float(full_loss(precompute_stats(a, E, M), precompute_stats(b, E, M)))
    print(repr(float(value)))
    return 0


def cmd_ablate_layers(args) -> int:
    run, data, E, _ = _run_setup(args.config)
    counts = [int(m) for m in args.layers.split(",")]
    rows = layer_ablation(run.trainer, data, E, lambda: build_generator(run.generator), counts, args.out)
    for r in rows:
        print(f"M={r.layers} eq1_loss {r.eq1_loss!r} fd {r.fd!r}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in gradient_suite(args.seed, args.points):
        ok = r.ok(args.tol)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {r.name} checked={sum(r.report.checked.values())} "
              f"skipped={len(r.report.skipped)} max_rel_error={r.report.worst!r}")
    if failed:
        print(f"error: gradcheck: {failed} case(s) above tolerance {args.tol}", file=sys.stderr)
        return 1
    return 0


def cmd_regret_bench(args) -> int:
    if args.stream:
        stream = gio.read_dataset(args.stream)
    elif args.kind == "constant":
        stream = np.full((args.steps, args.dim), args.value, np.float32)
    else:
        signs = np.where(np.arange(args.steps) % 2 == 0, 1.0, -1.0)
        stream = (signs[:, None] * np.full((1, args.dim), args.value)).astype(np.float32)
    v0 = None if args.v0 is None else np.full(stream.reshape(len(stream), -1).shape[1], args.v0, np.float32)
    for name, res in run_regret(stream.reshape(len(stream), -1), alpha=args.alpha, v0=v0).items():
        print(f"{name} cumulative {res.cumulative_cost!r} offline {res.offline_cost!r} regret {res.regret!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfmn", description="Generative feature matching toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="precompute feature statistics of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", required=True, help="extractor checkpoint, or 'identity'")
    s.add_argument("--layers", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--mean-only", action="store_true")
    s.add_argument("--chunk", type=int, default=256)
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("pretrain-ae", help="pretrain an autoencoder and save its frozen encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss", choices=("mse", "lap1"), default="mse")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--latent", type=int, default=128)
    s.add_argument("--width-divisor", type=int, default=8)
    s.add_argument("--taps", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_pretrain_ae)

    s = sub.add_parser("train", help="train a generator from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="write generator samples as PGM/PPM images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("eval", help="compare two datasets under an extractor")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--encoder", required=True, help="extractor checkpoint, or 'identity'")
    s.add_argument("--metric", choices=("fd", "mmd", "eq1"), default="fd")
    s.add_argument("--layers", type=int, default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate-layers", help="one training run per number of matched layers")
    s.add_argument("--config", required=True)
    s.add_argument("--layers", required=True, help="comma-separated layer counts, e.g. 1,2,4")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate_layers)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and the surrogate loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("regret-bench", help="tracking cost and regret of MA and AMA on a stream")
    s.add_argument("--stream", default=None, help="TNSR file of shape (T, d); overrides --kind")
    s.add_argument("--kind", choices=("constant", "alternating"), default="alternating")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--value", type=float, default=1.0)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--v0", type=float, default=None, help="initial tracked value (default 0)")
    s.set_defaults(fn=cmd_regret_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except GFMNError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
    except (OSError, KeyError) as e:
        print(f"error: io: {e}", file=sys.stderr)
    except ValueError as e:
        print(f"error: value: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
