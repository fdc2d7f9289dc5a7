"""Acceptance suite: one test and one PASS/FAIL line per criterion."""

import itertools
import time

import numpy as np

from gfmn import tensor as T
from gfmn.ama import MAState, ma_update
from gfmn.checks import gradient_suite
from gfmn.cli import main
from gfmn import io as gio
from gfmn.metrics import (
    EmpiricalDistribution,
    FeatureMap,
    GaussianStats,
    frechet_distance,
    lap1_loss,
    mmd_kphi,
    run_regret,
)
from gfmn.moments import MomentDelta, precompute_stats
from gfmn.nets import EncoderConfig, GeneratorConfig, IdentityExtractor, build_generator, pretrain_autoencoder
from gfmn.tensor import Tensor
from gfmn.trainer import TrainConfig, sample, train

from conftest import ACCEPTANCE_LINES


def verdict(number, name, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = gradient_suite(seed=0, points=100)
    elapsed = time.perf_counter() - start
    worst = max(r.report.worst for r in results)
    counts = [sum(r.report.checked.values()) for r in results]
    ok = all(r.ok(1e-3) for r in results) and min(counts) >= 100 and elapsed < 30
    failing = [r.name for r in results if not r.ok(1e-3)]
    verdict(1, "gradient suite", ok,
            f"{len(results)} cases, min points {min(counts)}, worst rel error {worst:.2e}, {elapsed:.1f}s"
            + (f", failing {failing}" if failing else ""))


# ---------------------------------------------------------------- 2

TARGET_MEAN = np.array([1.0, -1.0])
TARGET_VAR = np.array([1.0, 0.25])


def gaussian_target(n, seed):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, 2)) * np.sqrt(TARGET_VAR) + TARGET_MEAN).astype(np.float32)


def test_criterion_2_linear_moment_recovery():
    start = time.perf_counter()
    data = gaussian_target(10_000, 0)
    G = build_generator(GeneratorConfig(kind="linear", n_z=2, output_dim=2, seed=0))
    cfg = TrainConfig(n_z=2, batch_size=64, lr_g=5e-3, estimator="naive-eq1", steps=5000, eval_interval=5000)
    G, _ = train(cfg, data, IdentityExtractor(), G, with_fd=False)
    x = sample(G, 10_000, seed=0).astype(np.float64)
    elapsed = time.perf_counter() - start
    mean_err = np.abs(x.mean(0) - TARGET_MEAN)
    var_err = np.abs(x.var(0) - TARGET_VAR)
    ok = bool(np.all(mean_err <= 0.05) and np.all(var_err <= 0.1) and elapsed < 120)
    verdict(2, "closed-form moment recovery", ok,
            f"mean error {np.round(mean_err, 4).tolist()}, variance error {np.round(var_err, 4).tolist()}, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_ma_is_one_sgd_step():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        width = int(rng.integers(1, 20))
        v = (rng.standard_normal(width) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        d = (rng.standard_normal(width) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        alpha = float(rng.uniform(1e-6, 1.0))
        # one gradient step on 0.5 * ||v - d||^2 taken by the autodiff engine
        vt = Tensor(v, requires_grad=True)
        diff = vt - Tensor(d)
        (g,) = T.backward(T.sum(diff * diff) * 0.5, [vt])
        sgd = v - np.float32(alpha) * g
        out = ma_update(MAState((v,), (), alpha), MomentDelta([d], []))
        mismatches += not np.array_equal(out.v_mean[0], sgd)
    verdict(3, "MA equals one SGD step", mismatches == 0, f"{mismatches} of 1000 states differ")


# ---------------------------------------------------------------- 4

# Step size for the tracked differences, shared by both estimators.  It was
# picked on tuning seeds 100-104 (disjoint from the evaluation seeds) as the
# value minimising the average final loss of MA and AMA together.
TRACKING_RATE = 0.2


def two_mode_images(n, seed):
    rng = np.random.default_rng(seed)
    x = np.full((n, 1, 8, 8), -1.0, np.float32)
    for i, m in enumerate(rng.integers(0, 2, n)):
        x[i, 0, 1 + 3 * m:4 + 3 * m, 1 + 3 * m:4 + 3 * m] = 1.0
    x += 0.1 * rng.standard_normal(x.shape).astype(np.float32)
    return np.clip(x, -1, 1)


def test_criterion_4_ama_beats_ma_at_small_batch():
    start = time.perf_counter()
    data = two_mode_images(512, 0)
    E = pretrain_autoencoder(data, "mse", 5, config=EncoderConfig(image_size=8, channels=1, latent=16,
                                                                  width_divisor=8, seed=0),
                             batch_size=32, lr=1e-3)
    stats = precompute_stats(data, E)
    losses = {"ma": [], "ama": []}
    for estimator in losses:
        for seed in range(5):
            G = build_generator(GeneratorConfig(n_z=16, image_size=8, channels=1, width_divisor=8, seed=seed))
            cfg = TrainConfig(n_z=16, batch_size=8, lr_g=1e-3, lr_ama=TRACKING_RATE, estimator=estimator,
                              steps=300, seed=seed, eval_interval=300, eval_samples=512)
            _, runlog = train(cfg, data, E, G, stats, with_fd=False)
            losses[estimator].append(runlog.evaluations()[-1].eq1_loss)
    elapsed = time.perf_counter() - start
    wins = sum(a < m for a, m in zip(losses["ama"], losses["ma"]))
    verdict(4, "AMA below MA at batch 8", wins >= 4 and elapsed < 600,
            f"AMA wins {wins}/5, ama {np.round(losses['ama'], 3).tolist()}, "
            f"ma {np.round(losses['ma'], 3).tolist()}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 5


def test_criterion_5_mmd_metric_on_finite_domain():
    start = time.perf_counter()
    domain = [0, 1, 2]
    phi = FeatureMap.indicators(domain)
    steps = [0.0, 0.25, 0.5, 0.75, 1.0]
    grid = [w for w in itertools.product(steps, repeat=3) if sum(w) == 1.0]
    wrong = 0
    for wp, wq in itertools.product(grid, repeat=2):
        mmd = mmd_kphi(EmpiricalDistribution(domain, wp), EmpiricalDistribution(domain, wq), phi)
        wrong += (mmd == 0.0) != (wp == wq)
    elapsed = time.perf_counter() - start
    verdict(5, "MMD zero iff equal", wrong == 0 and len(grid) == 15 and elapsed < 1.0,
            f"{len(grid) ** 2} pairs, {wrong} wrong, {elapsed * 1e3:.0f}ms")


# ---------------------------------------------------------------- 6


def test_criterion_6_covariance_matching_fixes_variance():
    ratios = []
    for seed in range(5):
        data = gaussian_target(10_000, 1000 + seed)
        errors = {}
        for mean_only in (False, True):
            G = build_generator(GeneratorConfig(kind="linear", n_z=2, output_dim=2, seed=seed))
            cfg = TrainConfig(n_z=2, batch_size=64, lr_g=5e-3, lr_ama=0.05, estimator="ama", steps=3000,
                              seed=seed, eval_interval=3000, mean_only=mean_only)
            stats = precompute_stats(data, IdentityExtractor(), covariance=not mean_only)
            G, _ = train(cfg, data, IdentityExtractor(), G, stats, with_fd=False)
            x = sample(G, 10_000, seed).astype(np.float64)
            errors[mean_only] = float(np.abs(x.var(0) - TARGET_VAR).max())
        ratios.append(errors[False] / errors[True])
    good = sum(r <= 0.1 for r in ratios)
    verdict(6, "mean+variance vs mean-only", good >= 4, f"{good}/5 seeds at ratio <= 0.1, "
            f"ratios {np.round(ratios, 4).tolist()}")


# ---------------------------------------------------------------- 7


def fd_eig_oracle(a: GaussianStats, b: GaussianStats) -> float:
    # eigenvalues of the non-symmetric product A B are real and non-negative
    lam = np.linalg.eigvals(a.cov @ b.cov)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * np.sqrt(np.clip(lam.real, 0, None)).sum())


def test_criterion_7_frechet_distance():
    rng = np.random.default_rng(0)
    s = GaussianStats(rng.standard_normal(3), (lambda m: m @ m.T)(rng.standard_normal((3, 3))))
    zero = frechet_distance(s, s)
    cov = (lambda m: m @ m.T)(rng.standard_normal((2, 2)))
    shift = np.array([0.5, -2.0])
    equal_cov = frechet_distance(GaussianStats(np.zeros(2), cov), GaussianStats(shift, cov))
    equal_err = abs(equal_cov - float(shift @ shift))
    worst = 0.0
    for _ in range(100):
        a = GaussianStats(rng.standard_normal(2), (lambda m: m @ m.T)(rng.standard_normal((2, 2))))
        b = GaussianStats(rng.standard_normal(2), (lambda m: m @ m.T)(rng.standard_normal((2, 2))))
        worst = max(worst, abs(frechet_distance(a, b) - fd_eig_oracle(a, b)))
    ok = zero == 0.0 and equal_err <= 1e-6 and worst <= 1e-6
    verdict(7, "Frechet distance", ok,
            f"identical {zero}, equal-cov error {equal_err:.1e}, worst 2x2 oracle error {worst:.1e}")


# ---------------------------------------------------------------- 8


def test_criterion_8_lap1():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)))
    y = Tensor(rng.uniform(-1, 1, (4, 3, 16, 16)))
    self_loss = float(lap1_loss(x, x))
    symmetric = float(lap1_loss(x, y)) == float(lap1_loss(y, x))
    # level 0 holds the +1/-1 row pattern (L1 = 16), level 1 a 2x2 block of
    # ones (L1 = 4): 1 * 16 + 1/4 * 4 = 17
    pattern = np.outer([1.0, -1.0, 1.0, -1.0], np.ones(4))
    zero = Tensor(np.zeros((4, 4)), dtype=np.float64)
    hand = float(lap1_loss(Tensor(pattern + 1.0, dtype=np.float64), zero))
    ok = self_loss == 0.0 and symmetric and abs(hand - 17.0) <= 1e-12
    verdict(8, "Lap1 loss", ok, f"Lap1(x,x)={self_loss}, symmetric={symmetric}, 4x4 example {hand} (expected 17)")


# ---------------------------------------------------------------- 9


def test_criterion_9_cli_training_is_deterministic(tmp_path, capsys):
    gio.write_tensor(tmp_path / "data.tnsr", two_mode_images(32, 0))
    assert main(["pretrain-ae", "--data", str(tmp_path / "data.tnsr"), "--out", str(tmp_path / "enc.ckpt"),
                 "--epochs", "1", "--latent", "8"]) == 0
    for run in ("a", "b"):
        (tmp_path / f"{run}.cfg").write_text(
            "trainer.n_z = 8\ntrainer.batch_size = 8\ntrainer.steps = 6\ntrainer.eval_interval = 3\n"
            "trainer.eval_samples = 16\ntrainer.seed = 7\n"
            "generator.n_z = 8\ngenerator.image_size = 8\ngenerator.channels = 1\ngenerator.width_divisor = 8\n"
            f"paths.data = {tmp_path / 'data.tnsr'}\npaths.encoder = {tmp_path / 'enc.ckpt'}\n"
            f"paths.out_dir = {tmp_path / run}\n")
        assert main(["train", "--config", str(tmp_path / f"{run}.cfg")]) == 0
    capsys.readouterr()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    expected = ["runlog.csv", "step_000003.ckpt", "step_000006.ckpt"]
    ok = names == expected and sorted(p.name for p in (tmp_path / "b").iterdir()) == expected and same == names
    verdict(9, "deterministic training", ok, f"{len(same)}/{len(names)} files byte-identical")


# ---------------------------------------------------------------- 10


def alternating_ma_cost(alpha, steps):
    # v_t = alpha * ((1 - alpha)^t - (-1)^t) / (2 - alpha) from v_0 = 0 on s_t = (-1)^t
    r = 1.0 - alpha
    total = 0.0
    for t in range(steps):
        v = alpha * (r ** t - (-1) ** t) / (r + 1)
        total += (v - (-1) ** t) ** 2
    return total


def test_criterion_10_regret_bench():
    constant = np.full((500, 4), 0.375, np.float32)
    zero = run_regret(constant, alpha=0.1, v0=constant[0])
    exact_zero = all(r.regret == 0.0 and r.cumulative_cost == 0.0 for r in zero.values())
    stream = np.where(np.arange(1000) % 2 == 0, 1.0, -1.0)
    ma = run_regret(stream, estimators=("ma",), alpha=0.3)["ma"]
    gap = abs(ma.cumulative_cost - alternating_ma_cost(0.3, 1000))
    verdict(10, "regret bench", exact_zero and gap <= 1e-6,
            f"constant-stream regrets {[r.regret for r in zero.values()]}, alternating MA cost gap {gap:.1e}")
