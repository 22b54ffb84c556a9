"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest -v tests/test_acceptance.py``.  The lines are
printed with capture disabled so they show up in ordinary pytest output.
"""

import math
import time

import numpy as np
import pytest
from PIL import Image
from threadpoolctl import threadpool_limits

from fregan import cli
from fregan import numerics as nx
from fregan.data import synth_moving_square, write_image_bytes
from fregan.losses import adversarial_loss, discriminator_loss, pseudo_huber
from fregan.metrics import psnr, ssim_global
from fregan.model import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
)
from fregan.numerics import BatchNormParams, ConvParams, Tensor
from fregan.training import (
    CheckpointFormatError,
    OptimizerConfig,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
    init_models,
)

from reference_metrics import psnr_loop, ssim_loop


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number:2d} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def cli_ok(*argv):
    return cli.main([str(a) for a in argv]) == 0


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _projected(out, rng):
    # a fixed random projection turns any tensor into a scalar with a generic gradient
    return nx.sum(nx.mul(out, Tensor(rng.normal(size=out.shape))))


def _away_from_zero(rng, shape):
    x = rng.uniform(0.05, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def gradient_cases(seed):
    rng = np.random.default_rng(seed)
    delta = [0.1, 0.5, 1.0, 0.25, 0.75][seed % 5]
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0), (1, 1)][seed % 5]

    def conv(x, w, b):
        return _projected(nx.conv2d(x, ConvParams(w, b, stride, pad)), np.random.default_rng(seed))

    def convt(x, w, b):
        return _projected(nx.conv2d_transpose(x, ConvParams(w, b, 2, 1)), np.random.default_rng(seed))

    def bn(x, g, b):
        params = BatchNormParams(g, b, np.zeros(2), np.ones(2))
        return _projected(nx.batchnorm(x, params, training=True, update_stats=False), np.random.default_rng(seed))

    def act(kind):
        return lambda x: _projected(nx.activation(x, kind), np.random.default_rng(seed))

    real = rng.uniform(0.05, 0.95, size=(2, 1, 2, 2))
    fake = rng.uniform(0.05, 0.95, size=(2, 1, 2, 2))
    return {
        "conv2d": (conv, [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "conv2d_transpose": (convt, [rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(3, 2, 4, 4)),
                                     rng.normal(size=2)]),
        "batchnorm": (bn, [rng.normal(size=(3, 2, 3, 3)), rng.uniform(0.5, 1.5, 2), rng.normal(size=2)]),
        "relu": (act("relu"), [_away_from_zero(rng, (2, 3, 4))]),
        "leaky_relu": (act("leaky_relu"), [_away_from_zero(rng, (2, 3, 4))]),
        "tanh": (act("tanh"), [rng.normal(size=(2, 3, 4))]),
        "sigmoid": (act("sigmoid"), [rng.normal(size=(2, 3, 4))]),
        "concat_channels": (
            lambda a, b: _projected(nx.concat_channels(a, b), np.random.default_rng(seed)),
            [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))],
        ),
        "pseudo_huber": (lambda v: nx.sum(pseudo_huber(v, 0.5)), [rng.normal(scale=2, size=6)]),
        "adversarial_loss": (
            lambda r, f: adversarial_loss(r, f, delta),
            [np.array(rng.uniform(0.05, 0.95)), np.array(rng.uniform(0.05, 0.95))],
        ),
        "discriminator_loss": (discriminator_loss, [real, fake]),
    }


def test_criterion_01_gradient_correctness(report):
    start = time.perf_counter()
    worst = {}
    for seed in range(5):
        for name, (fn, inputs) in gradient_cases(seed).items():
            err = nx.finite_diff_check(fn, inputs, 1e-6)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(e <= 1e-4 for e in worst.values()) and elapsed < 60
    assert report(1, "gradient correctness", ok,
                  f"{len(worst)} ops x 5 instances, worst {top} {worst[top]:.2e} <= 1e-4, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 2, 3. losses


def test_criterion_02_pseudo_huber_regimes(report):
    small = max(abs(pseudo_huber(v, 0.5) - v * v / 2) for v in np.linspace(-0.01, 0.01, 2001))
    large = abs(pseudo_huber(100.0, 0.5) / (0.5 * 100) - 1)
    ok = small <= 1e-7 and large <= 0.01
    assert report(2, "pseudo-Huber regimes", ok, f"quadratic gap {small:.2e} <= 1e-7, linear gap {large:.2e} <= 0.01")


def test_criterion_03_closed_form_losses(report):
    a = abs(adversarial_loss(1.0, 0.0, 0.5) - 0.25 * (math.sqrt(5) - 1))
    b = abs(pseudo_huber(0.5, 0.5) - 0.25 * (math.sqrt(2) - 1))
    assert report(3, "closed-form loss values", a <= 1e-9 and b <= 1e-9, f"errors {a:.1e}, {b:.1e} <= 1e-9")


# ---------------------------------------------------------------------------
# 4. metrics


def test_criterion_04_metric_oracles(report):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = rng.random((3, 16, 16))
        y_hat = np.clip(y + rng.normal(0, 0.1, size=y.shape), 0, 1)
        for fast, slow in ((psnr(y, y_hat), psnr_loop(y, y_hat)), (ssim_global(y, y_hat), ssim_loop(y, y_hat))):
            worst = max(worst, abs(fast - slow) / abs(slow))
    y = np.array([1.0, 0.0, 0.0, 0.0])
    twenty = abs(psnr(y, y + np.array([0.1, -0.1, 0.1, -0.1])) - 20.0)
    x = np.random.default_rng(0).random((3, 16, 16))
    self_sim = ssim_global(x, x)
    ok = worst <= 1e-9 and twenty <= 1e-9 and self_sim == 1.0
    assert report(4, "metric oracle equivalence", ok,
                  f"worst rel {worst:.1e} <= 1e-9 on 20 pairs, 20 dB off by {twenty:.1e}, ssim(x,x)={self_sim!r}")


# ---------------------------------------------------------------------------
# 5. architecture


def test_criterion_05_architecture(report):
    problems = []
    for size in (32, 64, 128, 256):
        cfg = GeneratorConfig(size)
        params = build_generator(cfg)
        x = np.random.default_rng(size).uniform(-1, 1, (1, 3, size, size)).astype(np.float32)
        out = generator_forward(params, x, x, config=cfg)
        if out.shape != x.shape:
            problems.append(f"gen {size}: {out.shape}")
    full = build_generator(GeneratorConfig(256))
    enc = len({k.split(".")[0] for k in full if k.startswith("enc") and k.endswith(".conv.weight")})
    dec = len({k.split(".")[0] for k in full if k.startswith("dec") and k.endswith(".convt.weight")})
    if (enc, dec) != (9, 8):
        problems.append(f"layers {enc}+{dec}")
    disc = build_discriminator(DiscriminatorConfig(256))
    for p in disc.values():
        if p.requires_grad:
            p.data *= 30  # push logits far out to stress the open-interval guarantee
    xs = np.random.default_rng(1).uniform(-1, 1, (3, 2, 3, 256, 256)).astype(np.float32)
    scores = discriminator_forward(disc, xs[0], xs[1], xs[2], training=True).data
    if scores.shape[2:] != (30, 30):
        problems.append(f"patch {scores.shape}")
    if not (np.all(scores > 0) and np.all(scores < 1)):
        problems.append("scores outside (0,1)")
    ok = not problems
    assert report(5, "architecture shapes", ok,
                  "; ".join(problems) or f"shapes kept 32..256, {enc} enc + {dec} dec, 30x30 patch in (0,1)")


# ---------------------------------------------------------------------------
# 6. learning check


def test_criterion_06_learning(report):
    start = time.perf_counter()
    data = synth_moving_square(16, 32, seed=42)
    gen_cfg = GeneratorConfig(32)
    disc_cfg = DiscriminatorConfig(32)
    train_cfg = TrainConfig(steps=2000, batch_size=1, delta=0.5, seed=42)
    with threadpool_limits(1):
        gen0, *_ = init_models(gen_cfg, disc_cfg, 42)
        before = float(np.mean([p for p, _ in evaluate(gen0, data, gen_cfg)]))
        gen, *_ = train(data, gen_cfg, disc_cfg, train_cfg, OptimizerConfig(1e-4, 0.0, 0.95))
        after = float(np.mean([p for p, _ in evaluate(gen, data, gen_cfg)]))
    elapsed = time.perf_counter() - start
    ok = after - before >= 3.0 and elapsed <= 15 * 60
    assert report(6, "learning check", ok,
                  f"train PSNR {before:.2f} -> {after:.2f} dB, gain {after - before:+.2f} >= 3 dB, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7, 8. sweep harness and determinism


@pytest.fixture(scope="module")
def synthetic_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc")
    assert cli_ok("prepare", "--synthetic", 16, "--size", 32, "--output", root / "d")
    return root / "d" / "manifest.tsv"


SMALL = ("--size", 32, "--threads", 1, "--seed", 42)


def test_criterion_07_sweep_harness(report, synthetic_manifest, tmp_path):
    out = tmp_path / "sweep.csv"
    code = cli.main([str(a) for a in ("sweep", synthetic_manifest, "--steps", 20, "--output", out, *SMALL)])
    lines = out.read_text().splitlines() if out.exists() else []
    rows = [line.split(",") for line in lines[1:]]
    ok = code == 0 and lines[:1] == ["delta,psnr,ssim"] and len(rows) == 7 and all(r[1] != "failed" for r in rows)
    assert report(7, "sweep harness", ok, f"exit {code}, header {lines[:1]}, {len(rows)} data rows")


def test_criterion_08_determinism(report, synthetic_manifest, tmp_path):
    for run in ("a", "b"):
        assert cli_ok("train", synthetic_manifest, "--steps", 12, "--checkpoint-every", 6,
                      "--output-dir", tmp_path / run, *SMALL)
        assert cli_ok("sweep", synthetic_manifest, "--deltas", "0.25,0.5", "--steps", 4,
                      "--output", tmp_path / run / "sweep.csv", *SMALL)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differ and len(files) == 4
    assert report(8, "determinism", ok, f"{len(files)} files compared ({', '.join(files)}), differing: {differ or 'none'}")


# ---------------------------------------------------------------------------
# 9. interpolation contract


def test_criterion_09_interpolation(report, tmp_path):
    gen, disc, states = init_models(GeneratorConfig(32, base_filters=4), DiscriminatorConfig(32, base_filters=4), 42)
    ckpt = tmp_path / "c.bin"
    save_checkpoint(gen, disc, states, ckpt)
    problems = []
    for n in (2, 3, 10):
        src = tmp_path / f"in{n}"
        src.mkdir()
        rng = np.random.default_rng(n)
        for i in range(n):
            write_image_bytes(src / f"{i:03d}.png", rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        out = tmp_path / f"out{n}"
        if not cli_ok("interpolate", "--checkpoint", ckpt, "--frames", src, "--output", out):
            problems.append(f"n={n} failed")
            continue
        produced = sorted(out.iterdir())
        if len(produced) != 2 * n - 1:
            problems.append(f"n={n}: {len(produced)} frames")
        for k, f in enumerate(sorted(src.iterdir())):
            if not np.array_equal(np.asarray(Image.open(produced[2 * k])), np.asarray(Image.open(f))):
                problems.append(f"n={n}: original {k} altered")
    assert report(9, "interpolation contract", not problems,
                  "; ".join(problems) or "N in {2,3,10} -> 2N-1 frames, originals byte-identical")


# ---------------------------------------------------------------------------
# 10. checkpoint round trip


def test_criterion_10_checkpoint_round_trip(report, tmp_path):
    gen_cfg, disc_cfg = GeneratorConfig(32, base_filters=4), DiscriminatorConfig(32, base_filters=4)
    gen, disc, states = init_models(gen_cfg, disc_cfg, 42)
    batch = synth_moving_square(2, 32, seed=1)
    for step in (1, 2):
        train_step(gen, disc, batch, TrainConfig(), OptimizerConfig(), states, step, gen_cfg)
    path = tmp_path / "c.bin"
    save_checkpoint(gen, disc, states, path)
    g2, d2, s2 = load_checkpoint(path, gen, disc)
    exact = all(a[k].data.tobytes() == b[k].data.tobytes() for a, b in ((gen, g2), (disc, d2)) for k in a)
    exact &= all(
        sa.t == sb.t and all(sa.m[k].tobytes() == sb.m[k].tobytes() and sa.v[k].tobytes() == sb.v[k].tobytes()
                             for k in sa.m)
        for sa, sb in ((states.gen, s2.gen), (states.disc, s2.disc))
    )
    blob = path.read_bytes()
    rejected = 0
    corruptions = [blob[:len(blob) // 2], blob[:-1], b"XXXXXXX\0" + blob[8:], blob[:9]]
    for i, bad in enumerate(corruptions):
        p = tmp_path / f"bad{i}.bin"
        p.write_bytes(bad)
        try:
            load_checkpoint(p)
        except CheckpointFormatError:
            rejected += 1
    ok = exact and rejected == len(corruptions)
    assert report(10, "checkpoint round trip", ok,
                  f"bit-exact {exact}, {rejected}/{len(corruptions)} corrupted files rejected")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
