"""Adversarial training loop, Adam, delta sweep and binary checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import DatasetManifest, FrameTriplet, load_triplets, to_unit_range
from .losses import adversarial_loss, discriminator_loss, pseudo_huber
from .metrics import psnr, ssim_global
from .model import (
    DiscriminatorConfig,
    GeneratorConfig,
    ParameterSet,
    build_discriminator,
    build_generator,
    discriminator_forward,
    discriminator_score,
    generator_config_from_params,
    generator_forward,
)

log = logging.getLogger(__name__)

DEFAULT_DELTAS = (0.1, 0.25, 0.45, 0.5, 0.75, 0.8, 1.0)
LOG_HEADER = "step,d_loss,g_loss,psnr,ssim"
SWEEP_HEADER = "delta,psnr,ssim"
PARAM_MAGIC = b"FREGAN1\0"
ADAM_MAGIC = b"ADAMST1\0"


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.95
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise TrainConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1:
            raise TrainConfigError(f"beta1 must lie in [0, 1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            raise TrainConfigError(f"beta2 must lie in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise TrainConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "AdamState":
        trainable = params.trainable()
        return cls(
            {k: np.zeros_like(p.data) for k, p in trainable.items()},
            {k: np.zeros_like(p.data) for k, p in trainable.items()},
        )


@dataclass
class TrainStates:
    gen: AdamState
    disc: AdamState


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 15000
    batch_size: int = 1
    delta: float = 0.5
    seed: int = 42
    checkpoint_every: int = 1000
    reconstruction_weight: float = 0.0  # extension; 0 keeps the pure adversarial objective
    schedule: str = "shuffled"  # or "cyclic": consecutive steps on one triplet
    cycle_steps: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise TrainConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.delta > 0:
            raise TrainConfigError(f"delta must be positive, got {self.delta}")
        if self.checkpoint_every < 1:
            raise TrainConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not self.reconstruction_weight >= 0:
            raise TrainConfigError("reconstruction_weight must be non-negative")
        if self.schedule not in ("shuffled", "cyclic"):
            raise TrainConfigError(f"unknown schedule {self.schedule!r}")
        if self.cycle_steps < 1:
            raise TrainConfigError("cycle_steps must be >= 1")


@dataclass
class StepReport:
    step: int
    d_loss: float
    g_loss: float
    psnr: float
    ssim: float

    def csv_row(self) -> str:
        return f"{self.step},{self.d_loss!r},{self.g_loss!r},{self.psnr!r},{self.ssim!r}"


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: ParameterSet, grads, state: AdamState, config: OptimizerConfig):
    """One Adam update, in place, over every trainable tensor in ``params``."""
    trainable = params.trainable()
    missing = [k for k in trainable if k not in grads]
    if missing:
        raise nx.ContractError(f"no gradient for parameter {missing[0]!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1**state.t
    bc2 = 1 - b2**state.t
    for name, p in trainable.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# one step of the alternating scheme


def stack_batch(batch):
    def stack(attr):
        return np.concatenate([getattr(t, attr).image for t in batch], axis=0)

    return stack("x_n"), stack("x_np1"), stack("x_np2")


def batch_quality(pred, target):
    """Mean per-image PSNR and SSIM of [-1, 1] predictions vs targets."""
    p = to_unit_range(pred)
    y = to_unit_range(target)
    scores = [(psnr(y[i], p[i]), ssim_global(y[i], p[i])) for i in range(len(p))]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def _finite(value, name, step):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} ({value}) at step {step}")
    return value


def discriminator_update(gen, disc, x_n, x_np1, x_np2, optim, state, *, gen_config, dropout_seed=0):
    """Real half then fake half, each with its own Adam step; returns both losses.

    The generator runs frozen and leaves its running statistics alone, so nothing
    in ``gen`` changes here.
    """
    fake = generator_forward(gen.frozen(), x_n, x_np2, training=True, seed=dropout_seed,
                             config=gen_config, update_stats=False).detach()
    real_scores = discriminator_forward(disc, x_n, x_np2, x_np1, training=True)
    loss_real = discriminator_loss(real_patches=real_scores)
    adam_step(disc, nx.backward(loss_real, disc.trainable()), state, optim)
    fake_scores = discriminator_forward(disc, x_n, x_np2, fake, training=True)
    loss_fake = discriminator_loss(fake_patches=fake_scores)
    adam_step(disc, nx.backward(loss_fake, disc.trainable()), state, optim)
    return loss_real.item(), loss_fake.item()


def generator_update(gen, disc, x_n, x_np1, x_np2, optim, state, *, delta, gen_config,
                     reconstruction_weight=0.0, dropout_seed=0):
    frozen = disc.frozen()
    d_real = discriminator_score(
        discriminator_forward(frozen, x_n, x_np2, x_np1, training=True, update_stats=False)
    ).detach()
    fake = generator_forward(gen, x_n, x_np2, training=True, seed=dropout_seed, config=gen_config)
    d_fake = discriminator_score(
        discriminator_forward(frozen, x_n, x_np2, fake, training=True, update_stats=False)
    )
    loss = adversarial_loss(d_real, d_fake, delta)
    if reconstruction_weight > 0:
        pixel = nx.mean(pseudo_huber(nx.sub(fake, x_np1), delta))
        loss = loss + pixel * reconstruction_weight
    adam_step(gen, nx.backward(loss, gen.trainable()), state, optim)
    return loss.item(), fake.data


def train_step(gen, disc, batch, train_config: TrainConfig, optim: OptimizerConfig, states: TrainStates,
               step=1, gen_config=None) -> StepReport:
    if not batch:
        raise TrainingError("empty batch")
    gen_config = gen_config or generator_config_from_params(gen)
    x_n, x_np1, x_np2 = stack_batch(batch)
    dropout_seed = [train_config.seed, step]
    loss_real, loss_fake = discriminator_update(
        gen, disc, x_n, x_np1, x_np2, optim, states.disc, gen_config=gen_config,
        dropout_seed=dropout_seed,
    )
    d_loss = _finite(loss_real + loss_fake, "discriminator loss", step)
    g_loss, fake = generator_update(
        gen, disc, x_n, x_np1, x_np2, optim, states.gen, delta=train_config.delta,
        gen_config=gen_config, reconstruction_weight=train_config.reconstruction_weight,
        dropout_seed=dropout_seed,
    )
    g_loss = _finite(g_loss, "generator loss", step)
    p, s = batch_quality(fake, x_np1)
    return StepReport(step, d_loss, g_loss, _finite(p, "psnr", step), _finite(s, "ssim", step))


# ---------------------------------------------------------------------------
# full runs


def _batch_schedule(n, config: TrainConfig):
    """Yield lists of triplet indices, one per step, deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    if config.schedule == "cyclic":
        i = 0
        while True:
            for _ in range(config.cycle_steps):
                yield [(i + k) % n for k in range(config.batch_size)]
            i = (i + config.batch_size) % n
    order, pos = [], 0
    while True:
        batch = []
        while len(batch) < config.batch_size:
            if pos >= len(order):
                order, pos = list(rng.permutation(n)), 0
            batch.append(int(order[pos]))
            pos += 1
        yield batch


def _train_triplets(data, image_size):
    if isinstance(data, DatasetManifest):
        return load_triplets(data, "train", image_size)
    return list(data)


def init_models(gen_config: GeneratorConfig, disc_config: DiscriminatorConfig, seed: int):
    gen = build_generator(gen_config, seed)
    disc = build_discriminator(disc_config, seed + 1)
    return gen, disc, TrainStates(AdamState.zeros_like(gen), AdamState.zeros_like(disc))


def checkpoint_path(output_dir, step):
    return Path(output_dir) / f"checkpoint_{step:06d}.bin"


def train(data, gen_config: GeneratorConfig, disc_config: DiscriminatorConfig, train_config: TrainConfig,
          optim: OptimizerConfig, output_dir=None, progress_every=0):
    """Run the fixed step budget; returns (gen, disc, states, reports).

    ``data`` is a manifest (its train split is used) or a list of triplets.  With an
    ``output_dir`` the CSV log and checkpoints are written there.
    """
    triplets = _train_triplets(data, gen_config.image_size)
    if not triplets:
        raise TrainConfigError("training split is empty")
    gen, disc, states = init_models(gen_config, disc_config, train_config.seed)
    out = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.csv", "w", newline="\n", encoding="utf-8")
        log_file.write(LOG_HEADER + "\n")
    reports = []
    schedule = _batch_schedule(len(triplets), train_config)
    try:
        for step in range(1, train_config.steps + 1):
            batch = [triplets[i] for i in next(schedule)]
            report = train_step(gen, disc, batch, train_config, optim, states, step, gen_config)
            reports.append(report)
            if out is not None:
                log_file.write(report.csv_row() + "\n")
                if step % train_config.checkpoint_every == 0 or step == train_config.steps:
                    save_checkpoint(gen, disc, states, checkpoint_path(out, step))
            if progress_every and step % progress_every == 0:
                log.info("step %d d_loss=%.4f g_loss=%.4f psnr=%.2f ssim=%.3f", step, report.d_loss,
                         report.g_loss, report.psnr, report.ssim)
    finally:
        if out is not None:
            log_file.close()
    return gen, disc, states, reports


def predict(gen, x_n, x_np2, gen_config=None):
    """Inference-mode prediction (running batch-norm statistics, no dropout)."""
    return generator_forward(gen, x_n, x_np2, training=False, config=gen_config).data


def evaluate(gen, triplets, gen_config=None, batch_size=8):
    """Per-triplet (psnr, ssim) of inference-mode predictions."""
    results = []
    for start in range(0, len(triplets), batch_size):
        chunk = triplets[start : start + batch_size]
        x_n, x_np1, x_np2 = stack_batch(chunk)
        pred = predict(gen, x_n, x_np2, gen_config)
        p = to_unit_range(pred)
        y = to_unit_range(x_np1)
        results.extend((psnr(y[i], p[i]), ssim_global(y[i], p[i])) for i in range(len(chunk)))
    return results


def delta_sweep(data, deltas=DEFAULT_DELTAS, gen_config=None, disc_config=None, train_config=None,
                optim=None, output_path=None):
    """Retrain from the same seed for each delta and score the test split.

    Returns a list of (delta, psnr, ssim) rows; a failed delta gets ``None`` scores.
    """
    if not deltas:
        raise TrainConfigError("no deltas to sweep")
    gen_config = gen_config or GeneratorConfig()
    disc_config = disc_config or DiscriminatorConfig(gen_config.image_size, base_filters=gen_config.base_filters)
    train_config = train_config or TrainConfig()
    optim = optim or OptimizerConfig()
    if isinstance(data, DatasetManifest):
        train_set = load_triplets(data, "train", gen_config.image_size)
        test_set = load_triplets(data, "test", gen_config.image_size)
    else:
        train_set, test_set = data
    rows = []
    for delta in deltas:
        try:
            cfg = TrainConfig(**{**train_config.__dict__, "delta": float(delta)})
            gen, *_ = train(train_set, gen_config, disc_config, cfg, optim)
            if not test_set:
                raise TrainConfigError("test split is empty")
            scores = evaluate(gen, test_set, gen_config)
            rows.append((float(delta), float(np.mean([s[0] for s in scores])),
                         float(np.mean([s[1] for s in scores]))))
        except (TrainingError, TrainConfigError, ArithmeticError, ValueError) as exc:
            log.warning("delta %s failed: %s", delta, exc)
            rows.append((float(delta), None, None))
    if output_path is not None:
        Path(output_path).write_text(format_sweep(rows), encoding="utf-8")
    return rows


def _fmt(value):
    if value is None:
        return "failed"
    return "inf" if value == math.inf else repr(value)


def format_sweep(rows) -> str:
    buf = io.StringIO()
    buf.write(SWEEP_HEADER + "\n")
    for delta, p, s in rows:
        buf.write(f"{delta!r},{_fmt(p)},{_fmt(s)}\n")
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# checkpoints


def _pack_tensors(entries):
    parts = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected):
        at = self.pos
        got = self.take(len(expected), "magic")
        if got != expected:
            raise CheckpointFormatError(f"bad magic at offset {at}: expected {expected!r}, got {got!r}")

    def tensors(self):
        (count,) = self.unpack("<I", "tensor count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "name length")
            at = self.pos
            try:
                name = self.take(nlen, "name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointFormatError(f"undecodable name at offset {at}") from None
            (rank,) = self.unpack("<B", "rank")
            shape = self.unpack(f"<{rank}I", "extents")
            n = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(self.take(4 * n, f"values of {name}"), dtype="<f4")
            out[name] = values.reshape(shape).astype(np.float32)
        return out


def save_checkpoint(gen: ParameterSet, disc: ParameterSet, states: TrainStates | None, path):
    params = [(f"gen.{k}", t.data) for k, t in gen.items()] + [(f"disc.{k}", t.data) for k, t in disc.items()]
    opt = []
    if states is not None:
        for prefix, st in (("gen", states.gen), ("disc", states.disc)):
            opt += [(f"{prefix}.m.{k}", st.m[k]) for k in sorted(st.m)]
            opt += [(f"{prefix}.v.{k}", st.v[k]) for k in sorted(st.v)]
            opt.append((f"{prefix}.t", np.asarray(st.t, dtype=np.float32)))
    blob = PARAM_MAGIC + _pack_tensors(params) + ADAM_MAGIC + _pack_tensors(opt)
    Path(path).write_bytes(blob)


def _split_prefix(entries, prefix):
    return {k[len(prefix) :]: v for k, v in entries.items() if k.startswith(prefix)}


def _to_params(arrays, template=None, label=""):
    if template is not None:
        for name in template:
            if name not in arrays:
                raise CheckpointFormatError(f"checkpoint lacks parameter {label}{name}")
            if arrays[name].shape != template[name].shape:
                raise CheckpointFormatError(
                    f"shape mismatch for {label}{name}: checkpoint {arrays[name].shape}, "
                    f"model {template[name].shape}"
                )
    ps = ParameterSet()
    for name, arr in arrays.items():
        trainable = not (name.endswith("running_mean") or name.endswith("running_var"))
        ps[name] = nx.Tensor(arr, requires_grad=trainable)
    return ps


def load_checkpoint(path, gen_template=None, disc_template=None):
    """Read (gen, disc, states); templates, when given, must match every shape."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    r.magic(PARAM_MAGIC)
    params = r.tensors()
    states = None
    if r.pos < len(blob):
        r.magic(ADAM_MAGIC)
        opt = r.tensors()
        if opt:
            states = TrainStates(*(
                AdamState(
                    _split_prefix(opt, f"{p}.m."),
                    _split_prefix(opt, f"{p}.v."),
                    int(opt[f"{p}.t"]) if f"{p}.t" in opt else 0,
                )
                for p in ("gen", "disc")
            ))
    else:
        raise CheckpointFormatError(f"truncated checkpoint: optimizer section missing at offset {r.pos}")
    if r.pos != len(blob):
        raise CheckpointFormatError(f"trailing bytes at offset {r.pos}")
    gen = _to_params(_split_prefix(params, "gen."), gen_template, "gen.")
    disc = _to_params(_split_prefix(params, "disc."), disc_template, "disc.")
    return gen, disc, states
