"""Pseudo-Huber, adversarial and discriminator objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, _as_tensor, log, make_op, mean, sub


class LossConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    delta: float = 0.5

    def __post_init__(self):
        if not self.delta > 0:
            raise LossConfigError(f"delta must be positive, got {self.delta}")


def pseudo_huber(v, delta: float):
    """delta^2 * (sqrt(1 + (v/delta)^2) - 1), elementwise.

    Plain floats and arrays return plain numpy values; a :class:`Tensor` returns a
    differentiable :class:`Tensor`.
    """
    if not delta > 0:
        raise LossConfigError(f"delta must be positive, got {delta}")
    if not isinstance(v, Tensor):
        v = np.asarray(v, dtype=np.float64)
        return delta * delta * (np.sqrt(1 + (v / delta) ** 2) - 1)
    root = np.sqrt(1 + (v.data / delta) ** 2)
    out = (delta * delta * (root - 1)).astype(v.dtype)
    return make_op(out, (v,), lambda g: (g * v.data / root,), "pseudo_huber")


def adversarial_loss(d_real, d_fake, delta: float = 0.5):
    """Pseudo-Huber of the gap between the real and fake discriminator scores.

    Pass ``d_real`` as a constant (detached) score so the generator update only
    flows through ``d_fake``.
    """
    if isinstance(d_real, Tensor) or isinstance(d_fake, Tensor):
        dtype = d_fake.dtype if isinstance(d_fake, Tensor) else d_real.dtype
        return pseudo_huber(sub(_as_tensor(d_real, dtype), _as_tensor(d_fake, dtype)), delta)
    return float(pseudo_huber(float(d_real) - float(d_fake), delta))


def _check_scores(patches, label):
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{label} scores contain non-finite values")
    if np.any(data <= 0) or np.any(data >= 1):
        raise DomainError(f"{label} scores must lie strictly inside (0, 1)")


def discriminator_loss(real_patches=None, fake_patches=None):
    """Binary cross-entropy: -mean log d(real) - mean log(1 - d(fake)).

    Either half may be omitted so the two halves can be applied one after the
    other.  Tensors in give a differentiable scalar out; arrays give a float.
    """
    if real_patches is None and fake_patches is None:
        raise ValueError("need real or fake patches")
    terms = []
    if real_patches is not None:
        _check_scores(real_patches, "real")
        terms.append(("real", real_patches))
    if fake_patches is not None:
        _check_scores(fake_patches, "fake")
        terms.append(("fake", fake_patches))

    if not any(isinstance(p, Tensor) for _, p in terms):
        total = 0.0
        for kind, p in terms:
            p = np.asarray(p, dtype=np.float64)
            total -= np.log(p).mean() if kind == "real" else np.log1p(-p).mean()
        return float(total)

    total = None
    for kind, p in terms:
        p = _as_tensor(p)
        term = log(p) if kind == "real" else log(sub(1.0, p))
        term = mean(term) * -1.0
        total = term if total is None else total + term
    return total
