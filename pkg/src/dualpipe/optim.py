"""Adam with bias correction and the tri-stage learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class OptimizerError(ValueError):
    pass


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates, keyed like the params."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One Adam update over every parameter that has a gradient.

    Parameters without a .grad this step are skipped (their moments stay).
    Mutates params in place and advances state.step.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise OptimizerError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass(frozen=True)
class TriStageSchedule:
    """Linear warmup to peak over the first 10% of steps, constant for the
    next 40%, linear decay to zero over the final 50%."""
    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.10
    const_frac: float = 0.40
    decay_frac: float = 0.50

    def __post_init__(self):
        if self.peak_lr <= 0 or self.total_steps <= 0:
            raise OptimizerError("peak_lr and total_steps must be positive")
        if abs(self.warmup_frac + self.const_frac + self.decay_frac - 1.0) > 1e-9:
            raise OptimizerError("schedule fractions must sum to 1")


def lr_at(schedule: TriStageSchedule, step: float) -> float:
    """Learning rate at a (possibly fractional) step in [0, total_steps]."""
    total = schedule.total_steps
    if step < 0 or step > total:
        raise OptimizerError(f"step {step} outside [0, {total}]")
    warm_end = schedule.warmup_frac * total
    const_end = (schedule.warmup_frac + schedule.const_frac) * total
    if step < warm_end:
        return schedule.peak_lr * step / warm_end
    if step <= const_end:
        return schedule.peak_lr
    return schedule.peak_lr * (total - step) / (total - const_end)
