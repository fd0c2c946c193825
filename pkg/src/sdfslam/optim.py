"""Bias-corrected moment optimizer with named parameter groups.

Each group owns references to its parameter arrays and steps them in place,
so the grid, the decoders, and every camera twist can run at their own
learning rates. PoseAdam keeps the same moment state over the 6-dim twist
increments used to left-multiply a pose. A finite-difference gradient
checker shared by the test suite lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient


@dataclass
class AdamGroup:
    """One named parameter group with its own learning rate and moments."""

    name: str
    params: list
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @staticmethod
    def create(name, params, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamGroup":
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        return AdamGroup(
            name=name,
            params=list(params),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )

    def step(self, grads: list) -> None:
        """One in-place update of every array in the group."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in group '{self.name}'")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PoseAdam:
    """Moment state over twist increments for a single pose.

    step(grad) returns the descent increment delta; the caller applies it by
    left multiplication, pose <- exp_map(delta) @ pose.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.t = 0

    def step(self, grad: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("non-finite gradient in group 'pose'")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return -self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class GradCheckRecord:
    name: str
    index: int
    analytic: float
    fd: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckRecord | None
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def check_gradients(
    f,
    named_arrays: list,
    analytic: list,
    h: float = 1e-5,
    max_per_array: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Central finite differences of f against analytic gradients.

    f is a zero-argument callable returning a scalar, closing over the arrays
    in named_arrays (perturbed in place and restored). max_per_array limits
    how many coordinates are probed per array (random subset).
    """
    worst = None
    max_rel = 0.0
    n = 0
    for (name, arr), ga in zip(named_arrays, analytic):
        flat_p = arr.reshape(-1)
        flat_g = np.asarray(ga).reshape(-1)
        idx = np.arange(flat_p.size)
        if max_per_array is not None and flat_p.size > max_per_array:
            r = rng if rng is not None else np.random.default_rng(0)
            idx = r.choice(flat_p.size, max_per_array, replace=False)
        for j in idx:
            orig = flat_p[j]
            flat_p[j] = orig + h
            fp = f()
            flat_p[j] = orig - h
            fm = f()
            flat_p[j] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(flat_g[j]), abs(fd), floor)
            rel = abs(flat_g[j] - fd) / denom
            n += 1
            if rel > max_rel:
                max_rel = rel
                worst = GradCheckRecord(name=name, index=int(j), analytic=float(flat_g[j]), fd=float(fd), rel_err=float(rel))
    return GradCheckReport(max_rel_err=float(max_rel), worst=worst, n_checked=n)
