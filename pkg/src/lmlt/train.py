"""Toy training loop: Adam with cosine-annealed learning rate, mean-L1 loss.

Also hosts the full-model finite-difference gradient check used by the
self-test and CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TrainingError
from .model import ModelConfig, WeightStore, init_weights, model_forward
from .tensor import CheckReport, Tensor, backward, fresh_tape, l1_loss, mul, no_grad, rel_err, sum_all

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.99
ADAM_EPS = 1e-8
MIN_LR = 1e-5


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = MIN_LR) -> float:
    """Cosine annealing from lr0 down to lr_min over total_steps."""
    if total_steps <= 0:
        return lr0
    floor = min(lr_min, lr0)
    t = min(step, total_steps) / total_steps
    return floor + 0.5 * (lr0 - floor) * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adam over a weight store; state keyed by parameter name."""

    def __init__(self, store: WeightStore, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def train_toy(
    cfg: ModelConfig,
    data: list[tuple[Tensor, Tensor]],
    steps: int,
    lr: float,
    seed: int,
) -> tuple[WeightStore, list[float]]:
    """Overfit (LR, HR) patch pairs; returns final weights and per-step losses.

    Deterministic for a fixed seed.  Raises TrainingError with the step
    index if the loss turns non-finite.
    """
    store = init_weights(cfg, seed)
    if steps <= 0:
        return store, []
    store.set_requires_grad(True)
    opt = Adam(store)
    losses: list[float] = []
    for step in range(steps):
        lo, hi = data[step % len(data)]
        store.zero_grads()
        with fresh_tape():
            out = model_forward(lo, store, cfg)
            loss = l1_loss(out, hi)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became non-finite at step {step}", step)
            backward(loss)
        opt.step(cosine_lr(step, steps, lr))
        losses.append(value)
    store.set_requires_grad(False)
    store.zero_grads()
    return store, losses


def smoothed(losses: list[float], window: int = 100) -> float:
    """Mean of the trailing `window` losses."""
    if not losses:
        return float("nan")
    tail = losses[-window:]
    return sum(tail) / len(tail)


# ---------------------------------------------------------------------------
# Full-model gradient check


@dataclass
class _Probe:
    name: str
    index: tuple


def gradcheck_model(
    cfg: ModelConfig | None = None,
    size: int = 16,
    seed: int = 0,
    eps: float = 1e-4,
    tol: float = 1e-3,
    max_params_per_tensor: int | None = None,
    corrupt: bool = False,
) -> CheckReport:
    """Central-difference check of every model parameter in float64.

    `corrupt` deliberately perturbs one analytic gradient (negative
    control for the CLI exit path).  `max_params_per_tensor` limits the
    probed coordinates per tensor for quick smoke runs; None checks all.
    """
    from .rng import Rng

    if cfg is None:
        cfg = ModelConfig(channels=8, blocks=1, heads=2, window=4, scale=2)
    store = init_weights(cfg, seed, dtype=np.float64)
    store.set_requires_grad(True)
    rng = Rng(seed + 1)
    x = Tensor(rng.uniforms(3 * size * size).reshape(1, 3, size, size), dtype=np.float64)
    proj = Tensor(
        rng.uniforms(3 * cfg.scale * cfg.scale * size * size, -1.0, 1.0).reshape(
            1, 3, cfg.scale * size, cfg.scale * size
        ),
        dtype=np.float64,
    )

    def loss_value() -> float:
        with no_grad():
            return sum_all(mul(model_forward(x, store, cfg), proj)).item()

    store.zero_grads()
    with fresh_tape():
        loss = sum_all(mul(model_forward(x, store, cfg), proj))
        backward(loss)

    if corrupt:
        first = store.names()[0]
        store[first].grad = store[first].grad + 0.5

    worst = 0.0
    worst_name = ""
    for name, p in store.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        count = flat.size if max_params_per_tensor is None else min(flat.size, max_params_per_tensor)
        for i in range(count):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_value()
            flat[i] = orig - eps
            dn = loss_value()
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            e = rel_err(float(gflat[i]), fd)
            if e > worst:
                worst = e
                worst_name = f"{name}[{i}]"
    store.set_requires_grad(False)
    store.zero_grads()
    return CheckReport(worst, worst_name, worst < tol, tol)
