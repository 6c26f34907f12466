"""AdaGrad and the step learning-rate schedules of the two training phases."""

from __future__ import annotations

import math
from typing import IO, Dict, Optional

import numpy as np

ADAGRAD_EPS = 1e-8

# phase -> (base rate, decay factor, decay period in full-scale iterations)
SCHEDULES = {
    "boundary": (1e-4, 2.0, 100_000),
    "fusion": (1e-3, 10.0, 50_000),
}


def lr_schedule(phase: str, iteration: int, divisor: float = 1.0, base_lr: Optional[float] = None) -> float:
    """Step-decayed learning rate.

    ``divisor`` shrinks the decay period for short runs (1000 turns the
    100K-iteration period into 100). ``base_lr`` overrides the phase's initial rate.
    """
    if phase not in SCHEDULES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {sorted(SCHEDULES)}")
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    base, factor, period = SCHEDULES[phase]
    if base_lr is not None:
        base = base_lr
    steps = math.floor(iteration / (period / divisor))
    return base * factor ** (-steps)


class AdaGrad:
    """Per-parameter AdaGrad: acc += g**2; w -= lr * g / (sqrt(acc) + eps)."""

    def __init__(self, params: Dict[str, "object"], lr: float = 1e-2, eps: float = ADAGRAD_EPS):
        self.params = params
        self.lr = lr
        self.eps = eps
        self.accumulators = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
        for name, p in self.params.items():
            acc = self.accumulators[name]
            g = p.grad
            acc += g * g
            p.data -= (lr * g / (np.sqrt(acc) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adagrad_step(params: Dict[str, object], state: AdaGrad) -> Dict[str, object]:
    """Functional form: update ``params`` in place with ``state`` and return them."""
    if state.params is not params:
        raise ValueError("optimizer state belongs to a different parameter set")
    state.step()
    return params


def format_log_line(iteration: int, lr: float, loss: float) -> str:
    # repr-style floats are locale independent and round-trip exactly
    return f"{iteration} {lr!r} {loss!r}\n"


def parse_log_line(line: str):
    it, lr, loss = line.split()
    return int(it), float(lr), float(loss)


class TrainingLog:
    """Append-only ``iteration lr loss`` text stream."""

    def __init__(self, stream: IO[str]):
        self.stream = stream

    def write(self, iteration: int, lr: float, loss: float) -> None:
        self.stream.write(format_log_line(iteration, lr, loss))
        self.stream.flush()
