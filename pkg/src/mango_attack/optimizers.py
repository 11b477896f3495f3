"""Adam / AMSGrad over the unfrozen rows of a logit matrix, and the halving schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import K

VARIANTS = ("adam", "amsgrad")


@dataclass
class OptimizerState:
    shape: tuple
    learning_rate: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    variant: str = "adam"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown optimizer variant {self.variant!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        self.shape = tuple(self.shape)
        self.reset()

    def reset(self):
        """Zero the moments and the step count; hyperparameters are kept."""
        self.first_moment = np.zeros(self.shape)
        self.second_moment = np.zeros(self.shape)
        self.second_moment_max = np.zeros(self.shape)
        self.step_count = 0
        return self

    def clear_rows(self, rows):
        for arr in (self.first_moment, self.second_moment, self.second_moment_max):
            arr[rows] = 0.0

    def step(self, theta, gradient, frozen=None):
        """In-place update of theta's unfrozen rows. Returns theta."""
        gradient = np.ascontiguousarray(gradient, dtype=np.float64)
        if theta.shape != self.shape or gradient.shape != self.shape:
            raise ValueError(f"shape mismatch: state {self.shape}, theta {theta.shape}, "
                             f"gradient {gradient.shape}")
        if not np.all(np.isfinite(gradient)):
            raise FloatingPointError("non-finite gradient entries")
        rows = np.ones(self.shape[0], dtype=bool) if frozen is None else ~np.asarray(frozen)
        self.step_count += 1
        K.adam_update(theta, gradient, self.first_moment, self.second_moment,
                      self.second_moment_max, rows, self.step_count, self.learning_rate,
                      self.beta1, self.beta2, self.epsilon, self.variant == "amsgrad")
        return theta


def step(state: OptimizerState, theta, gradient, frozen=None):
    return state.step(theta, gradient, frozen), state


def reset(state: OptimizerState) -> OptimizerState:
    return state.reset()


@dataclass(frozen=True)
class StepSchedule:
    initial_steps: int = 100

    def __post_init__(self):
        if self.initial_steps < 0:
            raise ValueError("initial_steps must be nonnegative")

    def steps_at(self, loop: int) -> int:
        if loop < 0:
            raise ValueError("loop index must be nonnegative")
        return max(1, self.initial_steps >> loop) if loop < 64 else 1


def steps_for_loop(schedule: StepSchedule, l: int) -> int:
    return schedule.steps_at(l)
