"""Scheduled dataset mixture: uniform at the start of training, target weights at the end."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError

RAMP_SHAPES = ("linear", "cosine")


@dataclass(frozen=True)
class SamplerSchedule:
    dataset_ids: tuple[str, ...]
    weights: tuple[float, ...]
    ramp_steps: int = 0
    seed: int = 0
    ramp_shape: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "dataset_ids", tuple(self.dataset_ids))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.dataset_ids) < 1 or len(self.dataset_ids) != len(self.weights):
            raise DomainError("need one positive weight per dataset id, and at least one dataset")
        if any(not w > 0 for w in self.weights):
            raise DomainError("all target weights must be positive")
        if self.ramp_steps < 0:
            raise DomainError("ramp_steps must be non-negative")
        if self.ramp_shape not in RAMP_SHAPES:
            raise DomainError(f"ramp_shape must be one of {RAMP_SHAPES}")

    @classmethod
    def from_dict(cls, d: dict, source: str = "sampler") -> "SamplerSchedule":
        try:
            return cls(
                dataset_ids=d["dataset_ids"],
                weights=d["weights"],
                ramp_steps=int(d.get("ramp_steps", 0)),
                seed=int(d.get("seed", 0)),
                ramp_shape=d.get("ramp_shape", "linear"),
            )
        except KeyError as exc:
            raise ConfigError(f"{source}: missing field {exc.args[0]!r}") from None
        except DomainError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "SamplerSchedule":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc, str(path))

    def to_dict(self) -> dict:
        return {
            "dataset_ids": list(self.dataset_ids),
            "weights": list(self.weights),
            "ramp_steps": self.ramp_steps,
            "seed": self.seed,
            "ramp_shape": self.ramp_shape,
        }

    def alpha(self, step: int) -> float:
        """Ramp position at ``step``: 0 at step 0, 1 from ``ramp_steps`` on."""
        if self.ramp_steps == 0:
            return 1.0
        x = min(1.0, max(0.0, step / self.ramp_steps))
        if self.ramp_shape == "cosine":
            return 0.5 * (1.0 - math.cos(math.pi * x))
        return x


def mixture_weights(w: Sequence[float], alpha: float) -> np.ndarray:
    """Tempered mixture ``w_i**alpha / sum_j w_j**alpha``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(~(w > 0)):
        raise DomainError("weights must be a non-empty vector of positive values")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    p = np.power(w, alpha)
    return p / p.sum()


def _generator(seed: int, step: int) -> np.random.Generator:
    # Philox is counter-based; keying the seed sequence by (seed, step) gives
    # every step its own reproducible stream.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(step)])))


def sample_plan(sched: SamplerSchedule, step: int, n_draws: int) -> np.ndarray:
    """Dataset indices for ``n_draws`` samples at training ``step``."""
    if n_draws < 1:
        raise DomainError("n_draws must be at least 1")
    p = mixture_weights(sched.weights, sched.alpha(step))
    cdf = np.cumsum(p)
    u = _generator(sched.seed, step).random(n_draws)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), p.size - 1)
