"""Offline value-learning losses and critic-gradient action refinement.

Critics are plain objects exposing ``q_value(s, a)`` and
``action_gradient(s, a)``; nothing here trains a network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import CriticError, DomainError
from .guards import gmm_log_density_grad


class Critic(Protocol):
    def q_value(self, s, a) -> float: ...

    def action_gradient(self, s, a) -> np.ndarray: ...


@dataclass(frozen=True)
class OfflineBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        arrays = {
            "states": np.atleast_2d(np.asarray(self.states, dtype=np.float64)),
            "actions": np.atleast_2d(np.asarray(self.actions, dtype=np.float64)),
            "rewards": np.asarray(self.rewards, dtype=np.float64).reshape(-1),
            "next_states": np.atleast_2d(np.asarray(self.next_states, dtype=np.float64)),
            "terminals": np.asarray(self.terminals, dtype=bool).reshape(-1),
        }
        sizes = {k: v.shape[0] for k, v in arrays.items()}
        if len(set(sizes.values())) != 1:
            raise DomainError(f"batch fields disagree on N: {sizes}")
        if not np.all(np.isfinite(arrays["rewards"])):
            raise DomainError("rewards must be finite")
        for k, v in arrays.items():
            object.__setattr__(self, k, v)

    def __len__(self):
        return self.rewards.size


@dataclass(frozen=True)
class RefineConfig:
    eta: float = 0.05
    n_steps: int = 5
    grad_floor: float = 1e-9

    def __post_init__(self):
        if self.eta < 0:
            raise DomainError("eta must be non-negative")
        if self.n_steps < 0:
            raise DomainError("n_steps must be non-negative")


def expectile_loss(u, tau: float):
    """Asymmetric squared loss ``|tau - 1(u < 0)| * u**2`` (elementwise)."""
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    out = np.abs(tau - (u < 0)) * u * u
    return float(out) if out.ndim == 0 else out


def _batched(fn, *args) -> np.ndarray:
    out = np.asarray(fn(*args), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise CriticError("value oracle returned non-finite output")
    return out


def iql_losses(batch: OfflineBatch, V: Callable, Q_target: Callable, Q: Callable,
               tau: float, gamma: float) -> tuple[float, float]:
    """Value and Q losses of implicit Q-learning on one batch.

    ``V(states)`` and the Q callables ``Q(states, actions)`` are evaluated
    on the whole batch and must return one value per row. The bootstrap
    term is dropped on terminal transitions.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    if not 0.0 <= gamma <= 1.0:
        raise DomainError("gamma must lie in [0, 1]")
    q_t = _batched(Q_target, batch.states, batch.actions)
    v = _batched(V, batch.states)
    loss_v = float(np.mean(expectile_loss(q_t - v, tau)))
    target = batch.rewards + gamma * _batched(V, batch.next_states) * (~batch.terminals)
    loss_q = float(np.mean((target - _batched(Q, batch.states, batch.actions)) ** 2))
    return loss_v, loss_q


@dataclass
class RefineStep:
    q_before: float
    q_after: float
    grad_norm: float
    steps_taken: int

    def to_dict(self) -> dict:
        return {
            "q_before": self.q_before,
            "q_after": self.q_after,
            "grad_norm": self.grad_norm,
            "steps_taken": self.steps_taken,
        }


def _q(critic, s, a, step):
    q = float(critic.q_value(s, a))
    if not np.isfinite(q):
        raise CriticError(f"critic returned non-finite Q at step {step}", step)
    return q


def _refine(critic: Critic, s, a, cfg: RefineConfig, step=None) -> tuple[np.ndarray, int, float]:
    a = np.array(a, dtype=np.float64, copy=True)
    taken, norm = 0, 0.0
    for _ in range(cfg.n_steps):
        g = np.asarray(critic.action_gradient(s, a), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise CriticError("critic returned a non-finite action gradient", step)
        norm = float(np.linalg.norm(g))
        if norm < cfg.grad_floor:
            break
        a = a + cfg.eta * g / norm
        taken += 1
    return a, taken, norm


def refine_action(critic: Critic, s, a, cfg: RefineConfig) -> np.ndarray:
    """Repeated unit-length critic-gradient ascent steps of size ``cfg.eta``.

    Stops early once the gradient norm falls below ``cfg.grad_floor``.
    """
    return _refine(critic, s, a, cfg)[0]


@dataclass
class RefinedTrajectory:
    steps: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    report: list[RefineStep] = field(default_factory=list)

    @property
    def actions(self) -> list[np.ndarray]:
        return [a for _, a in self.steps]

    def mean_q(self) -> tuple[float, float]:
        if not self.report:
            return 0.0, 0.0
        return (float(np.mean([r.q_before for r in self.report])),
                float(np.mean([r.q_after for r in self.report])))


def refine_trajectory(critic: Critic, traj: Sequence[tuple], cfg: RefineConfig) -> RefinedTrajectory:
    """Refine each (state, action) pair independently; states pass through untouched."""
    out = RefinedTrajectory()
    for i, (s, a) in enumerate(traj):
        q0 = _q(critic, s, a, i)
        new_a, taken, norm = _refine(critic, s, a, cfg, step=i)
        out.steps.append((s, new_a))
        out.report.append(RefineStep(q0, _q(critic, s, new_a, i), norm, taken))
    return out


# --- analytic critics ------------------------------------------------------


class QuadraticCritic:
    """``Q(s, a) = -scale * ||a - target(s)||^2`` with a fixed or state-dependent target."""

    def __init__(self, target, scale: float = 1.0):
        self.target = target
        self.scale = scale

    def _target(self, s):
        t = self.target(s) if callable(self.target) else self.target
        return np.asarray(t, dtype=np.float64)

    def q_value(self, s, a):
        d = np.asarray(a, dtype=np.float64) - self._target(s)
        return -self.scale * float(d @ d)

    def action_gradient(self, s, a):
        return -2.0 * self.scale * (np.asarray(a, dtype=np.float64) - self._target(s))


class GmmLogDensityCritic:
    """``Q(s, a) = log p(a)`` under a fitted mixture over actions."""

    def __init__(self, model):
        self.model = model

    def q_value(self, s, a):
        return gmm_log_density_grad(self.model, a)[0]

    def action_gradient(self, s, a):
        return gmm_log_density_grad(self.model, a)[1]


def check_critic_gradient(critic: Critic, s, a, h: float = 1e-6) -> float:
    """Max abs difference between the critic gradient and central differences."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(critic.action_gradient(s, a), dtype=np.float64)
    fd = np.empty_like(a)
    for i in range(a.size):
        e = np.zeros_like(a)
        e[i] = h
        fd[i] = (critic.q_value(s, a + e) - critic.q_value(s, a - e)) / (2 * h)
    return float(np.max(np.abs(g - fd)))
