"""Temporal alignment: apparent-motion estimation and monotone trajectory resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from .episode import Episode
from .errors import DomainError, FormatError, InsufficientData, RangeError

STRIDE_MIN, STRIDE_MAX = 0.25, 4.0
FLOW_BLOCK = 16
FLOW_RADIUS = 8
FLOW_LEVELS = 3


# --- monotone cubic Hermite interpolation ----------------------------------


def _edge_slope(h0, h1, d0, d1):
    # three-point end derivative, clamped to keep the end segment monotone
    s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    s = np.where(np.sign(s) != np.sign(d0), 0.0, s)
    clamp = (np.sign(d0) != np.sign(d1)) & (np.abs(s) > np.abs(3 * d0))
    return np.where(clamp, 3 * d0, s)


def pchip_slopes(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Knot derivatives of the shape-preserving piecewise cubic Hermite interpolant.

    Interior derivatives are a weighted harmonic mean of the neighbouring
    secants and vanish at local extrema, which is what keeps every segment
    monotone between its knots. ``y`` may carry extra trailing axes.
    """
    h = np.diff(x)
    extra = (slice(None),) + (None,) * (y.ndim - 1)
    hk = h[extra]
    delta = np.diff(y, axis=0) / hk
    n = x.size
    d = np.zeros_like(y, dtype=np.float64)
    if n == 2:
        d[0] = d[1] = delta[0]
        return d
    h0, h1 = hk[:-1], hk[1:]
    w1 = 2 * h1 + h0
    w2 = h1 + 2 * h0
    dl, dr = delta[:-1], delta[1:]
    same = (np.sign(dl) * np.sign(dr)) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        harm = (w1 + w2) / (w1 / dl + w2 / dr)
    d[1:-1] = np.where(same, harm, 0.0)
    d[0] = _edge_slope(hk[0], hk[1], delta[0], delta[1])
    d[-1] = _edge_slope(hk[-1], hk[-2], delta[-1], delta[-2])
    return d


def pchip_eval(knot_x, knot_y, query) -> np.ndarray:
    """Evaluate the monotone cubic Hermite interpolant of the knots at ``query``.

    Parameters
    ----------
    knot_x : array of shape (n,)
        Strictly increasing knot positions, n >= 2.
    knot_y : array of shape (n,) or (n, D)
        Knot values; each column is interpolated independently.
    query : array of shape (m,)
        Positions inside ``[knot_x[0], knot_x[-1]]``.

    Returns
    -------
    ndarray of shape (m,) or (m, D)
    """
    x = np.asarray(knot_x, dtype=np.float64)
    y = np.asarray(knot_y, dtype=np.float64)
    q = np.atleast_1d(np.asarray(query, dtype=np.float64))
    if x.ndim != 1 or x.size < 2:
        raise DomainError("need at least two knots")
    if y.shape[0] != x.size:
        raise DomainError(f"{x.size} knot positions but {y.shape[0]} knot values")
    if not np.all(np.diff(x) > 0):
        raise DomainError("knot positions must be strictly increasing")
    if q.size and (q.min() < x[0] or q.max() > x[-1]):
        raise RangeError(f"queries must lie in [{x[0]}, {x[-1]}]")
    d = pchip_slopes(x, y)
    i = np.clip(np.searchsorted(x, q, side="right") - 1, 0, x.size - 2)
    h = x[i + 1] - x[i]
    t = (q - x[i]) / h
    extra = (slice(None),) + (None,) * (y.ndim - 1)
    t, h = t[extra], h[extra]
    t2, t3 = t * t, t * t * t
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + t
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    return h00 * y[i] + h10 * h * d[i] + h01 * y[i + 1] + h11 * h * d[i + 1]


# --- apparent motion -------------------------------------------------------


@dataclass(frozen=True)
class FlowEstimate:
    mean_magnitude: float
    per_pair_magnitudes: list[float] = field(default_factory=list)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def _pyramid(img: np.ndarray) -> list[np.ndarray]:
    levels = [img]
    while len(levels) < FLOW_LEVELS:
        nxt = _downsample(levels[-1])
        if min(nxt.shape) < FLOW_BLOCK + 2 * FLOW_RADIUS:
            break
        levels.append(nxt)
    return levels


def _block_grid(shape) -> tuple[np.ndarray, np.ndarray]:
    """Top-left corners of a centred grid of blocks kept FLOW_RADIUS px from the border."""
    out = []
    for size in shape:
        n = max(0, (size - 2 * FLOW_RADIUS) // FLOW_BLOCK)
        start = (size - FLOW_BLOCK * n) // 2
        out.append(start + FLOW_BLOCK * np.arange(n))
    return out[0], out[1]


def _match_level(a: np.ndarray, b: np.ndarray, init: np.ndarray) -> np.ndarray:
    """SAD block search of ``a``'s blocks in ``b`` within +-FLOW_RADIUS of ``init``."""
    ys, xs = _block_grid(a.shape)
    h, w = b.shape
    B, R = FLOW_BLOCK, FLOW_RADIUS
    disp = np.zeros((ys.size, xs.size, 2), dtype=np.int64)
    for bi, y in enumerate(ys):
        for bj, x in enumerate(xs):
            iy, ix = init[bi, bj]
            ylo, yhi = max(0, y + iy - R), min(h - B, y + iy + R)
            xlo, xhi = max(0, x + ix - R), min(w - B, x + ix + R)
            if ylo > yhi or xlo > xhi:
                disp[bi, bj] = init[bi, bj]
                continue
            region = b[ylo: yhi + B, xlo: xhi + B]
            windows = sliding_window_view(region, (B, B))
            cost = np.abs(windows - a[y: y + B, x: x + B]).sum(axis=(2, 3))
            dy = np.arange(ylo, yhi + 1) - y
            dx = np.arange(xlo, xhi + 1) - x
            dist = dy[:, None] ** 2 + dx[None, :] ** 2
            # ties go to the smallest displacement, then row-major order
            tied = cost == cost.min()
            k = np.argmin(np.where(tied, dist, np.iinfo(np.int64).max))
            r, c = np.unravel_index(k, cost.shape)
            disp[bi, bj] = (dy[r], dx[c])
    return disp


def _propagate(coarse: np.ndarray, coarse_shape, fine_shape) -> np.ndarray:
    """Initial fine-level displacements: twice the coarse block nearest each fine block centre."""
    cys, cxs = _block_grid(coarse_shape)
    fys, fxs = _block_grid(fine_shape)
    init = np.zeros((fys.size, fxs.size, 2), dtype=np.int64)
    if coarse.size == 0:
        return init
    half = FLOW_BLOCK / 2
    ci = np.abs((fys[:, None] + half) / 2 - (cys[None, :] + half)).argmin(axis=1)
    cj = np.abs((fxs[:, None] + half) / 2 - (cxs[None, :] + half)).argmin(axis=1)
    return 2 * coarse[ci[:, None], cj[None, :]]


def block_flow(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Coarse-to-fine integer block displacements from ``prev`` to ``nxt``.

    Returns an array of shape (rows, cols, 2) holding (dy, dx) per finest
    level block.
    """
    pa = _pyramid(np.asarray(prev, dtype=np.float64))
    pb = _pyramid(np.asarray(nxt, dtype=np.float64))
    disp = None
    for level in range(len(pa) - 1, -1, -1):
        ys, xs = _block_grid(pa[level].shape)
        if disp is None:
            init = np.zeros((ys.size, xs.size, 2), dtype=np.int64)
        else:
            init = _propagate(disp, pa[level + 1].shape, pa[level].shape)
        disp = _match_level(pa[level], pb[level], init)
    return disp


def mean_flow_magnitude(frames: Sequence[np.ndarray]) -> FlowEstimate:
    """Mean block displacement magnitude (px/frame) over consecutive frame pairs.

    Uses up to three pyramid levels of 16x16 SAD block matching with a
    +-8 px search per level. Deterministic.
    """
    if len(frames) < 2:
        raise InsufficientData("flow needs at least two frames")
    shape = np.asarray(frames[0]).shape
    if len(shape) != 2 or min(shape) < 2 * FLOW_BLOCK:
        raise FormatError(f"flow needs 2-D frames of at least {2 * FLOW_BLOCK}x{2 * FLOW_BLOCK}, got {shape}")
    mags = []
    for a, b in zip(frames[:-1], frames[1:]):
        if np.asarray(b).shape != shape:
            raise FormatError(f"frame shape {np.asarray(b).shape} differs from {shape}")
        d = block_flow(a, b)
        mags.append(float(np.hypot(d[..., 0], d[..., 1]).mean()))
    return FlowEstimate(mean_magnitude=float(np.mean(mags)), per_pair_magnitudes=mags)


def alignment_factor(dataset_flow: float, reference_flow: float) -> tuple[float, bool]:
    """Resampling stride that brings a dataset's apparent speed to the reference.

    Returns ``(stride, degenerate)``; ``degenerate`` is set when the dataset
    shows no motion at all, in which case the stride is the upper clamp.
    """
    if not reference_flow > 0:
        raise DomainError("reference_flow must be positive")
    if not dataset_flow > 0:
        return STRIDE_MAX, True
    f = reference_flow / dataset_flow
    return float(min(STRIDE_MAX, max(STRIDE_MIN, f))), False


# --- resampling ------------------------------------------------------------


def query_times(T: int, f: float) -> np.ndarray:
    """Source-time positions ``j * f`` for ``j = 0 .. floor((T-1)/f)``."""
    M = int(math.floor((T - 1) / f + 1e-9)) + 1
    return np.minimum(np.arange(M) * f, T - 1)


def _check_stride(f):
    if not STRIDE_MIN <= f <= STRIDE_MAX:
        raise DomainError(f"stride {f} outside [{STRIDE_MIN}, {STRIDE_MAX}]")


def _renormalize(out: np.ndarray, quat_columns) -> np.ndarray:
    for cols in quat_columns or ():
        cols = list(cols)
        norm = np.linalg.norm(out[:, cols], axis=1, keepdims=True)
        out[:, cols] = np.divide(out[:, cols], norm, out=out[:, cols], where=norm > 0)
    return out


def resample_trajectory(traj, f: float, quat_columns=None) -> np.ndarray:
    """Resample a (T, D) trajectory at stride ``f`` with monotone cubic interpolation.

    ``f < 1`` densifies, ``f > 1`` thins. Columns listed in ``quat_columns``
    (groups of four) are renormalized to unit length afterwards.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 1:
        traj = traj[:, None]
    T = traj.shape[0]
    if T < 2:
        raise InsufficientData(f"resampling needs T >= 2, got {T}")
    _check_stride(f)
    out = pchip_eval(np.arange(T, dtype=np.float64), traj, query_times(T, f))
    return _renormalize(out, quat_columns)


def resample_deltas(deltas, f: float) -> np.ndarray:
    """Resample per-step increments so that they still integrate to the same path."""
    deltas = np.asarray(deltas, dtype=np.float64)
    T = deltas.shape[0]
    path = np.vstack([np.zeros((1, deltas.shape[1])), np.cumsum(deltas, axis=0)])
    q = query_times(T, f)
    knots = np.arange(T + 1, dtype=np.float64)
    start = pchip_eval(knots, path, q)
    end = pchip_eval(knots, path, np.minimum(q + f, T))
    return end - start


def resample_episode(ep: Episode, f: float, quat_columns=None) -> Episode:
    """Resample states, actions and frames at stride ``f``; fps scales by ``1/f``.

    Frames are taken from the nearest source step.
    """
    if ep.T < 2:
        raise InsufficientData(f"resampling needs T >= 2, got {ep.T}")
    _check_stride(f)
    q = query_times(ep.T, f)
    states = resample_trajectory(ep.states, f)
    if ep.action_semantics == "delta":
        actions = resample_deltas(ep.actions, f)
    else:
        actions = resample_trajectory(ep.actions, f, quat_columns)
    nearest = np.clip(np.floor(q + 0.5).astype(int), 0, ep.T - 1)
    cameras = {name: [stream[i] for i in nearest if i < len(stream)] for name, stream in ep.cameras.items()}
    meta = dict(ep.metadata)
    meta["resample_stride"] = float(f) * float(meta.get("resample_stride", 1.0))
    return ep.evolve(states=states, actions=actions, cameras=cameras, fps=ep.fps / f, metadata=meta)


def sample_speed_factor(rng: np.random.Generator, low: float = 0.5, high: float = 2.0) -> float:
    """Draw an action speed factor log-uniformly from ``[low, high]``; stride is its inverse."""
    return float(np.exp(rng.uniform(np.log(low), np.log(high))))


class TrajectoryResampler(TransformerMixin, BaseEstimator):
    """Stateless transformer resampling a (T, D) trajectory at a fixed stride.

    Parameters
    ----------
    stride : float
        Source steps per output step, in [0.25, 4].
    quat_columns : list of 4-tuples, optional
        Column groups renormalized to unit quaternions after interpolation.
    """

    def __init__(self, stride: float = 1.0, quat_columns=None):
        self.stride = stride
        self.quat_columns = quat_columns

    def fit(self, X, y=None):
        _check_stride(self.stride)
        self.n_features_in_ = np.asarray(X).reshape(len(X), -1).shape[1]
        return self

    def transform(self, X):
        return resample_trajectory(X, self.stride, self.quat_columns)
