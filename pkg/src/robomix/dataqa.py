"""Episode quality scores, dataset diversity metrics and accept/reject verdicts."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .episode import Episode, FilterConfig, motion_activity, validate_episode
from .errors import FrameTooSmall, InsufficientData, RobomixError, Undecidable

BLOCK = 4
POOL = 16
MIN_FRAME = BLOCK * POOL

FeatureExtractor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class QaConfig:
    tremble_max: float = 0.5
    sharpness_min: float = 5.0
    smoothing_sigma: float = 2.0
    frame_sample_budget: int = 16
    gripper_pattern: tuple[str, ...] = ()
    gripper_lo: float = 0.3
    gripper_hi: float = 0.7
    # action column carrying the gripper command, either one index for every
    # embodiment or a mapping embodiment_id -> index; None disables the check
    gripper_action_index: int | dict[str, int] | None = None

    def __post_init__(self):
        if not self.gripper_lo < self.gripper_hi:
            raise ValueError("gripper_lo must be below gripper_hi")
        if not self.smoothing_sigma > 0:
            raise ValueError("smoothing_sigma must be positive")
        object.__setattr__(self, "gripper_pattern", tuple(self.gripper_pattern))

    @classmethod
    def from_dict(cls, d: dict) -> "QaConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gripper_pattern"] = list(self.gripper_pattern)
        return d


@dataclass
class QualityReport:
    episode_id: str
    tremble: float
    sharpness: float
    visual_diversity: float
    state_diversity: float
    motion: float
    gripper_pattern_ok: bool
    accepted: bool
    reject_reasons: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "QualityReport":
        return cls.from_dict(json.loads(text))


def tremble_score(states, smoothing_sigma: float = 2.0) -> float:
    """Normalized discrepancy between velocities and their Gaussian-smoothed version.

    Velocities are forward differences. Smoothing runs along time with a
    kernel truncated at 4 sigma and reflect padding. Each (t, d) term is
    ``|v_smooth - v| / (|v_smooth| + |v|)``, with 0/0 taken as 0, and the
    result is the flat mean of all terms, so it lies in [0, 1].
    """
    s = np.asarray(states, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 3:
        raise InsufficientData(f"tremble needs T >= 3, got {s.shape[0]}")
    vel = np.diff(s, axis=0)
    smooth = gaussian_filter1d(vel, smoothing_sigma, axis=0, mode="reflect", truncate=4.0)
    num = np.abs(smooth - vel)
    den = np.abs(smooth) + np.abs(vel)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(ratio.mean())


def laplacian_map(frame: np.ndarray) -> np.ndarray:
    """4-neighbour Laplacian evaluated on interior pixels; the 1-px border is 0."""
    img = np.asarray(frame, dtype=np.float64)
    lap = np.zeros_like(img)
    lap[1:-1, 1:-1] = (
        img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:] - 4.0 * img[1:-1, 1:-1]
    )
    return lap


def _pool(a: np.ndarray, k: int) -> np.ndarray:
    """View ``a`` as disjoint k x k tiles, dropping any ragged remainder."""
    h, w = (a.shape[0] // k) * k, (a.shape[1] // k) * k
    return a[:h, :w].reshape(h // k, k, w // k, k).swapaxes(1, 2)


def frame_sharpness(frame: np.ndarray) -> float:
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.shape[0] < MIN_FRAME or frame.shape[1] < MIN_FRAME:
        raise FrameTooSmall(f"sharpness needs frames of at least {MIN_FRAME}x{MIN_FRAME}, got {frame.shape}")
    block_std = _pool(laplacian_map(frame), BLOCK).std(axis=(2, 3))
    regions = _pool(block_std, POOL).max(axis=(2, 3))
    return float(np.median(regions))


def sample_indices(n: int, budget: int) -> np.ndarray:
    """At most ``budget`` evenly spaced indices into a length-``n`` sequence."""
    if n <= 0:
        return np.zeros(0, dtype=int)
    k = max(1, min(n, int(budget)))
    return np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))


def sharpness_score(frames: Sequence[np.ndarray], frame_sample_budget: int = 16) -> float:
    """Median over sampled frames of the per-frame region sharpness.

    A frame's score is the median, over 64x64-pixel regions, of the maximum
    Laplacian standard deviation among the region's 4x4 blocks. Intensities
    stay on the native 0-255 scale.
    """
    if len(frames) == 0:
        raise InsufficientData("no frames to score")
    idx = sample_indices(len(frames), frame_sample_budget)
    return float(np.median([frame_sharpness(frames[i]) for i in idx]))


class GridFeatureExtractor:
    """Cheap stand-in for a learned feature map.

    Splits a frame into a ``grid x grid`` array of cells and returns, per
    cell, the mean and standard deviation of intensity scaled to [0, 1].
    The output has shape ``(grid * grid, 2)``.
    """

    def __init__(self, grid: int = 8):
        self.grid = grid

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        img = np.asarray(frame, dtype=np.float64) / 255.0
        feats = []
        for band in np.array_split(img, self.grid, axis=0):
            for cell in np.array_split(band, self.grid, axis=1):
                feats.append((cell.mean(), cell.std()))
        return np.asarray(feats)


def visual_diversity_frames(frames: Sequence[np.ndarray], extractor: FeatureExtractor | None = None) -> float:
    """Feature-dimension mean of the temporal std of spatially pooled features."""
    if len(frames) < 2:
        raise InsufficientData(f"visual diversity needs at least 2 frames, got {len(frames)}")
    extractor = extractor or GridFeatureExtractor()
    pooled = np.stack([np.asarray(extractor(fr), dtype=np.float64).mean(axis=0) for fr in frames])
    return float(pooled.std(axis=0).mean())


def visual_diversity(ep: Episode, extractor: FeatureExtractor | None = None, camera: str | None = None) -> float:
    """D_vis for one episode; with several cameras the per-camera values are averaged."""
    if ep.T < 2:
        raise InsufficientData(f"visual diversity needs T >= 2, got {ep.T}")
    names = [camera] if camera is not None else list(ep.cameras)
    if not names:
        raise InsufficientData("episode has no camera streams")
    return float(np.mean([visual_diversity_frames(ep.cameras[n], extractor) for n in names]))


def state_diversity(states) -> float:
    """Square root of the trace of the population covariance of the rows."""
    s = np.asarray(states, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 2:
        raise InsufficientData(f"state diversity needs T >= 2, got {s.shape[0]}")
    return float(np.sqrt(s.var(axis=0).sum()))


def binarize_gripper(channel, lo: float, hi: float) -> list[str]:
    """Hysteresis labels: ``open`` above ``hi``, ``closed`` below ``lo``, else hold."""
    if not lo < hi:
        raise ValueError("lo must be below hi")
    x = np.asarray(channel, dtype=np.float64)
    decided = np.flatnonzero((x > hi) | (x < lo))
    if decided.size == 0:
        raise Undecidable("gripper channel never crosses either threshold")
    label = "open" if x[decided[0]] > hi else "closed"
    labels = []
    for v in x:
        if v > hi:
            label = "open"
        elif v < lo:
            label = "closed"
        labels.append(label)
    return labels


def run_length(labels: Sequence[str]) -> list[str]:
    out = []
    for lab in labels:
        if not out or out[-1] != lab:
            out.append(lab)
    return out


def gripper_pattern_check(channel, lo: float, hi: float, pattern: Sequence[str]) -> bool:
    return run_length(binarize_gripper(channel, lo, hi)) == list(pattern)


def qa_episode(ep: Episode, qa: QaConfig, filt: FilterConfig,
               extractor: FeatureExtractor | None = None) -> QualityReport:
    """Run structural validation and every score, and decide acceptance.

    Score failures (too few steps, undersized frames, undecidable gripper)
    become reject reasons named ``<score>_<error>``; the score itself is
    reported as 0.
    """
    reasons = list(validate_episode(ep, filt).reasons)

    def attempt(name, fn):
        try:
            return fn()
        except RobomixError as exc:
            reasons.append(f"{name}_{_error_tag(exc)}")
            return 0.0

    tremble = attempt("tremble", lambda: tremble_score(ep.states, qa.smoothing_sigma))
    if ep.cameras:
        sharp = attempt("sharpness", lambda: float(np.median([
            sharpness_score(stream, qa.frame_sample_budget) for stream in ep.cameras.values()
        ])))
        vis = attempt("visual_diversity", lambda: visual_diversity(ep, extractor))
    else:
        sharp, vis = 0.0, 0.0
        reasons.append("sharpness_no_frames")
    sdiv = attempt("state_diversity", lambda: state_diversity(ep.states))
    motion = motion_activity(ep.states, ep.fps)

    if "tremble_insufficient_data" not in reasons and tremble > qa.tremble_max:
        reasons.append("tremble")
    if not any(r.startswith("sharpness_") for r in reasons) and sharp < qa.sharpness_min:
        reasons.append("sharpness")

    gripper_ok = True
    channel = qa.gripper_action_index
    if isinstance(channel, dict):
        channel = channel.get(ep.embodiment_id)
    if qa.gripper_pattern and channel is not None:
        try:
            gripper_ok = gripper_pattern_check(
                ep.actions[:, channel], qa.gripper_lo, qa.gripper_hi, qa.gripper_pattern
            )
        except (Undecidable, IndexError) as exc:
            gripper_ok = False
            reasons.append(f"gripper_{_error_tag(exc)}")
        else:
            if not gripper_ok:
                reasons.append("gripper_pattern")

    return QualityReport(
        episode_id=ep.id,
        tremble=tremble,
        sharpness=sharp,
        visual_diversity=vis,
        state_diversity=sdiv,
        motion=motion,
        gripper_pattern_ok=gripper_ok,
        accepted=not reasons,
        reject_reasons=reasons,
    )


def _error_tag(exc: Exception) -> str:
    tags = {
        "InsufficientData": "insufficient_data",
        "FrameTooSmall": "frame_too_small",
        "Undecidable": "undecidable",
        "IndexError": "missing_channel",
    }
    return tags.get(type(exc).__name__, "error")


def dataset_summary(episodes: Sequence[Episode], reports: Sequence[QualityReport]) -> dict:
    """Per-dataset aggregates in the spirit of a dataset-quality table.

    Datasets are keyed by ``Episode.dataset_id`` and reduced in sorted
    episode-id order so the result is reproducible. ``state_diversity`` is
    computed on the concatenated states of the accepted episodes.
    """
    by_id = {r.episode_id: r for r in reports}
    groups: dict[str, list[Episode]] = {}
    for ep in sorted(episodes, key=lambda e: e.id):
        groups.setdefault(ep.dataset_id, []).append(ep)
    out = {}
    for ds in sorted(groups):
        eps = groups[ds]
        reps = [by_id[e.id] for e in eps]
        kept = [e for e, r in zip(eps, reps) if r.accepted]
        pool = kept or eps
        all_states = [e.states for e in pool if e.state_dim == pool[0].state_dim]
        stacked = np.concatenate(all_states)
        out[ds] = {
            "episodes": len(eps),
            "accepted": len(kept),
            "hours": sum(e.T / e.fps for e in eps) / 3600.0,
            "visual_diversity": float(np.mean([r.visual_diversity for r in reps])),
            "state_diversity": state_diversity(stacked) if stacked.shape[0] >= 2 else 0.0,
            "sharpness": float(np.mean([r.sharpness for r in reps])),
            "tremble": float(np.mean([r.tremble for r in reps])),
            "motion": float(np.mean([r.motion for r in reps])),
        }
    return out
