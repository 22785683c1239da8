"""Episode data model, the EpisodePack on-disk format, and structural filters.

An EpisodePack is a directory::

    manifest.json            episode metadata and declared shapes
    states.f32               little-endian float32, row-major T x state_dim
    actions.f32              little-endian float32, row-major T x action_dim
    cameras/<name>/000000.pgm  binary PGM (P5) frames, one per step
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .errors import EpisodeIOError, FormatError

ACTION_SEMANTICS = ("absolute_target", "delta")
VALIDATION_REASONS = (
    "missing_camera",
    "missing_frames",
    "too_short",
    "too_long",
    "low_motion",
    "bad_stream_shape",
)
_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class Episode:
    """One synchronized demonstration.

    ``states`` and ``actions`` share the row count ``T``. Camera streams are
    ordered lists of 2-D uint8 frames; a stream whose length differs from
    ``T`` is representable so that validation can report it.
    """

    id: str
    embodiment_id: str
    fps: float
    instruction: str
    states: np.ndarray
    actions: np.ndarray
    cameras: dict[str, list[np.ndarray]] = field(default_factory=dict)
    reversible: bool = False
    action_semantics: str = "absolute_target"
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64, copy=True)
        actions = np.array(self.actions, dtype=np.float64, copy=True)
        if states.ndim != 2 or actions.ndim != 2:
            raise FormatError("states and actions must be 2-D matrices")
        if states.shape[0] != actions.shape[0]:
            raise FormatError(
                f"states have {states.shape[0]} rows but actions have {actions.shape[0]}"
            )
        if states.shape[0] < 1:
            raise FormatError("an episode needs at least one step")
        if not self.fps > 0:
            raise FormatError(f"fps must be positive, got {self.fps}")
        if self.action_semantics not in ACTION_SEMANTICS:
            raise FormatError(f"unknown action_semantics {self.action_semantics!r}")
        states.flags.writeable = False
        actions.flags.writeable = False
        cams = {}
        for name in sorted(self.cameras):
            frames = []
            for fr in self.cameras[name]:
                arr = np.array(fr, dtype=np.uint8, copy=True)
                arr.flags.writeable = False
                frames.append(arr)
            cams[name] = frames
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "fps", float(self.fps))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def dataset_id(self) -> str:
        return str(self.metadata.get("dataset_id", self.embodiment_id))

    def frames(self, camera: str) -> np.ndarray:
        """Stack one camera stream into a (n, H, W) uint8 array."""
        stream = self.cameras[camera]
        if not stream:
            return np.zeros((0, 0, 0), dtype=np.uint8)
        return np.stack(stream)

    def evolve(self, **changes) -> "Episode":
        return replace(self, **changes)


@dataclass(frozen=True)
class FilterConfig:
    min_length: int = 10
    max_length: int = 10_000
    required_cameras: tuple[str, ...] = ()
    motion_threshold: float = 0.0

    def __post_init__(self):
        if not 0 < self.min_length <= self.max_length:
            raise ValueError(
                f"need 0 < min_length <= max_length, got {self.min_length}, {self.max_length}"
            )
        object.__setattr__(self, "required_cameras", tuple(self.required_cameras))

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "min_length": self.min_length,
            "max_length": self.max_length,
            "required_cameras": list(self.required_cameras),
            "motion_threshold": self.motion_threshold,
        }


@dataclass(frozen=True)
class ValidationResult:
    passed: bool
    reasons: tuple[str, ...] = ()

    @classmethod
    def from_reasons(cls, reasons) -> "ValidationResult":
        reasons = tuple(reasons)
        return cls(passed=not reasons, reasons=reasons)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "reasons": list(self.reasons)}


def motion_activity(states: np.ndarray, fps: float) -> float:
    """Mean absolute per-step state change, scaled to units per second."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(states, axis=0))) * fps)


def validate_episode(ep: Episode, cfg: FilterConfig) -> ValidationResult:
    """Structural checks: cameras, stream lengths, episode length, motion."""
    reasons = []
    T = ep.T
    missing = [c for c in cfg.required_cameras if c not in ep.cameras]
    if missing:
        reasons.append("missing_camera")
    if any(len(stream) != T for stream in ep.cameras.values()):
        reasons.append("missing_frames")
    if T < cfg.min_length:
        reasons.append("too_short")
    if T > cfg.max_length:
        reasons.append("too_long")
    if motion_activity(ep.states, ep.fps) < cfg.motion_threshold:
        reasons.append("low_motion")
    for stream in ep.cameras.values():
        shapes = {fr.shape for fr in stream}
        if len(shapes) > 1 or any(len(s) != 2 for s in shapes):
            reasons.append("bad_stream_shape")
            break
    return ValidationResult.from_reasons(reasons)


# --- EpisodePack I/O -------------------------------------------------------


def _manifest(ep: Episode) -> dict:
    cams = []
    for name, stream in ep.cameras.items():
        h, w = stream[0].shape if stream else (0, 0)
        cams.append({"name": name, "width": int(w), "height": int(h)})
    m = {
        "id": ep.id,
        "embodiment_id": ep.embodiment_id,
        "fps": ep.fps,
        "instruction": ep.instruction,
        "T": ep.T,
        "state_dim": ep.state_dim,
        "action_dim": ep.action_dim,
        "cameras": cams,
        "reversible": bool(ep.reversible),
        "action_semantics": ep.action_semantics,
    }
    if ep.metadata:
        m["metadata"] = ep.metadata
    return m


def save_episode(ep: Episode, path) -> Path:
    """Write ``ep`` as an EpisodePack at ``path``.

    The pack is assembled in a sibling temp directory and renamed into place,
    so readers never observe a half-written pack. An existing pack at
    ``path`` is replaced.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        with open(tmp / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(_manifest(ep), fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")
        ep.states.astype(_F32).tofile(tmp / "states.f32")
        ep.actions.astype(_F32).tofile(tmp / "actions.f32")
        for name, stream in ep.cameras.items():
            cam_dir = tmp / "cameras" / name
            cam_dir.mkdir(parents=True)
            for i, frame in enumerate(stream):
                Image.fromarray(frame, mode="L").save(cam_dir / f"{i:06d}.pgm", format="PPM")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_matrix(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise EpisodeIOError(f"missing file {path}")
    data = np.fromfile(path, dtype=_F32)
    if data.size != rows * cols:
        raise FormatError(
            f"{path.name}: expected {rows}x{cols}={rows * cols} floats, found {data.size}"
        )
    return data.reshape(rows, cols).astype(np.float64)


def _read_pgm(path: Path, width: int, height: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise FormatError(f"{path}: not an 8-bit grayscale PGM")
            arr = np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise EpisodeIOError(f"cannot read {path}: {exc}") from exc
    if arr.shape != (height, width):
        raise FormatError(
            f"{path}: frame is {arr.shape[1]}x{arr.shape[0]}, manifest says {width}x{height}"
        )
    return arr


def is_pack(path) -> bool:
    return (Path(path) / "manifest.json").is_file()


def load_episode(path) -> Episode:
    """Read an EpisodePack directory back into an :class:`Episode`.

    Camera directories may hold fewer than ``T`` frames (validation reports
    that); frames are read in index order until the first gap.
    """
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise EpisodeIOError(f"missing file {mpath}")
    try:
        with open(mpath, encoding="utf-8") as fh:
            m = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    try:
        T, sd, ad = int(m["T"]), int(m["state_dim"]), int(m["action_dim"])
        states = _read_matrix(path / "states.f32", T, sd)
        actions = _read_matrix(path / "actions.f32", T, ad)
        cameras = {}
        for cam in m.get("cameras", []):
            cam_dir = path / "cameras" / cam["name"]
            frames = []
            i = 0
            while (cam_dir / f"{i:06d}.pgm").is_file():
                frames.append(_read_pgm(cam_dir / f"{i:06d}.pgm", cam["width"], cam["height"]))
                i += 1
            if i > T:
                raise FormatError(f"camera {cam['name']!r} holds {i} frames for T={T}")
            cameras[cam["name"]] = frames
        return Episode(
            id=m["id"],
            embodiment_id=m["embodiment_id"],
            fps=m["fps"],
            instruction=m["instruction"],
            states=states,
            actions=actions,
            cameras=cameras,
            reversible=bool(m.get("reversible", False)),
            action_semantics=m.get("action_semantics", "absolute_target"),
            metadata=m.get("metadata", {}),
        )
    except KeyError as exc:
        raise FormatError(f"{mpath}: missing field {exc.args[0]!r}") from exc


def discover_packs(root) -> list[Path]:
    """Return ``root`` itself if it is a pack, else its pack subdirectories sorted by name."""
    root = Path(root)
    if is_pack(root):
        return [root]
    if not root.is_dir():
        raise EpisodeIOError(f"no such directory {root}")
    return sorted(p for p in root.iterdir() if p.is_dir() and is_pack(p))
