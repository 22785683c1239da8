"""Synthetic episode corpora with known properties, for tests and demos.

Every generated value is a multiple of 1/1024 so that float32 storage is
lossless and state differences are exact in floating point.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .episode import Episode, save_episode

QUANTUM = 1.0 / 1024
FRAME = 64
GRIPPER_OPEN = 0.08

# embodiment id -> (state/action dims, gripper native indices, cameras, apparent speed px/frame)
EMBODIMENTS = {
    "green_humanoid": (38, (), ("head", "wrist_left", "wrist_right"), 1),
    "aloha_bimanual": (14, (12, 13), ("head", "wrist_left", "wrist_right"), 2),
    "franka_single": (8, (7,), ("head",), 3),
}
INSTRUCTIONS = {
    "green_humanoid": (
        "pick the cup from the table",
        "hand over the bottle from the left hand to the right hand",
        "wipe the table with the left hand",
    ),
    "aloha_bimanual": ("pick the sponge from the table", "place the cup on the table"),
    "franka_single": ("pick up the block", "place the block in the bin"),
}
FAULTS = (
    "missing_camera",
    "missing_frames",
    "too_short",
    "too_long",
    "low_motion",
    "tremble",
    "sharpness",
    "gripper_pattern",
)


def quantize(x):
    return np.round(np.asarray(x, dtype=np.float64) / QUANTUM) * QUANTUM


def texture(rng: np.random.Generator, size: int = 128, blur: float = 0.8) -> np.ndarray:
    """Periodic grayscale texture stretched to the full 0-255 range."""
    tex = gaussian_filter(rng.uniform(0, 255, (size, size)), blur, mode="wrap")
    tex = (tex - tex.min()) / (tex.max() - tex.min()) * 255.0
    return tex


def translating_frames(tex: np.ndarray, T: int, speed: int, size: int = FRAME) -> list[np.ndarray]:
    """Windows of a periodic texture whose content moves ``speed`` px left per frame."""
    frames = []
    for t in range(T):
        rolled = np.roll(tex, -speed * t, axis=1)
        frames.append(np.round(rolled[:size, :size]).astype(np.uint8))
    return frames


def smooth_states(rng: np.random.Generator, T: int, D: int) -> np.ndarray:
    t = np.arange(T)[:, None]
    amp = rng.uniform(0.2, 0.8, D)
    cycles = rng.uniform(0.4, 1.0, D)
    phase = rng.uniform(0, 2 * np.pi, D)
    return quantize(amp * np.sin(2 * np.pi * cycles * t / T + phase))


def gripper_profile(T: int, pattern=("open", "closed", "open")) -> np.ndarray:
    """Piecewise-constant opening per phase, softened by a 3-step moving average."""
    level = {"open": GRIPPER_OPEN, "closed": 0.0}
    bounds = np.linspace(0, T, len(pattern) + 1).round().astype(int)
    out = np.empty(T)
    for a, b, name in zip(bounds[:-1], bounds[1:], pattern):
        out[a:b] = level[name]
    padded = np.concatenate([out[:1], out, out[-1:]])
    return quantize(np.convolve(padded, np.ones(3) / 3, mode="valid"))


def actions_from_states(states: np.ndarray, semantics: str) -> np.ndarray:
    if semantics == "delta":
        a = np.zeros_like(states)
        a[:-1] = np.diff(states, axis=0)
        return a
    a = np.empty_like(states)
    a[:-1] = states[1:]
    a[-1] = states[-1]
    return a


def make_episode(embodiment_id: str, rng: np.random.Generator, *, T: int = 40, fps: float = 10.0,
                 fault: str | None = None, semantics: str = "absolute_target",
                 instruction: str | None = None, episode_id: str = "ep") -> Episode:
    """One synthetic episode; ``fault`` names the single filter it should trip."""
    D, grippers, cams, speed = EMBODIMENTS[embodiment_id]
    if fault == "too_short":
        T = 6
    elif fault == "too_long":
        T = 130
    states = smooth_states(rng, T, D)
    pattern = ("open",) if fault == "gripper_pattern" else ("open", "closed", "open")
    for g in grippers:
        states[:, g] = gripper_profile(T, pattern)
    if fault == "tremble":
        jitter = np.where(np.arange(T) % 2 == 0, 1.0, -1.0)[:, None] * 0.05
        states = quantize(states + jitter)
    actions = actions_from_states(states, semantics)
    if fault == "low_motion":
        states = np.zeros_like(states)

    blur = 3.0 if fault == "sharpness" else 0.8
    cameras = {}
    for name in cams:
        if fault == "missing_camera" and name == "head":
            continue
        frames = translating_frames(texture(rng, blur=blur), T, speed)
        if fault == "missing_frames" and name == "head":
            frames = frames[:-3]
        cameras[name] = frames
    if instruction is None:
        choices = INSTRUCTIONS[embodiment_id]
        instruction = choices[int(rng.integers(len(choices)))]
    return Episode(
        id=episode_id,
        embodiment_id=embodiment_id,
        fps=fps,
        instruction=instruction,
        states=states,
        actions=actions,
        cameras=cameras,
        action_semantics=semantics,
        metadata={"fault": fault} if fault else {},
    )


def pipeline_config() -> dict:
    """Pipeline settings tuned so that clean synthetic episodes pass every filter."""
    return {
        "filter": {"min_length": 10, "max_length": 120, "required_cameras": ["head"], "motion_threshold": 0.05},
        "qa": {
            "tremble_max": 0.45,
            "sharpness_min": 20.0,
            "smoothing_sigma": 2.0,
            "frame_sample_budget": 16,
            "gripper_pattern": ["open", "closed", "open"],
            "gripper_lo": 0.3 * GRIPPER_OPEN,
            "gripper_hi": 0.7 * GRIPPER_OPEN,
            "gripper_action_index": {"aloha_bimanual": 12, "franka_single": 7},
        },
        "augment": {},
        "sampler": "sampler.json",
        "layout": None,
        "embodiments": None,
        "reference_flow": 2.0,
        "align": {"cameras": ["head"]},
        "ood": {"K": 3, "seed": 0, "quantile": 0.005},
        "refine": {"eta": 0.05, "n_steps": 5, "grad_floor": 1e-9},
        "retarget": {"substitutions": {"left_grasp": "left_hand", "right_grasp": "right_hand"}},
    }


def make_corpus(root, n_episodes: int = 50, seed: int = 0) -> dict:
    """Write a mixed-embodiment corpus plus ``pipeline.json`` and ``sampler.json``.

    One episode per entry of :data:`FAULTS` is built to violate exactly that
    filter; the rest are clean. Returns ``{episode_id: fault or None}``.
    """
    if n_episodes < len(FAULTS):
        raise ValueError(f"need at least {len(FAULTS)} episodes to host every fault")
    root = Path(root)
    packs = root / "episodes"
    rng = np.random.default_rng(seed)
    fault_embodiment = {
        "missing_camera": "green_humanoid",
        "missing_frames": "aloha_bimanual",
        "too_short": "green_humanoid",
        "too_long": "green_humanoid",
        "low_motion": "green_humanoid",
        "tremble": "green_humanoid",
        "sharpness": "aloha_bimanual",
        "gripper_pattern": "franka_single",
    }
    fault_slots = dict(zip(rng.choice(n_episodes, len(FAULTS), replace=False).tolist(), FAULTS))
    names = sorted(EMBODIMENTS)
    truth = {}
    for i in range(n_episodes):
        fault = fault_slots.get(i)
        emb = fault_embodiment[fault] if fault else names[i % len(names)]
        semantics = "delta" if emb == "green_humanoid" and i % 2 else "absolute_target"
        ep_id = f"ep{i:03d}"
        ep = make_episode(emb, rng, T=int(rng.integers(30, 50)), fault=fault,
                          semantics=semantics, episode_id=ep_id)
        save_episode(ep, packs / ep_id)
        truth[ep_id] = fault
    cfg = pipeline_config()
    (root / "pipeline.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    sampler = {"dataset_ids": names, "weights": [0.3, 0.2, 0.5], "ramp_steps": 1000, "seed": seed}
    (root / "sampler.json").write_text(json.dumps(sampler, indent=2, sort_keys=True) + "\n")
    (root / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return truth
