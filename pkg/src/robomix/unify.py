"""Fixed 64-slot unified action space.

Native actions of each embodiment are placed into semantic slots by a
per-dimension affine map. A boolean mask records which slots the
embodiment drives; losses, noise and the inverse map only ever touch
masked slots.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .episode import Episode
from .errors import ConfigError, DescriptorError, DimError, LayoutError, MaskError, RetargetError

N_SLOTS = 64
GROUPS = (
    "left_arm", "right_arm", "left_grasp", "right_grasp", "left_hand", "right_hand",
    "left_ee", "right_ee", "torso", "head", "base", "reserved",
)
END_EFFECTORS = ("gripper", "dex_hand")
CONTROL_TYPES = ("joint", "cartesian")
BASE_TYPES = ("mobile", "static")

LAYOUT_SCHEMA = {
    "type": "object",
    "required": ["slots"],
    "properties": {
        "version": {"type": "string"},
        "quaternion_slots": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
        },
        "slots": {
            "type": "array",
            "minItems": N_SLOTS,
            "maxItems": N_SLOTS,
            "items": {
                "type": "object",
                "required": ["index", "semantic_id", "unit", "group", "mirror_partner", "mirror_sign"],
                "properties": {
                    "index": {"type": "integer", "minimum": 0, "maximum": N_SLOTS - 1},
                    "semantic_id": {"type": "string", "minLength": 1},
                    "unit": {"type": "string"},
                    "group": {"enum": list(GROUPS)},
                    "mirror_partner": {"type": "integer", "minimum": 0, "maximum": N_SLOTS - 1},
                    "mirror_sign": {"enum": [1, -1]},
                },
            },
        },
    },
}

DESCRIPTOR_SCHEMA = {
    "type": "object",
    "required": ["embodiment_id", "dims", "prompt"],
    "properties": {
        "embodiment_id": {"type": "string", "minLength": 1},
        "dims": {"$ref": "#/definitions/dims"},
        "state_dims": {"$ref": "#/definitions/dims"},
        "prompt": {
            "type": "object",
            "required": ["arms", "hands", "end_effector", "ctrl", "base"],
            "properties": {
                "arms": {"type": "integer", "minimum": 0},
                "hands": {"type": "integer", "minimum": 0},
                "end_effector": {"enum": list(END_EFFECTORS)},
                "ctrl": {"enum": list(CONTROL_TYPES)},
                "base": {"enum": list(BASE_TYPES)},
            },
        },
    },
    "definitions": {
        "dims": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["native_index", "slot_index"],
                "properties": {
                    "native_index": {"type": "integer", "minimum": 0},
                    "slot_index": {"type": "integer"},
                    "scale": {"type": "number", "not": {"const": 0}},
                    "offset": {"type": "number"},
                },
            },
        }
    },
}


def _schema_check(doc, schema, source):
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(schema).iter_errors(doc))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{source}: {where}: {err.message}")


# --- layout ----------------------------------------------------------------


@dataclass(frozen=True)
class Slot:
    index: int
    semantic_id: str
    unit: str
    group: str
    mirror_partner: int
    mirror_sign: int


@dataclass(frozen=True)
class UnifiedLayout:
    slots: tuple[Slot, ...]
    quaternion_slots: tuple[tuple[int, ...], ...] = ()
    version: str = "1.0"

    def __post_init__(self):
        slots = tuple(sorted(self.slots, key=lambda s: s.index))
        if [s.index for s in slots] != list(range(N_SLOTS)):
            raise LayoutError("layout must define each of the 64 slot indices exactly once")
        ids = [s.semantic_id for s in slots]
        if len(set(ids)) != N_SLOTS:
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise LayoutError(f"duplicate semantic_id(s): {dup}")
        for s in slots:
            partner = slots[s.mirror_partner]
            if partner.mirror_partner != s.index:
                raise LayoutError(f"slots[{s.index}].mirror_partner is not an involution")
            if partner.mirror_sign != s.mirror_sign:
                raise LayoutError(
                    f"slots[{s.index}] and its partner {partner.index} disagree on mirror_sign"
                )
        object.__setattr__(self, "slots", slots)
        object.__setattr__(self, "quaternion_slots", tuple(tuple(q) for q in self.quaternion_slots))

    @classmethod
    def from_dict(cls, doc: dict, source: str = "layout") -> "UnifiedLayout":
        _schema_check(doc, LAYOUT_SCHEMA, source)
        try:
            return cls(
                slots=tuple(Slot(**s) for s in doc["slots"]),
                quaternion_slots=doc.get("quaternion_slots", ()),
                version=doc.get("version", "1.0"),
            )
        except LayoutError as exc:
            raise LayoutError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "UnifiedLayout":
        path = Path(path)
        return cls.from_dict(_read_json(path), str(path))

    @classmethod
    def default(cls) -> "UnifiedLayout":
        text = resources.files("robomix.data").joinpath("layout.json").read_text()
        return cls.from_dict(json.loads(text), "robomix/data/layout.json")

    @property
    def partner(self) -> np.ndarray:
        return np.array([s.mirror_partner for s in self.slots])

    @property
    def sign(self) -> np.ndarray:
        return np.array([s.mirror_sign for s in self.slots], dtype=np.float64)

    def slots_in(self, group: str) -> list[int]:
        return [s.index for s in self.slots if s.group == group]

    def index_of(self, semantic_id: str) -> int:
        for s in self.slots:
            if s.semantic_id == semantic_id:
                return s.index
        raise KeyError(semantic_id)

    def mirror(self, values: np.ndarray) -> np.ndarray:
        """Move each slot to its partner and apply the partner sign (last axis)."""
        values = np.asarray(values, dtype=np.float64)
        out = np.empty_like(values)
        out[..., self.partner] = values * self.sign
        return out


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc


# --- embodiment descriptors ------------------------------------------------


@dataclass(frozen=True)
class DimMap:
    native_index: int
    slot_index: int
    scale: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class PromptFields:
    arms: int
    hands: int
    end_effector: str
    ctrl: str
    base: str

    def __post_init__(self):
        if self.end_effector not in END_EFFECTORS:
            raise DescriptorError(f"end_effector must be one of {END_EFFECTORS}")
        if self.ctrl not in CONTROL_TYPES:
            raise DescriptorError(f"ctrl must be one of {CONTROL_TYPES}")
        if self.base not in BASE_TYPES:
            raise DescriptorError(f"base must be one of {BASE_TYPES}")


def _check_dims(dims: Sequence[DimMap], what: str) -> tuple[DimMap, ...]:
    dims = tuple(sorted(dims, key=lambda d: d.native_index))
    natives = [d.native_index for d in dims]
    if natives != list(range(len(dims))):
        raise DescriptorError(f"{what}: native indices must be unique and cover 0..{len(dims) - 1}")
    seen = {}
    for pos, d in enumerate(dims):
        if not 0 <= d.slot_index < N_SLOTS:
            raise DescriptorError(f"{what}[{pos}].slot_index: {d.slot_index} outside 0..{N_SLOTS - 1}")
        if d.slot_index in seen:
            raise DescriptorError(
                f"{what}: native dims {seen[d.slot_index]} and {d.native_index} both map to slot {d.slot_index}"
            )
        if d.scale == 0 or not np.isfinite(d.scale) or not np.isfinite(d.offset):
            raise DescriptorError(f"{what}[{pos}]: scale must be finite and non-zero")
        seen[d.slot_index] = d.native_index
    return dims


@dataclass(frozen=True)
class EmbodimentDescriptor:
    """Per-robot affine placement of native dimensions into unified slots.

    ``state_dims`` optionally describes proprioceptive channels; when absent
    the state vector is assumed to share the action layout.
    """

    embodiment_id: str
    dims: tuple[DimMap, ...]
    prompt: PromptFields
    state_dims: tuple[DimMap, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims, "dims"))
        if self.state_dims is not None:
            object.__setattr__(self, "state_dims", _check_dims(self.state_dims, "state_dims"))

    @classmethod
    def from_dict(cls, doc: dict, source: str = "descriptor") -> "EmbodimentDescriptor":
        _schema_check(doc, DESCRIPTOR_SCHEMA, source)
        try:
            state = doc.get("state_dims")
            return cls(
                embodiment_id=doc["embodiment_id"],
                dims=tuple(DimMap(**d) for d in doc["dims"]),
                prompt=PromptFields(**doc["prompt"]),
                state_dims=None if state is None else tuple(DimMap(**d) for d in state),
            )
        except DescriptorError as exc:
            raise DescriptorError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "EmbodimentDescriptor":
        path = Path(path)
        return cls.from_dict(_read_json(path), str(path))

    def to_dict(self) -> dict:
        def dims(ds):
            return [
                {"native_index": d.native_index, "slot_index": d.slot_index, "scale": d.scale, "offset": d.offset}
                for d in ds
            ]

        doc = {
            "embodiment_id": self.embodiment_id,
            "dims": dims(self.dims),
            "prompt": {
                "arms": self.prompt.arms,
                "hands": self.prompt.hands,
                "end_effector": self.prompt.end_effector,
                "ctrl": self.prompt.ctrl,
                "base": self.prompt.base,
            },
        }
        if self.state_dims is not None:
            doc["state_dims"] = dims(self.state_dims)
        return doc

    @property
    def k(self) -> int:
        return len(self.dims)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(N_SLOTS, dtype=bool)
        m[[d.slot_index for d in self.dims]] = True
        return m

    def for_states(self) -> "EmbodimentDescriptor":
        """Descriptor view that maps state channels instead of actions."""
        if self.state_dims is None:
            return self
        return EmbodimentDescriptor(self.embodiment_id, self.state_dims, self.prompt)

    def affine(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(slot index, scale, offset) arrays ordered by native index."""
        slots = np.array([d.slot_index for d in self.dims], dtype=int)
        scale = np.array([d.scale for d in self.dims], dtype=np.float64)
        offset = np.array([d.offset for d in self.dims], dtype=np.float64)
        return slots, scale, offset


def load_embodiments(directory) -> dict[str, EmbodimentDescriptor]:
    out = {}
    for path in sorted(Path(directory).glob("*.json")):
        desc = EmbodimentDescriptor.load(path)
        out[desc.embodiment_id] = desc
    return out


def default_embodiments() -> dict[str, EmbodimentDescriptor]:
    out = {}
    folder = resources.files("robomix.data").joinpath("embodiments")
    for entry in sorted(folder.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            desc = EmbodimentDescriptor.from_dict(json.loads(entry.read_text()), entry.name)
            out[desc.embodiment_id] = desc
    return out


# --- mapping ---------------------------------------------------------------


@dataclass(frozen=True)
class UnifiedAction:
    values: np.ndarray
    mask: np.ndarray


def map_to_unified(a, desc: EmbodimentDescriptor) -> UnifiedAction:
    """Place native values into unified slots; accepts a vector or a (T, k) matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != desc.k:
        raise DimError(f"{desc.embodiment_id} expects {desc.k} native dims, got {a.shape[-1]}")
    slots, scale, offset = desc.affine()
    values = np.zeros(a.shape[:-1] + (N_SLOTS,))
    values[..., slots] = scale * a + offset
    return UnifiedAction(values=values, mask=desc.mask)


def map_from_unified(u: UnifiedAction, desc: EmbodimentDescriptor) -> np.ndarray:
    """Invert the affine map on the embodiment's own slots, in native order."""
    missing = desc.mask & ~np.asarray(u.mask, dtype=bool)
    if missing.any():
        raise MaskError(f"unified action lacks required slots {np.flatnonzero(missing).tolist()}")
    slots, scale, offset = desc.affine()
    values = np.where(desc.mask, np.asarray(u.values, dtype=np.float64), 0.0)
    return (values[..., slots] - offset) / scale


def masked_bc_loss(pred, target, mask) -> float:
    """Mean squared error restricted to masked slots."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MaskError("mask selects no slots")
    diff = np.asarray(pred, dtype=np.float64)[..., mask] - np.asarray(target, dtype=np.float64)[..., mask]
    return float(np.mean(diff**2))


def padding_loss_decomposition(pred, padded_target, mask) -> tuple[float, float]:
    """Split naive padded MSE into (valid, spurious) parts; diagnostic only."""
    mask = np.asarray(mask, dtype=bool)
    sq = (np.asarray(pred, dtype=np.float64) - np.asarray(padded_target, dtype=np.float64)) ** 2
    valid = float(np.mean(sq[..., mask])) if mask.any() else 0.0
    spurious = float(np.mean(sq[..., ~mask])) if (~mask).any() else 0.0
    return valid, spurious


# --- control prompt --------------------------------------------------------

_EE_TOKEN = {"gripper": "gripper", "dex_hand": "dex"}


def _runs(indices) -> list[tuple[int, int]]:
    runs = []
    for i in sorted(indices):
        if runs and i == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], i)
        else:
            runs.append((i, i))
    return runs


def control_prompt(desc: EmbodimentDescriptor) -> str:
    p = desc.prompt
    slots = ",".join(f"{a}-{b}" if a != b else str(a) for a, b in _runs(np.flatnonzero(desc.mask)))
    return (
        f"arms={p.arms};hands={p.hands};ee={_EE_TOKEN[p.end_effector]};"
        f"ctrl={p.ctrl};base={p.base};slots={slots}"
    )


def parse_control_prompt(text: str) -> tuple[PromptFields, np.ndarray]:
    try:
        fields = dict(part.split("=", 1) for part in text.split(";"))
        mask = np.zeros(N_SLOTS, dtype=bool)
        for run in filter(None, fields["slots"].split(",")):
            lo, _, hi = run.partition("-")
            mask[int(lo): int(hi or lo) + 1] = True
        ee = {v: k for k, v in _EE_TOKEN.items()}[fields["ee"]]
        prompt = PromptFields(int(fields["arms"]), int(fields["hands"]), ee, fields["ctrl"], fields["base"])
    except (KeyError, ValueError) as exc:
        raise DescriptorError(f"malformed control prompt {text!r}") from exc
    return prompt, mask


# --- noise -----------------------------------------------------------------


def localize_noise(k: int, desc: EmbodimentDescriptor, seed: int, n: int | None = None) -> np.ndarray:
    """Standard normal noise on the embodiment's slots, zero elsewhere.

    With ``n`` given, returns ``n`` independent draws as an (n, 64) array.
    """
    mask = desc.mask
    if k != int(mask.sum()):
        raise DimError(f"k={k} but {desc.embodiment_id} drives {int(mask.sum())} slots")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(k if n is None else (n, k))
    out = np.zeros(eps.shape[:-1] + (N_SLOTS,))
    out[..., np.flatnonzero(mask)] = eps
    return out


# --- retargeting -----------------------------------------------------------


def _slot_routes(src_mask, dst_mask, layout, substitutions):
    """Resolve each source slot to destination slots.

    Returns a list of (src_slot, [dst_slots]) and the semantic ids of source
    slots that have no route.
    """
    routes, unmapped = [], []
    for s in np.flatnonzero(src_mask):
        if dst_mask[s]:
            routes.append((int(s), [int(s)]))
            continue
        group = layout.slots[s].group
        target_group = substitutions.get(group)
        if target_group is None:
            unmapped.append(layout.slots[s].semantic_id)
            continue
        src_group_slots = [i for i in layout.slots_in(group) if src_mask[i]]
        dst_group_slots = [i for i in layout.slots_in(target_group) if dst_mask[i]]
        if not dst_group_slots:
            unmapped.append(layout.slots[s].semantic_id)
        elif len(src_group_slots) == 1:
            # a single scalar (e.g. grasp closure) drives every destination joint of the group
            routes.append((int(s), dst_group_slots))
        elif len(src_group_slots) == len(dst_group_slots):
            routes.append((int(s), [dst_group_slots[src_group_slots.index(s)]]))
        else:
            unmapped.append(layout.slots[s].semantic_id)
    return routes, unmapped


def _retarget_matrix(x, src, dst, layout, substitutions, what):
    u = map_to_unified(x, src)
    routes, unmapped = _slot_routes(src.mask, dst.mask, layout, substitutions)
    if unmapped:
        raise RetargetError(
            f"{what}: no route from {src.embodiment_id} to {dst.embodiment_id} for {unmapped}", unmapped
        )
    out = np.zeros_like(u.values)
    filled = np.zeros(N_SLOTS, dtype=bool)
    for s, targets in routes:
        for t in targets:
            out[..., t] = u.values[..., s]
            filled[t] = True
    native = map_from_unified(UnifiedAction(out, dst.mask), dst)
    return native, filled


def retarget(ep: Episode, src: EmbodimentDescriptor, dst: EmbodimentDescriptor,
             layout: UnifiedLayout, substitutions: Mapping[str, str] | None = None) -> Episode:
    """Re-express an episode in another embodiment's native coordinates.

    Slots shared by both embodiments copy straight across. For source slots
    the destination lacks, ``substitutions`` maps a source group to a
    destination group (e.g. ``{"left_grasp": "left_hand"}``). Destination
    slots no source slot reaches are held at unified value 0 and listed in
    ``metadata["retarget"]["unfilled_slots"]``.
    """
    substitutions = dict(substitutions or {})
    if ep.embodiment_id != src.embodiment_id:
        raise RetargetError(f"episode is {ep.embodiment_id!r}, descriptor is {src.embodiment_id!r}")
    actions, filled = _retarget_matrix(ep.actions, src, dst, layout, substitutions, "actions")
    src_s, dst_s = src.for_states(), dst.for_states()
    if ep.state_dim == src_s.k:
        states, _ = _retarget_matrix(ep.states, src_s, dst_s, layout, substitutions, "states")
    else:
        raise RetargetError(
            f"states have {ep.state_dim} channels but {src.embodiment_id} maps {src_s.k}"
        )
    unfilled = [layout.slots[i].semantic_id for i in np.flatnonzero(dst.mask & ~filled)]
    meta = dict(ep.metadata)
    meta["retarget"] = {
        "source_embodiment": src.embodiment_id,
        "coverage": float(filled[dst.mask].mean()),
        "unfilled_slots": unfilled,
        "mask": np.flatnonzero(dst.mask).tolist(),
    }
    return ep.evolve(embodiment_id=dst.embodiment_id, actions=actions, states=states, metadata=meta)


# --- estimator wrapper -----------------------------------------------------


class UnifiedActionMapper(TransformerMixin, BaseEstimator):
    """scikit-learn transformer from native (n, k) actions to unified (n, 64) values.

    ``inverse_transform`` applies the inverse affine map to the masked slots,
    so the mapper can sit inside a ``Pipeline`` next to scalers or models.
    """

    def __init__(self, descriptor: EmbodimentDescriptor | None = None):
        self.descriptor = descriptor

    def fit(self, X=None, y=None):
        if self.descriptor is None:
            raise DescriptorError("UnifiedActionMapper needs a descriptor")
        if X is not None and np.asarray(X).shape[-1] != self.descriptor.k:
            raise DimError(f"expected {self.descriptor.k} columns, got {np.asarray(X).shape[-1]}")
        self.mask_ = self.descriptor.mask
        self.n_features_in_ = self.descriptor.k
        return self

    def transform(self, X):
        return map_to_unified(X, self.descriptor).values

    def inverse_transform(self, X):
        return map_from_unified(UnifiedAction(np.asarray(X), self.descriptor.mask), self.descriptor)
