"""Mirrored and time-reversed copies of demonstrations."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .episode import Episode
from .errors import LayoutError, NotReversible
from .unify import EmbodimentDescriptor, UnifiedAction, UnifiedLayout, map_from_unified, map_to_unified

DEFAULT_REVERSIBLE_SKILLS = (
    ("pick {object} from the table", "place {object} on the table"),
    ("pick up {object}", "put down {object}"),
    ("hand over {object} from the {a} hand to the {b} hand", "hand over {object} from the {b} hand to the {a} hand"),
    ("move {object} from the {a} hand to the {b} hand", "move {object} from the {b} hand to the {a} hand"),
    ("take {object} from the hand", "give {object} to the hand"),
)


@dataclass(frozen=True)
class AugmentConfig:
    reversible_skills: tuple[tuple[str, str], ...] = DEFAULT_REVERSIBLE_SKILLS
    swap_lexicon: tuple[tuple[str, str], ...] = (("left", "right"),)
    camera_swaps: tuple[tuple[str, str], ...] = (("wrist_left", "wrist_right"),)

    def __post_init__(self):
        skills = tuple(tuple(s) for s in self.reversible_skills)
        lex = tuple((a.lower(), b.lower()) for a, b in self.swap_lexicon)
        tokens = [t for pair in lex for t in pair]
        if len(set(tokens)) != len(tokens):
            raise ValueError("swap_lexicon pairs must use disjoint tokens")
        object.__setattr__(self, "reversible_skills", skills)
        object.__setattr__(self, "swap_lexicon", lex)
        object.__setattr__(self, "camera_swaps", tuple(tuple(p) for p in self.camera_swaps))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "reversible_skills" in d:
            d["reversible_skills"] = [
                (s["match"], s["reverse"]) if isinstance(s, dict) else tuple(s) for s in d["reversible_skills"]
            ]
        return cls(**d)


# --- instruction rewriting -------------------------------------------------


def swap_words(text: str, lexicon) -> str:
    """Swap every lexicon pair in one pass, keeping a leading capital."""
    table = {}
    for a, b in lexicon:
        table[a], table[b] = b, a
    if not table:
        return text
    pattern = re.compile(r"\b(" + "|".join(map(re.escape, sorted(table, key=len, reverse=True))) + r")\b",
                         re.IGNORECASE)

    def repl(m):
        word = m.group(0)
        new = table[word.lower()]
        return new.capitalize() if word[0].isupper() else new

    return pattern.sub(repl, text)


def _template_regex(template: str) -> re.Pattern:
    parts = re.split(r"\{(\w+)\}", template)
    rx = []
    for i, part in enumerate(parts):
        if i % 2:
            rx.append(f"(?P<{part}>.+?)")
        else:
            rx.append(r"\s+".join(map(re.escape, part.split(" "))))
    return re.compile("^" + "".join(rx) + "$", re.IGNORECASE)


def reverse_instruction(text: str, skills) -> str | None:
    """Rewrite ``text`` through the first matching template, or None."""
    norm = " ".join(text.split())
    for match, reverse in skills:
        m = _template_regex(match).match(norm)
        if m:
            return reverse.format(**m.groupdict())
    return None


# --- mirroring -------------------------------------------------------------


def _mirror_matrix(x, desc: EmbodimentDescriptor, layout: UnifiedLayout, what: str):
    mask = desc.mask
    partner = layout.partner
    lonely = [layout.slots[i].semantic_id for i in np.flatnonzero(mask) if not mask[partner[i]]]
    if lonely:
        raise LayoutError(f"{what}: mirror partners of {lonely} are not driven by {desc.embodiment_id}")
    u = map_to_unified(x, desc)
    return map_from_unified(UnifiedAction(layout.mirror(u.values), mask), desc)


def mirror_episode(ep: Episode, layout: UnifiedLayout, desc: EmbodimentDescriptor,
                   cfg: AugmentConfig | None = None) -> Episode:
    """Left/right mirror image of an episode.

    States and actions go through the unified layout: each slot moves to its
    mirror partner with the partner's sign. Wrist streams listed in
    ``cfg.camera_swaps`` trade places and every frame is flipped
    horizontally. Left/right words in the instruction are swapped.
    """
    cfg = cfg or AugmentConfig()
    actions = _mirror_matrix(ep.actions, desc, layout, "actions")
    state_desc = desc.for_states()
    if ep.state_dim != state_desc.k:
        raise LayoutError(f"states have {ep.state_dim} channels, {desc.embodiment_id} maps {state_desc.k}")
    states = _mirror_matrix(ep.states, state_desc, layout, "states")

    rename = {}
    for a, b in cfg.camera_swaps:
        if a in ep.cameras or b in ep.cameras:
            rename[a], rename[b] = b, a
    cameras = {
        rename.get(name, name): [np.ascontiguousarray(fr[:, ::-1]) for fr in stream]
        for name, stream in ep.cameras.items()
    }
    meta = dict(ep.metadata)
    meta.update(augmentation="mirror", source_id=ep.id)
    return ep.evolve(
        id=f"{ep.id}.mirror",
        states=states,
        actions=actions,
        cameras=cameras,
        instruction=swap_words(ep.instruction, cfg.swap_lexicon),
        metadata=meta,
    )


# --- time reversal ---------------------------------------------------------


def reverse_actions(states: np.ndarray, actions: np.ndarray, semantics: str) -> np.ndarray:
    """Actions that drive the time-reversed state sequence.

    ``states`` here are already reversed. Absolute targets point at the next
    reversed state (the last one holds); deltas are negated and reordered,
    with a zero final step.
    """
    T = states.shape[0]
    if semantics == "absolute_target":
        if actions.shape[1] != states.shape[1]:
            raise NotReversible("absolute-target reversal needs actions in state coordinates")
        out = np.empty_like(states)
        out[:-1] = states[1:]
        out[-1] = states[-1]
        return out
    out = np.zeros_like(actions)
    if T > 1:
        out[:-1] = -actions[T - 2:: -1]
    return out


def reverse_episode(ep: Episode, cfg: AugmentConfig | None = None) -> Episode:
    """Play an episode backwards.

    Only episodes whose instruction matches a reversible skill template are
    eligible. An episode that is itself a reversal is always eligible and
    gets its source instruction back.
    """
    cfg = cfg or AugmentConfig()
    if ep.metadata.get("augmentation") == "reverse" and "source_instruction" in ep.metadata:
        instruction = ep.metadata["source_instruction"]
    else:
        instruction = reverse_instruction(ep.instruction, cfg.reversible_skills)
        if instruction is None:
            raise NotReversible(f"instruction {ep.instruction!r} matches no reversible skill")
    states = ep.states[::-1].copy()
    actions = reverse_actions(states, ep.actions, ep.action_semantics)
    cameras = {name: list(reversed(stream)) for name, stream in ep.cameras.items()}
    meta = dict(ep.metadata)
    meta.update(augmentation="reverse", source_id=ep.id, source_instruction=ep.instruction)
    return ep.evolve(
        id=f"{ep.id}.reverse",
        states=states,
        actions=actions,
        cameras=cameras,
        instruction=instruction,
        reversible=True,
        metadata=meta,
    )
