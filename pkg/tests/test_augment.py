import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robomix.augment import (
    AugmentConfig,
    mirror_episode,
    reverse_actions,
    reverse_episode,
    reverse_instruction,
    swap_words,
)
from robomix.dataqa import frame_sharpness, tremble_score
from robomix.episode import FilterConfig, validate_episode
from robomix.errors import LayoutError, NotReversible
from robomix.synth import make_episode as synth_episode
from robomix.unify import UnifiedLayout, default_embodiments

from conftest import make_episode

LAYOUT = UnifiedLayout.default()
EMB = default_embodiments()
CFG = AugmentConfig()


def humanoid(seed, semantics="absolute_target"):
    rng = np.random.default_rng(seed)
    return synth_episode("green_humanoid", rng, T=int(rng.integers(12, 30)), semantics=semantics,
                         instruction="pick the cup from the table", episode_id=f"h{seed}")


def same_streams(a, b):
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.actions, b.actions)
    assert sorted(a.cameras) == sorted(b.cameras)
    for name in a.cameras:
        for x, y in zip(a.cameras[name], b.cameras[name], strict=True):
            assert np.array_equal(x, y)


# --- instructions ----------------------------------------------------------

def test_swap_words():
    assert swap_words("pick the cup with left hand", CFG.swap_lexicon) == "pick the cup with right hand"
    assert swap_words("Left to right", CFG.swap_lexicon) == "Right to left"
    assert swap_words("leftover", CFG.swap_lexicon) == "leftover"


def test_reverse_templates():
    skills = CFG.reversible_skills
    assert reverse_instruction("pick the sponge from the table", skills) == "place the sponge on the table"
    assert reverse_instruction("hand over the bottle from the left hand to the right hand", skills) == \
        "hand over the bottle from the right hand to the left hand"
    assert reverse_instruction("place cup on the table", skills) is None


def test_swap_lexicon_must_be_disjoint():
    with pytest.raises(ValueError):
        AugmentConfig(swap_lexicon=(("left", "right"), ("right", "up")))


def test_config_from_dict():
    cfg = AugmentConfig.from_dict({"reversible_skills": [{"match": "open {x}", "reverse": "close {x}"}]})
    assert reverse_instruction("open the drawer", cfg.reversible_skills) == "close the drawer"


# --- mirror ----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_mirror_involution(seed):
    ep = humanoid(seed)
    d = EMB["green_humanoid"]
    m = mirror_episode(ep, LAYOUT, d, CFG)
    back = mirror_episode(m, LAYOUT, d, CFG)
    same_streams(back, ep)
    assert back.instruction == ep.instruction


def test_mirror_details():
    ep = humanoid(1).evolve(instruction="wipe the table with the left hand")
    m = mirror_episode(ep, LAYOUT, EMB["green_humanoid"], CFG)
    assert m.instruction == "wipe the table with the right hand"
    assert np.array_equal(m.cameras["wrist_right"][0], ep.cameras["wrist_left"][0][:, ::-1])
    assert np.array_equal(m.cameras["head"][2], ep.cameras["head"][2][:, ::-1])
    assert m.metadata["augmentation"] == "mirror" and m.metadata["source_id"] == ep.id
    # left arm joint 0 lands on right arm joint 0 with the layout's sign
    assert m.actions[0, 7] == LAYOUT.sign[0] * ep.actions[0, 0]


def test_mirror_preserves_scores_and_validity():
    ep = humanoid(2)
    m = mirror_episode(ep, LAYOUT, EMB["green_humanoid"], CFG)
    assert tremble_score(m.states) == pytest.approx(tremble_score(ep.states), rel=1e-12)
    assert frame_sharpness(m.cameras["head"][0]) == pytest.approx(frame_sharpness(ep.cameras["head"][0]), rel=1e-12)
    filt = FilterConfig(min_length=5, max_length=100, required_cameras=("head",), motion_threshold=0.01)
    assert validate_episode(m, filt).passed == validate_episode(ep, filt).passed is True
    assert (m.T, m.fps) == (ep.T, ep.fps)


def test_single_arm_cannot_mirror():
    rng = np.random.default_rng(0)
    ep = synth_episode("franka_single", rng, T=12)
    with pytest.raises(LayoutError):
        mirror_episode(ep, LAYOUT, EMB["franka_single"], CFG)


# --- reverse ---------------------------------------------------------------

def test_reverse_delta_hand_example():
    s = np.array([[0.0], [1.0], [3.0]])
    a = np.array([[1.0], [2.0], [0.0]])
    rs = s[::-1]
    ra = reverse_actions(rs, a, "delta")
    assert rs[:, 0].tolist() == [3.0, 1.0, 0.0]
    assert ra[:2, 0].tolist() == [-2.0, -1.0] and ra[2, 0] == 0.0
    assert np.array_equal(rs[:-1] + ra[:-1], rs[1:])


def test_reverse_absolute_targets():
    ep = make_episode(T=6)
    r = reverse_episode(ep)
    assert np.array_equal(r.actions[:-1], r.states[1:])
    assert np.array_equal(r.actions[-1], r.states[-1])


@pytest.mark.parametrize("semantics", ["absolute_target", "delta"])
@pytest.mark.parametrize("seed", range(4))
def test_reverse_involution(seed, semantics):
    ep = humanoid(seed, semantics)
    r = reverse_episode(ep, CFG)
    assert r.instruction == "place the cup on the table"
    back = reverse_episode(r, CFG)
    same_streams(back, ep)
    assert back.instruction == ep.instruction
    if semantics == "delta":
        assert np.array_equal(r.states[:-1] + r.actions[:-1], r.states[1:])


def test_not_reversible():
    ep = make_episode(instruction="place cup on the table")
    with pytest.raises(NotReversible):
        reverse_episode(ep)


def test_reverse_metadata():
    ep = make_episode()
    r = reverse_episode(ep)
    assert r.metadata["augmentation"] == "reverse" and r.metadata["source_id"] == ep.id
    assert r.id == f"{ep.id}.reverse"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reversed_delta_property(seed):
    ep = humanoid(seed, "delta")
    r = reverse_episode(ep)
    assert np.array_equal(r.states[:-1] + r.actions[:-1], r.states[1:])
