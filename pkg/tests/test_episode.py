import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robomix.episode import (
    Episode,
    FilterConfig,
    discover_packs,
    load_episode,
    motion_activity,
    save_episode,
    validate_episode,
)
from robomix.errors import EpisodeIOError, FormatError

from conftest import make_episode


def test_round_trip_is_bit_exact(tmp_path):
    ep = make_episode(T=10, D=4)
    save_episode(ep, tmp_path / "p")
    back = load_episode(tmp_path / "p")
    assert back.T == 10 and len(back.cameras["head"]) == 10
    assert np.array_equal(back.states, ep.states)
    assert np.array_equal(back.actions, ep.actions)
    for a, b in zip(back.cameras["head"], ep.cameras["head"]):
        assert a.dtype == np.uint8 and np.array_equal(a, b)
    assert back.instruction == ep.instruction and back.fps == ep.fps


def test_pack_layout_on_disk(tmp_path):
    ep = make_episode(T=3, D=2)
    save_episode(ep, tmp_path / "p")
    raw = np.fromfile(tmp_path / "p" / "states.f32", dtype="<f4")
    assert raw.size == 6
    assert np.array_equal(raw.reshape(3, 2), ep.states.astype(np.float32))
    head = (tmp_path / "p" / "cameras" / "head" / "000000.pgm").read_bytes()
    assert head.startswith(b"P5")
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert manifest["cameras"] == [{"name": "head", "width": 64, "height": 64}]
    assert {"id", "embodiment_id", "fps", "instruction", "T", "state_dim", "action_dim",
            "reversible", "action_semantics"} <= set(manifest)


def test_missing_states_file(tmp_path):
    save_episode(make_episode(), tmp_path / "p")
    (tmp_path / "p" / "states.f32").unlink()
    with pytest.raises(EpisodeIOError):
        load_episode(tmp_path / "p")


def test_short_payload_is_format_error(tmp_path):
    ep = make_episode(T=10, D=4)
    save_episode(ep, tmp_path / "p")
    ep.states[:9].astype("<f4").tofile(tmp_path / "p" / "states.f32")
    with pytest.raises(FormatError):
        load_episode(tmp_path / "p")


def test_missing_manifest(tmp_path):
    (tmp_path / "p").mkdir()
    with pytest.raises(EpisodeIOError):
        load_episode(tmp_path / "p")


def test_save_replaces_existing_pack(tmp_path):
    save_episode(make_episode(T=12), tmp_path / "p")
    save_episode(make_episode(T=5, cams=()), tmp_path / "p")
    back = load_episode(tmp_path / "p")
    assert back.T == 5 and not back.cameras
    assert not (tmp_path / "p" / "cameras").exists()


def test_discover_packs_sorted(tmp_path):
    for name in ("b", "a", "c"):
        save_episode(make_episode(), tmp_path / name)
    (tmp_path / "junk").mkdir()
    assert [p.name for p in discover_packs(tmp_path)] == ["a", "b", "c"]
    assert discover_packs(tmp_path / "a") == [tmp_path / "a"]


def test_episode_rejects_row_mismatch():
    with pytest.raises(ValueError):
        make_episode(actions=np.zeros((3, 2)))


def test_episode_is_immutable(episode):
    with pytest.raises(ValueError):
        episode.states[0, 0] = 1.0


FILT = FilterConfig(min_length=5, max_length=100, required_cameras=("head",), motion_threshold=0.1)


def test_too_short():
    assert validate_episode(make_episode(T=3), FILT).reasons == ("too_short",)


def test_all_checks_pass(episode):
    res = validate_episode(episode, FILT)
    assert res.passed and res.reasons == ()


def test_constant_states_low_motion():
    ep = make_episode(states=np.ones((12, 4)), actions=np.ones((12, 4)))
    assert validate_episode(ep, FILT).reasons == ("low_motion",)


def test_missing_camera_and_frames():
    ep = make_episode(cams=("wrist",))
    assert "missing_camera" in validate_episode(ep, FILT).reasons
    short = make_episode()
    short = short.evolve(cameras={"head": short.cameras["head"][:-1]})
    assert validate_episode(short, FILT).reasons == ("missing_frames",)


def test_bad_stream_shape():
    ep = make_episode()
    frames = list(ep.cameras["head"])
    frames[3] = np.zeros((32, 32), dtype=np.uint8)
    assert "bad_stream_shape" in validate_episode(ep.evolve(cameras={"head": frames}), FILT).reasons


def test_motion_activity_definition():
    s = np.array([[0.0], [1.0], [3.0]])
    assert motion_activity(s, 10.0) == pytest.approx(15.0)


def test_filter_config_bounds():
    with pytest.raises(ValueError):
        FilterConfig(min_length=0)
    with pytest.raises(ValueError):
        FilterConfig(min_length=10, max_length=5)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 30), lo=st.integers(1, 20), span=st.integers(0, 20))
def test_passed_iff_no_reasons(T, lo, span):
    cfg = FilterConfig(min_length=lo, max_length=lo + span, required_cameras=("head",), motion_threshold=0.0)
    ep = make_episode(T=T)
    res = validate_episode(ep, cfg)
    assert res.passed == (res.reasons == ())
    assert res == validate_episode(ep, cfg)
    assert ("too_short" in res.reasons) == (T < lo)
    assert ("too_long" in res.reasons) == (T > lo + span)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=2, max_size=24))
def test_float32_values_survive_storage(tmp_path_factory, values):
    arr = np.array(values, dtype=np.float64).reshape(-1, 1)
    ep = Episode(id="x", embodiment_id="e", fps=5.0, instruction="", states=arr, actions=arr, cameras={})
    path = tmp_path_factory.mktemp("rt") / "p"
    save_episode(ep, path)
    assert np.array_equal(load_episode(path).states, arr)
