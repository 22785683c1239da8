import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from robomix.align import (
    STRIDE_MAX,
    TrajectoryResampler,
    alignment_factor,
    mean_flow_magnitude,
    pchip_eval,
    query_times,
    resample_deltas,
    resample_episode,
    resample_trajectory,
    sample_speed_factor,
)
from robomix.errors import DomainError, FormatError, InsufficientData, RangeError

from conftest import make_episode


def textured(size=128, seed=0):
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.uniform(0, 255, (size, size * 2)), 1.0, mode="wrap")
    return (tex - tex.min()) / (tex.max() - tex.min()) * 255


def translate(shift, T=6, size=96, seed=0, flicker=0):
    tex = textured(size, seed)
    out = []
    for t in range(T):
        img = np.roll(tex, -shift * t, axis=1)[:, :size] + flicker * (-1) ** t
        out.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
    return out


# --- PCHIP -----------------------------------------------------------------

def test_knots_reproduced_exactly():
    x = np.array([0.0, 1.0, 2.5, 4.0])
    y = np.array([1.0, -2.0, 0.3, 7.0])
    assert np.array_equal(pchip_eval(x, y, x), y)


def test_linear_data_exact():
    x = np.arange(6.0)
    q = np.linspace(0, 5, 37)
    assert np.allclose(pchip_eval(x, 2 * x - 1, q), 2 * q - 1, rtol=0, atol=1e-14)


def test_step_data_stays_monotone_and_bounded():
    q = np.linspace(0, 3, 100)
    v = pchip_eval([0, 1, 2, 3], [0, 0, 1, 1], q)
    assert v.min() >= 0 and v.max() <= 1 and np.all(np.diff(v) >= 0)


def test_pchip_errors():
    with pytest.raises(DomainError):
        pchip_eval([0, 1, 1], [0, 1, 2], [0.5])
    with pytest.raises(RangeError):
        pchip_eval([0, 1], [0, 1], [1.5])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 15))
def test_pchip_matches_scipy(seed, n):
    rng = np.random.default_rng(seed)
    x = np.cumsum(rng.uniform(0.1, 2.0, n))
    y = rng.standard_normal(n)
    if seed % 3 == 0:
        y = np.sort(y)
    q = np.linspace(x[0], x[-1], 57)
    assert np.allclose(pchip_eval(x, y, q), PchipInterpolator(x, y)(q), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pchip_no_overshoot(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(8)
    x = np.arange(8.0)
    q = np.linspace(0, 7, 200)
    v = pchip_eval(x, y, q)
    seg = np.minimum(np.floor(q).astype(int), 6)
    lo = np.minimum(y[seg], y[seg + 1])
    hi = np.maximum(y[seg], y[seg + 1])
    assert np.all(v >= lo - 1e-12) and np.all(v <= hi + 1e-12)


# --- flow ------------------------------------------------------------------

def test_static_video_is_zero():
    f = translate(0)
    assert mean_flow_magnitude(f).mean_magnitude == 0.0


@pytest.mark.parametrize("shift", [1, 2, 3, 5, 7])
def test_translation_recovered(shift):
    est = mean_flow_magnitude(translate(shift))
    assert abs(est.mean_magnitude - shift) <= 0.5
    assert est.mean_magnitude == pytest.approx(np.mean(est.per_pair_magnitudes))


def test_flicker_is_not_motion():
    assert mean_flow_magnitude(translate(0, flicker=5)).mean_magnitude < 0.5


def test_mirror_invariance():
    frames = translate(3, seed=4)
    flipped = [f[:, ::-1].copy() for f in frames]
    assert mean_flow_magnitude(flipped).mean_magnitude == mean_flow_magnitude(frames).mean_magnitude


def test_flow_input_errors():
    f = translate(1)
    with pytest.raises(FormatError):
        mean_flow_magnitude([f[0], f[1][:64, :64]])
    with pytest.raises(FormatError):
        mean_flow_magnitude([np.zeros((16, 16), np.uint8)] * 2)
    with pytest.raises(InsufficientData):
        mean_flow_magnitude(f[:1])


def test_alignment_factor_examples():
    assert alignment_factor(2.0, 2.0) == (1.0, False)
    assert alignment_factor(4.0, 2.0) == (0.5, False)
    assert alignment_factor(0.2, 2.0) == (STRIDE_MAX, False)
    assert alignment_factor(0.0, 2.0) == (STRIDE_MAX, True)
    with pytest.raises(DomainError):
        alignment_factor(1.0, 0.0)


# --- resampling ------------------------------------------------------------

def test_identity_stride():
    x = np.random.default_rng(0).standard_normal((9, 3))
    assert np.array_equal(resample_trajectory(x, 1.0), x)


def test_stride_two_takes_even_rows():
    x = np.random.default_rng(1).standard_normal((11, 2))
    out = resample_trajectory(x, 2.0)
    assert out.shape == (6, 2) and np.array_equal(out, x[::2])


def test_densify_monotone_column():
    x = np.cumsum(np.random.default_rng(2).uniform(0, 1, 10))[:, None]
    out = resample_trajectory(x, 0.5)
    assert out.shape[0] == 19
    assert np.all(np.diff(out[:, 0]) >= 0)
    assert out[0, 0] == x[0, 0] and out[-1, 0] == x[-1, 0]


def test_resample_errors():
    with pytest.raises(InsufficientData):
        resample_trajectory(np.zeros((1, 2)), 1.0)
    with pytest.raises(DomainError):
        resample_trajectory(np.zeros((5, 2)), 5.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.sampled_from([0.25, 0.5, 0.75, 1.5, 2.0, 3.0, 4.0]))
def test_resample_properties(seed, T, f):
    x = np.random.default_rng(seed).standard_normal((T, 3))
    out = resample_trajectory(x, f)
    q = query_times(T, f)
    assert out.shape[0] == q.size and q[0] == 0 and q[-1] <= T - 1 and np.all(np.diff(q) > 0)
    assert np.array_equal(out[0], x[0])
    if abs((T - 1) / f - round((T - 1) / f)) < 1e-12:
        assert np.array_equal(out[-1], x[-1])
    assert np.all(out >= x.min(axis=0) - 1e-12) and np.all(out <= x.max(axis=0) + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(9, 30), st.sampled_from([2.0, 3.0, 4.0]))
def test_warp_then_inverse_matches_on_knots(seed, T, f):
    x = np.random.default_rng(seed).standard_normal((T, 2))
    there = resample_trajectory(x, f)
    back = resample_trajectory(there, 1.0 / f)
    k = int(round(f))
    assert np.array_equal(back[::k], x[::k][: back[::k].shape[0]])


def test_quaternion_columns_renormalized():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((8, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    out = resample_trajectory(q, 0.5, quat_columns=[(0, 1, 2, 3)])
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_delta_resampling_preserves_total_path():
    rng = np.random.default_rng(6)
    d = rng.standard_normal((12, 2))
    for f in (0.5, 1.0, 1.1):
        out = resample_deltas(d, f)
        q = query_times(12, f)
        if q[-1] + f >= 12:
            assert np.allclose(out.sum(axis=0), d.sum(axis=0), atol=1e-12)
    assert np.allclose(resample_deltas(d, 1.0), d, atol=1e-12)


def test_resample_episode_bookkeeping():
    ep = make_episode(T=11)
    out = resample_episode(ep, 2.0)
    assert out.T == 6 and out.fps == 5.0 and len(out.cameras["head"]) == 6
    assert np.array_equal(out.cameras["head"][1], ep.cameras["head"][2])
    assert out.metadata["resample_stride"] == 2.0


def test_speed_factor_range():
    rng = np.random.default_rng(0)
    v = [sample_speed_factor(rng) for _ in range(2000)]
    assert min(v) >= 0.5 and max(v) <= 2.0
    assert abs(np.mean(np.log(v))) < 0.05


def test_resampler_estimator():
    x = np.random.default_rng(0).standard_normal((11, 2))
    r = TrajectoryResampler(stride=2.0)
    assert np.array_equal(r.fit_transform(x), x[::2])
    assert r.get_params() == {"stride": 2.0, "quat_columns": None}
