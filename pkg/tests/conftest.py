import numpy as np
import pytest

from robomix.episode import Episode


def make_frames(T, size=64, seed=0, shift=1):
    rng = np.random.default_rng(seed)
    tex = rng.integers(0, 256, (size, size * 2), dtype=np.uint8)
    return [np.ascontiguousarray(np.roll(tex, -shift * t, axis=1)[:, :size]) for t in range(T)]


def make_episode(T=12, D=4, cams=("head",), seed=0, semantics="absolute_target", **kw):
    rng = np.random.default_rng(seed)
    # dyadic values keep float32 storage and sums exact
    states = np.round(rng.uniform(-1, 1, (T, D)) * 256) / 256
    if semantics == "delta":
        actions = np.zeros_like(states)
        actions[:-1] = np.diff(states, axis=0)
    else:
        actions = np.vstack([states[1:], states[-1:]])
    fields = dict(
        id=f"ep{seed}",
        embodiment_id="test_bot",
        fps=10.0,
        instruction="pick the cup from the table",
        states=states,
        actions=actions,
        cameras={c: make_frames(T, seed=seed + i) for i, c in enumerate(cams)},
        action_semantics=semantics,
    )
    fields.update(kw)
    return Episode(**fields)


@pytest.fixture
def episode():
    return make_episode()


def qa_fixture(i):
    """Varied (states, frames) pairs for score cross-checks; index-seeded."""
    from scipy.ndimage import uniform_filter

    rng = np.random.default_rng(1000 + i)
    T = int(rng.integers(8, 40))
    D = int(rng.integers(1, 7))
    t = np.arange(T)[:, None]
    states = np.sin(2 * np.pi * rng.uniform(0.02, 0.2, D) * t + rng.uniform(0, 6, D))
    states += (i % 3) * 0.05 * rng.standard_normal((T, D))
    if i % 5 == 0:
        states[:, 0] = 0.0
    size = (64, 64) if i % 2 else (80 + 16 * (i % 3), 140)
    frames = []
    base = rng.uniform(0, 255, size)
    for k in range(min(T, 20)):
        img = np.roll(base, k * (1 + i % 4), axis=1) * (0.6 + 0.02 * k)
        if i % 4 == 1:
            img = uniform_filter(img, 5)
        frames.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
    return states, frames


def random_descriptor(rng, embodiment_id="rand", k=None, slots=None):
    from robomix.unify import DimMap, EmbodimentDescriptor, N_SLOTS, PromptFields

    if slots is None:
        k = k or int(rng.integers(1, N_SLOTS + 1))
        slots = rng.choice(N_SLOTS, k, replace=False)
    signs = rng.choice([-1.0, 1.0], len(slots))
    dims = [DimMap(i, int(s), float(sg * rng.uniform(0.1, 10)), float(rng.uniform(-1, 1)))
            for i, (s, sg) in enumerate(zip(slots, signs))]
    return EmbodimentDescriptor(embodiment_id, tuple(dims), PromptFields(1, 0, "gripper", "joint", "static"))


# Published per-dataset sampling probabilities (they sum to 0.999 as printed).
PUBLISHED_MIX = {
    "RoboMind": 0.054,
    "AgiBot dexhand": 0.080,
    "AgiBot twofinger": 0.210,
    "ActionNet": 0.102,
    "Green Humanoid": 0.089,
    "ALOHA any_pick": 0.025,
    "BiPlay": 0.037,
    "RDT": 0.052,
    "Galaxea": 0.124,
    "Bridge": 0.041,
    "DROID": 0.129,
    "Fractal": 0.056,
}


def random_gmm(rng, K=None, D=None, standardized=False):
    from robomix.guards import GmmDensityModel

    K = K or int(rng.integers(1, 5))
    D = D or int(rng.integers(1, 5))
    w = rng.uniform(0.2, 1.0, K)
    covs = []
    for _ in range(K):
        A = rng.standard_normal((D, D))
        covs.append(A @ A.T + 0.3 * np.eye(D))
    kw = {}
    if standardized:
        kw = dict(center=rng.standard_normal(D), scale=rng.uniform(0.5, 2.0, D))
    return GmmDensityModel(w / w.sum(), rng.standard_normal((K, D)), np.array(covs), **kw)


def fd_gradient(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
