"""``robomix`` command line: batch pipelines over EpisodePack directories.

Every subcommand reads packs and JSON configs and writes JSON reports, CSV
plans or new packs. Outputs are written atomically with sorted keys, so a
rerun on unchanged inputs reproduces them byte for byte.

Exit codes: 0 success, 1 data error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import align, augment, dataqa, guards, rl_align, sampler, synth, unify
from .episode import FilterConfig, discover_packs, load_episode, save_episode, validate_episode
from .errors import ConfigError, RobomixError

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2

_QA_KEYS = {f for f in dataqa.QaConfig.__dataclass_fields__}
_FILTER_KEYS = {f for f in FilterConfig.__dataclass_fields__}


class UsageError(Exception):
    pass


# --- configuration ---------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything the pipeline reads besides the packs themselves."""

    qa: dataqa.QaConfig = field(default_factory=dataqa.QaConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    augment: augment.AugmentConfig = field(default_factory=augment.AugmentConfig)
    schedule: sampler.SamplerSchedule | None = None
    layout: unify.UnifiedLayout = field(default_factory=unify.UnifiedLayout.default)
    embodiments: dict = field(default_factory=unify.default_embodiments)
    reference_flow: float | None = None
    align_cameras: tuple = ()
    ood: dict = field(default_factory=dict)
    refine: rl_align.RefineConfig = field(default_factory=rl_align.RefineConfig)
    substitutions: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        path = Path(path)
        doc = _read_config(path)
        return cls.from_dict(doc, path.parent, str(path))

    @classmethod
    def from_dict(cls, doc: dict, base: Path, source: str) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: top level must be an object")
        doc = dict(doc)
        # a bare sampler file or a bare QA/filter file is accepted as well
        if "dataset_ids" in doc and "weights" in doc:
            doc = {"sampler": doc}
        elif doc and set(doc) <= _QA_KEYS | _FILTER_KEYS:
            doc = {
                "qa": {k: v for k, v in doc.items() if k in _QA_KEYS},
                "filter": {k: v for k, v in doc.items() if k in _FILTER_KEYS},
            }
        cfg = cls()
        cfg.qa = _section(source, "qa", lambda: dataqa.QaConfig.from_dict(doc.get("qa") or {}))
        cfg.filter = _section(source, "filter", lambda: FilterConfig.from_dict(doc.get("filter") or {}))
        cfg.augment = _section(source, "augment", lambda: augment.AugmentConfig.from_dict(doc.get("augment") or {}))
        cfg.refine = _section(source, "refine", lambda: rl_align.RefineConfig(**(doc.get("refine") or {})))

        sched = doc.get("sampler")
        if isinstance(sched, str):
            cfg.schedule = sampler.SamplerSchedule.load(_resolve(base, sched, source, "sampler"))
        elif isinstance(sched, dict):
            cfg.schedule = sampler.SamplerSchedule.from_dict(sched, f"{source}: sampler")
        if doc.get("layout"):
            cfg.layout = unify.UnifiedLayout.load(_resolve(base, doc["layout"], source, "layout"))
        if doc.get("embodiments"):
            cfg.embodiments = unify.load_embodiments(_resolve(base, doc["embodiments"], source, "embodiments"))
        ref = doc.get("reference_flow")
        if ref is not None:
            if not isinstance(ref, (int, float)) or not ref > 0:
                raise ConfigError(f"{source}: field 'reference_flow' must be a positive number")
            cfg.reference_flow = float(ref)
        cfg.align_cameras = tuple((doc.get("align") or {}).get("cameras", ()))
        cfg.ood = dict(doc.get("ood") or {})
        subs = (doc.get("retarget") or {}).get("substitutions", {})
        if not isinstance(subs, dict):
            raise ConfigError(f"{source}: field 'retarget.substitutions' must be an object")
        cfg.substitutions = dict(subs)
        return cfg

    def descriptor(self, embodiment_id: str) -> unify.EmbodimentDescriptor:
        try:
            return self.embodiments[embodiment_id]
        except KeyError:
            raise ConfigError(f"no embodiment descriptor for {embodiment_id!r}") from None


def _read_config(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _resolve(base: Path, value, source: str, name: str) -> Path:
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"{source}: field {name!r} points at missing path {p}")
    return p


def _section(source, name, build):
    try:
        return build()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: field {name!r}: {exc}") from None


# --- output helpers --------------------------------------------------------


def _to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _to_jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def _write_atomic(path: Path, data: bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    text = json.dumps(_to_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    return _write_atomic(Path(path), text.encode("utf-8"))


def write_csv(path, header, rows) -> Path:
    return _write_atomic(Path(path), _csv_text(header, rows).encode("utf-8"))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pmap(fn, items, jobs: int):
    """Order-preserving map; uses worker processes when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _packs(args) -> list[Path]:
    if args.inp is None:
        raise UsageError("--in is required")
    packs = discover_packs(args.inp)
    if not packs:
        raise RobomixError(f"no EpisodePacks under {args.inp}")
    return packs


def _load_all(args):
    eps = _pmap(load_episode, _packs(args), args.jobs)
    return sorted(eps, key=lambda e: e.id)


def _out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return Path(args.out)


def _single(args) -> bool:
    return discover_packs(args.inp) == [Path(args.inp)]


# --- subcommands -----------------------------------------------------------


def _validate_one(path, filt):
    ep = load_episode(path)
    return ep.id, validate_episode(ep, filt).to_dict()


def cmd_validate(args, cfg: PipelineConfig) -> int:
    results = dict(_pmap(partial(_validate_one, filt=cfg.filter), _packs(args), args.jobs))
    passed = sorted(k for k, v in results.items() if v["passed"])
    write_json(_out(args) / "validation_report.json", {
        "episodes": results,
        "passed": passed,
        "rejected": sorted(set(results) - set(passed)),
    })
    return EXIT_OK


def _qa_one(path, qa, filt):
    ep = load_episode(path)
    return dataqa.qa_episode(ep, qa, filt).to_dict()


def cmd_qa(args, cfg: PipelineConfig) -> int:
    reports = _pmap(partial(_qa_one, qa=cfg.qa, filt=cfg.filter), _packs(args), args.jobs)
    reports.sort(key=lambda r: r["episode_id"])
    out = _out(args)
    if _single(args):
        write_json(out / "qa_report.json", reports[0])
        return EXIT_OK
    for r in reports:
        write_json(out / r["episode_id"] / "qa_report.json", r)
    write_json(out / "qa_index.json", {
        "accepted": [r["episode_id"] for r in reports if r["accepted"]],
        "rejected": {r["episode_id"]: r["reject_reasons"] for r in reports if not r["accepted"]},
    })
    return EXIT_OK


def _flow_camera(ep, cameras):
    for name in cameras or sorted(ep.cameras):
        if len(ep.cameras.get(name, ())) >= 2:
            return name
    return None


def _episode_flow(path, cameras):
    ep = load_episode(path)
    cam = _flow_camera(ep, cameras)
    if cam is None:
        return ep.id, ep.dataset_id, None, "no usable camera"
    try:
        return ep.id, ep.dataset_id, align.mean_flow_magnitude(ep.cameras[cam]).mean_magnitude, None
    except RobomixError as exc:
        return ep.id, ep.dataset_id, None, str(exc)


def cmd_align(args, cfg: PipelineConfig) -> int:
    packs = _packs(args)
    out = _out(args)
    flows = _pmap(partial(_episode_flow, cameras=cfg.align_cameras), packs, args.jobs)
    by_ds: dict[str, list] = {}
    for ep_id, ds, flow, err in sorted(flows):
        by_ds.setdefault(ds, []).append((ep_id, flow, err))
    strides = {}
    for ds in sorted(by_ds):
        good = [f for _, f, _ in by_ds[ds] if f is not None]
        mean_flow = float(np.mean(good)) if good else 0.0
        reference = cfg.reference_flow if cfg.reference_flow is not None else mean_flow
        if args.factor is not None:
            stride, degenerate = float(args.factor), False
        elif reference > 0:
            stride, degenerate = align.alignment_factor(mean_flow, reference)
        else:
            stride, degenerate = 1.0, True
        strides[ds] = stride
        write_json(out / f"{ds}.align_plan.json", {
            "dataset_id": ds,
            "mean_flow": mean_flow,
            "reference_flow": reference,
            "stride_f": stride,
            "degenerate": degenerate,
            "episodes": {e: f for e, f, _ in by_ds[ds]},
            "skipped": {e: err for e, _, err in by_ds[ds] if err},
        })
    if args.write_packs:
        for path in packs:
            ep = load_episode(path)
            if ep.T >= 2:
                save_episode(align.resample_episode(ep, strides[ep.dataset_id]), out / "episodes" / ep.id)
    return EXIT_OK


def _unify_one(path, embodiments):
    ep = load_episode(path)
    desc = embodiments.get(ep.embodiment_id)
    if desc is None:
        raise ConfigError(f"no embodiment descriptor for {ep.embodiment_id!r}")
    u = unify.map_to_unified(ep.actions, desc)
    meta = {
        "episode_id": ep.id,
        "embodiment_id": ep.embodiment_id,
        "T": ep.T,
        "slots": unify.N_SLOTS,
        "mask": np.flatnonzero(u.mask).tolist(),
        "control_prompt": unify.control_prompt(desc),
    }
    return ep.id, u.values.astype("<f4").tobytes(), meta


def cmd_unify(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    single = _single(args)
    for ep_id, blob, meta in _pmap(partial(_unify_one, embodiments=cfg.embodiments), _packs(args), args.jobs):
        dest = out if single else out / ep_id
        _write_atomic(dest / "unified_actions.f32", blob)
        write_json(dest / "unified.json", meta)
    return EXIT_OK


def cmd_retarget(args, cfg: PipelineConfig) -> int:
    if not args.target:
        raise UsageError("retarget needs --target EMBODIMENT")
    dst = cfg.descriptor(args.target)
    out = _out(args)
    report = {}
    for ep in _load_all(args):
        new = unify.retarget(ep, cfg.descriptor(ep.embodiment_id), dst, cfg.layout, cfg.substitutions)
        new = new.evolve(id=f"{ep.id}.{dst.embodiment_id}")
        save_episode(new, out / "episodes" / new.id)
        report[ep.id] = new.metadata["retarget"]
    write_json(out / "retarget_report.json", report)
    return EXIT_OK


def cmd_augment(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    report = {}
    for ep in _load_all(args):
        entry = {}
        try:
            m = augment.mirror_episode(ep, cfg.layout, cfg.descriptor(ep.embodiment_id), cfg.augment)
            save_episode(m, out / "episodes" / m.id)
            entry["mirror"] = m.id
        except RobomixError as exc:
            entry["mirror_skipped"] = str(exc)
        try:
            r = augment.reverse_episode(ep, cfg.augment)
            save_episode(r, out / "episodes" / r.id)
            entry["reverse"] = r.id
        except RobomixError as exc:
            entry["reverse_skipped"] = str(exc)
        report[ep.id] = entry
    write_json(out / "augment_report.json", report)
    return EXIT_OK


def cmd_sample_plan(args, cfg: PipelineConfig) -> int:
    sched = cfg.schedule
    if sched is None:
        raise ConfigError("sample-plan needs a sampler schedule in --config")
    if args.seed is not None:
        sched = sampler.SamplerSchedule(sched.dataset_ids, sched.weights, sched.ramp_steps,
                                        args.seed, sched.ramp_shape)
    if args.alpha is not None:
        p = sampler.mixture_weights(sched.weights, args.alpha)
        header, rows = ["dataset_id", "probability"], [(d, repr(float(x))) for d, x in zip(sched.dataset_ids, p)]
    else:
        step = args.step if args.step is not None else 0
        idx = sampler.sample_plan(sched, step, args.draws)
        header = ["draw", "step", "dataset_id"]
        rows = [(i, step, sched.dataset_ids[j]) for i, j in enumerate(idx)]
    if args.out is not None:
        write_csv(Path(args.out) / "sample_plan.csv", header, rows)
    sys.stdout.write(_csv_text(header, rows))
    return EXIT_OK


def _stack_states(eps, what="states"):
    dims = {e.embodiment_id: getattr(e, what).shape[1] for e in eps}
    if len(set(dims.values())) != 1:
        raise RobomixError(f"{what} dimensions differ across embodiments {dims}; pass --embodiment")
    return np.concatenate([getattr(e, what) for e in eps])


def _selected(args):
    eps = _load_all(args)
    if args.embodiment:
        eps = [e for e in eps if e.embodiment_id == args.embodiment]
        if not eps:
            raise RobomixError(f"no episodes of embodiment {args.embodiment!r}")
    return eps


def _fit_model(X, cfg: PipelineConfig, args):
    seed = args.seed if args.seed is not None else int(cfg.ood.get("seed", 0))
    return guards.fit_gmm(
        X, int(cfg.ood.get("K", 4)), seed,
        standardize=bool(cfg.ood.get("standardize", True)),
        quantile=float(cfg.ood.get("quantile", guards.DEFAULT_QUANTILE)),
        alpha_step=float(cfg.ood.get("alpha_step", guards.DEFAULT_ALPHA)),
    )


def cmd_fit_ood(args, cfg: PipelineConfig) -> int:
    eps = _selected(args)
    model = _fit_model(_stack_states(eps), cfg, args)
    doc = model.to_dict()
    doc["episodes"] = [e.id for e in eps]
    write_json(_out(args) / "gmm_model.json", doc)
    return EXIT_OK


def cmd_ood_check(args, cfg: PipelineConfig) -> int:
    if not args.model:
        raise UsageError("ood-check needs --model gmm_model.json")
    model = guards.GmmDensityModel.load(args.model)
    report = {}
    for ep in _load_all(args):
        if ep.state_dim != model.dim:
            report[ep.id] = {"skipped": f"state_dim {ep.state_dim} != model dim {model.dim}"}
            continue
        dens = model.density(ep.states)
        flagged = np.flatnonzero(dens < model.tau_ood)
        corrected = [guards.ood_correct(model, ep.states[t])[0] for t in flagged]
        report[ep.id] = {
            "ood_steps": flagged.tolist(),
            "ood_fraction": float(flagged.size / ep.T),
            "corrected_density": [float(model.density(c)[0]) for c in corrected],
        }
    write_json(_out(args) / "ood_report.json", report)
    return EXIT_OK


def cmd_progress(args, cfg: PipelineConfig) -> int:
    report = {}
    for ep in _load_all(args):
        rho = guards.progress_labels(ep.T)
        report[ep.id] = {
            "progress": rho.tolist(),
            "end_step": int(next(t for t, r in enumerate(rho) if guards.episode_end(r))),
        }
    write_json(_out(args) / "progress.json", report)
    return EXIT_OK


def cmd_refine(args, cfg: PipelineConfig) -> int:
    """Refine actions along the log-density gradient of a mixture fitted to them."""
    eps = _selected(args)
    model = _fit_model(_stack_states(eps, "actions"), cfg, args)
    critic = rl_align.GmmLogDensityCritic(model)
    report = {}
    for ep in eps:
        res = rl_align.refine_trajectory(critic, list(zip(ep.states, ep.actions)), cfg.refine)
        before, after = res.mean_q()
        report[ep.id] = {
            "mean_q_before": before,
            "mean_q_after": after,
            "steps": [r.to_dict() for r in res.report],
        }
    write_json(_out(args) / "refine_report.json", {"config": vars(cfg.refine), "episodes": report})
    return EXIT_OK


def cmd_summary(args, cfg: PipelineConfig) -> int:
    eps = _load_all(args)
    reports = [dataqa.qa_episode(e, cfg.qa, cfg.filter) for e in eps]
    write_json(_out(args) / "dataset_summary.json", dataqa.dataset_summary(eps, reports))
    return EXIT_OK


def cmd_make_corpus(args, cfg: PipelineConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    synth.make_corpus(_out(args), n_episodes=args.episodes, seed=seed)
    return EXIT_OK


COMMANDS = {
    "validate": (cmd_validate, "structural validation of packs"),
    "qa": (cmd_qa, "quality scores and accept/reject verdicts"),
    "align": (cmd_align, "per-dataset flow and resampling stride"),
    "unify": (cmd_unify, "map native actions into the 64-slot layout"),
    "retarget": (cmd_retarget, "re-express episodes for another embodiment"),
    "augment": (cmd_augment, "mirrored and time-reversed copies"),
    "sample-plan": (cmd_sample_plan, "mixture probabilities or a draw plan as CSV"),
    "fit-ood": (cmd_fit_ood, "fit the state-density model"),
    "ood-check": (cmd_ood_check, "flag and correct low-density states"),
    "progress": (cmd_progress, "episode progress labels"),
    "refine": (cmd_refine, "critic-gradient action refinement report"),
    "summary": (cmd_summary, "per-dataset quality summary"),
    "make-corpus": (cmd_make_corpus, "write a synthetic fixture corpus"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robomix", description="Robot demonstration curation and alignment tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--in", dest="inp", help="EpisodePack or directory of packs")
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="pipeline JSON (or a bare sampler/QA config)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1)
        if name == "sample-plan":
            p.add_argument("--alpha", type=float)
            p.add_argument("--step", type=int)
            p.add_argument("--draws", type=int, default=100)
        if name == "align":
            p.add_argument("--factor", type=float, help="fixed stride instead of the flow-derived one")
            p.add_argument("--write-packs", action="store_true", help="also write resampled packs")
        if name == "retarget":
            p.add_argument("--target", help="destination embodiment id")
        if name in ("fit-ood", "refine"):
            p.add_argument("--embodiment", help="restrict to one embodiment")
        if name == "ood-check":
            p.add_argument("--model", help="gmm_model.json from fit-ood")
        if name == "make-corpus":
            p.add_argument("--episodes", type=int, default=50)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        cfg = PipelineConfig.load(args.config)
        fn = COMMANDS[args.command][0]
        return fn(args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"robomix: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RobomixError, OSError, ValueError) as exc:
        print(f"robomix: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
