"""Command-line experiments: phantom, simulate, register, track, evaluate,
kinematics and benchmark.

Every command reads one JSON experiment config (``--config``) plus
overrides, writes its results under ``--out`` and records the resolved
config, package versions and timings in ``run.json`` there.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .evaluation import TrialRecord, format_table, save_summary, summarize
from .geometry import Pose6DoF
from .kinematics import MODES, build_report, condyle_regions
from .phantom import PhantomConfig, PhantomConfigError, load_landmarks, make_knee_phantom, save_landmarks
from .projector import Image2D, ProjectionGeometry, load_geometry, load_image, save_geometry, save_image
from .registration import RegistrationConfig, build_models, register_frame, track_sequence
from .simulate import FrameRenderer, TrajectoryConfig, flexion_axis, neutral_poses, random_pose, simulate_sequence
from .volume import BONE_LABELS, load_mask, load_volume, mask_to_pointcloud, principal_axis, save_mask, save_volume

log = logging.getLogger("boneaxisreg")

EXIT_CONFIG = 2
EXIT_FAILURE = 1


class ConfigError(ValueError):
    pass


@dataclass
class BenchmarkOptions:
    trials: int = 50
    translation_mm: float = 10.0
    rotation_deg: float = 10.0
    bone: str = "femur"


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    geometry: ProjectionGeometry = field(default_factory=ProjectionGeometry.lateral)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    benchmark: BenchmarkOptions = field(default_factory=BenchmarkOptions)
    threshold_mm: float = 1.5
    seed: int = 0
    photons: float | None = None
    background: bool = False
    plateau_mode: str = "post-TKA"
    phantom_dir: str = "phantom"
    frames_dir: str = "frames"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "phantom" in d:
                d["phantom"] = PhantomConfig.from_dict(d["phantom"])
            if "geometry" in d:
                d["geometry"] = ProjectionGeometry.from_dict(d["geometry"])
            if "registration" in d:
                d["registration"] = RegistrationConfig.from_dict(d["registration"])
            if "trajectory" in d:
                d["trajectory"] = TrajectoryConfig(**d["trajectory"])
            if "benchmark" in d:
                d["benchmark"] = BenchmarkOptions(**d["benchmark"])
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.threshold_mm > 0:
            raise ConfigError("threshold_mm must be positive")
        if self.photons is not None and not self.photons > 0:
            raise ConfigError("photons must be positive")
        if self.plateau_mode not in MODES:
            raise ConfigError(f"plateau_mode must be one of {MODES}")
        if self.benchmark.bone not in BONE_LABELS:
            raise ConfigError(f"benchmark bone must be one of {BONE_LABELS}")
        if self.benchmark.trials < 1:
            raise ConfigError("benchmark needs at least one trial")
        self.geometry.validate()

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "geometry": self.geometry.to_dict(),
            "registration": self.registration.to_dict(),
            "trajectory": asdict(self.trajectory),
            "benchmark": asdict(self.benchmark),
            "threshold_mm": self.threshold_mm,
            "seed": self.seed,
            "photons": self.photons,
            "background": self.background,
            "plateau_mode": self.plateau_mode,
            "phantom_dir": self.phantom_dir,
            "frames_dir": self.frames_dir,
        }


# -- file helpers ---------------------------------------------------------------------

def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_phantom(directory, v, masks, landmarks) -> None:
    os.makedirs(directory, exist_ok=True)
    save_volume(v, os.path.join(directory, "volume.vol"))
    for name, m in masks.items():
        save_mask(m, os.path.join(directory, f"{name}.mask"))
    save_landmarks(landmarks, os.path.join(directory, "landmarks.json"))


def load_phantom(directory):
    if not os.path.isdir(directory):
        raise ConfigError(f"phantom directory {directory!r} not found; run the phantom command first")
    v = load_volume(os.path.join(directory, "volume.vol"))
    masks = {}
    for name in BONE_LABELS:
        path = os.path.join(directory, f"{name}.mask")
        if os.path.exists(path):
            masks[name] = load_mask(path)
    landmarks = load_landmarks(os.path.join(directory, "landmarks.json"))
    return v, masks, landmarks


def poses_to_json(frames: list) -> list:
    return [{k: (None if p is None else p.to_dict()) for k, p in fr.items()} for fr in frames]


def load_poses(path) -> list:
    """Per-frame bone -> pose dicts from a truth, track or register file."""
    d = read_json(path)
    if isinstance(d, dict) and "frames" in d:
        frames = [{k: b["pose"] for k, b in fr["bones"].items()} for fr in d["frames"]]
    elif isinstance(d, dict) and "bones" in d:
        frames = [{k: b["pose"] for k, b in d["bones"].items()}]
    elif isinstance(d, list):
        frames = d
    else:
        raise ConfigError(f"{path}: unrecognized pose file")
    return [{k: (None if p is None else Pose6DoF.from_dict(p)) for k, p in fr.items()} for fr in frames]


def save_frames(directory, frames, masks2d, truth, g) -> None:
    os.makedirs(directory, exist_ok=True)
    for k, (img, m2) in enumerate(zip(frames, masks2d)):
        save_image(img, os.path.join(directory, f"frame_{k:03d}.img"), kind="drr")
        for name, m in m2.items():
            save_image(Image2D(m.astype(float), img.pixel_spacing, m), os.path.join(directory, f"frame_{k:03d}.{name}.mask2d"),
                       kind="mask")
    write_json(os.path.join(directory, "truth.json"), poses_to_json(truth))
    save_geometry(g, os.path.join(directory, "geometry.json"))


def load_frames(directory, bones):
    if not os.path.isdir(directory):
        raise ConfigError(f"frames directory {directory!r} not found; run the simulate command first")
    names = sorted(f for f in os.listdir(directory) if f.startswith("frame_") and f.endswith(".img"))
    if not names:
        raise ConfigError(f"no frames in {directory!r}")
    frames, masks2d = [], []
    for n in names:
        stem = os.path.join(directory, n[: -len(".img")])
        frames.append(load_image(stem + ".img"))
        m2 = {}
        for b in bones:
            path = f"{stem}.{b}.mask2d"
            if os.path.exists(path):
                m2[b] = load_image(path).mask
        masks2d.append(m2)
    g = load_geometry(os.path.join(directory, "geometry.json"))
    return frames, masks2d, g


# -- commands -----------------------------------------------------------------------

def cmd_phantom(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm = make_knee_phantom(cfg.phantom)
    d = os.path.join(out, cfg.phantom_dir)
    save_phantom(d, v, masks, lm)
    return {"phantom_dir": d, "voxels": {k: m.count for k, m in masks.items()}}


def cmd_simulate(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm = load_phantom(os.path.join(out, cfg.phantom_dir))
    frames, masks2d, truth = simulate_sequence(v, masks, lm, cfg.geometry, cfg.trajectory, cfg.photons,
                                               seed=cfg.seed, background=cfg.background)
    d = os.path.join(out, cfg.frames_dir)
    save_frames(d, frames, masks2d, truth, cfg.geometry)
    return {"frames_dir": d, "frames": len(frames)}


def _sequence_inputs(cfg, out):
    v, masks, lm = load_phantom(os.path.join(out, cfg.phantom_dir))
    frames, masks2d, g = load_frames(os.path.join(out, cfg.frames_dir), masks)
    return v, masks, lm, frames, masks2d, g


def cmd_register(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm, frames, masks2d, g = _sequence_inputs(cfg, out)
    k = args.frame
    if not 0 <= k < len(frames):
        raise ConfigError(f"frame {k} out of range (0..{len(frames) - 1})")
    res = register_frame(frames[k], v, masks, g, None, cfg.registration, masks2d[k] or None, frame=k)
    write_json(os.path.join(out, "register.json"), res.to_dict())
    return {"frame": k, "flagged": res.flagged, "wall_time_s": res.wall_time,
            "bone_times_s": {b: r.wall_time for b, r in res.bones.items()}}


def cmd_track(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm, frames, masks2d, g = _sequence_inputs(cfg, out)
    fixed = masks2d if all(masks2d) else None
    seq = track_sequence(frames, v, masks, g, cfg.registration, fixed, flexion_axis(lm))
    write_json(os.path.join(out, "track.json"), seq.to_dict())
    after = [f.total_evaluations for f in seq.frames[1:]]
    return {"frames": len(seq.frames), "kpm": cfg.registration.kpm.enabled and not cfg.registration.force_de,
            "flagged_frames": [f.frame for f in seq.frames if f.flagged],
            "evaluations_per_frame_after_first": float(np.mean(after)) if after else None,
            "frame_times_s": [f.wall_time for f in seq.frames]}


def score_poses(est: list, truth: list, masks: dict, threshold: float):
    if len(est) != len(truth):
        raise ConfigError(f"{len(est)} estimated frames vs {len(truth)} ground-truth frames")
    pts = {k: mask_to_pointcloud(m, 10000) for k, m in masks.items()}
    trials, failed = [], 0
    for e, gt in zip(est, truth):
        for b in sorted(set(e) & set(gt) & set(masks)):
            if e[b] is None:
                failed += 1
                continue
            trials.append(TrialRecord.score(gt[b], e[b], pts[b], threshold, bone=b))
    if not trials:
        raise ConfigError("no scorable trials")
    return trials, failed


def cmd_evaluate(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm = load_phantom(os.path.join(out, cfg.phantom_dir))
    est_path = args.estimate or os.path.join(out, "track.json")
    truth_path = args.truth or os.path.join(out, cfg.frames_dir, "truth.json")
    trials, failed = score_poses(load_poses(est_path), load_poses(truth_path), masks, cfg.threshold_mm)
    summary = summarize(trials, failed=failed)
    write_json(os.path.join(out, "trials.json"), [t.to_dict() for t in trials])
    save_summary(summary, os.path.join(out, "summary.json"), os.path.join(out, "summary.txt"), args.label)
    sys.stdout.write(summary.table(args.label))
    return {"estimate": est_path, "truth": truth_path, "trials": summary.count}


def cmd_kinematics(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm = load_phantom(os.path.join(out, cfg.phantom_dir))
    est = load_poses(args.estimate or os.path.join(out, "track.json"))
    axis = principal_axis(mask_to_pointcloud(masks["femur"], 20000))
    rep = build_report(est, lm, condyle_regions(masks["femur"], lm), axis, cfg.plateau_mode)
    rep.write_csv(os.path.join(out, "kinematics.csv"))
    rep.write_json(os.path.join(out, "kinematics.json"))
    return {"frames": len(rep.samples), "malaligned": rep.malaligned}


def run_benchmark(v, masks, g, cfg: ExperimentConfig, photons=None) -> tuple:
    """Single-frame trials at random poses of one bone; other bones stay neutral."""
    b = cfg.benchmark
    bone_masks = {b.bone: masks[b.bone]}
    models = build_models(v, bone_masks)
    renderer = FrameRenderer(v, masks, g, cfg.background)
    pts = mask_to_pointcloud(masks[b.bone], 10000)
    seeds = np.random.SeedSequence(cfg.seed).spawn(b.trials)
    trials, failed, records = [], 0, []
    for k in range(b.trials):
        rng = np.random.default_rng(seeds[k])
        poses = neutral_poses(masks)
        gt = random_pose(poses[b.bone].pivot, rng, b.translation_mm, b.rotation_deg)
        poses[b.bone] = gt
        img, m2 = renderer.render(poses, photons, rng)
        res = register_frame(img, v, bone_masks, g, None, cfg.registration, m2, frame=k, models=models)
        br = res.bones[b.bone]
        records.append({"trial": k, "result": br.to_dict()})
        if br.pose is None:
            failed += 1
            continue
        t = TrialRecord.score(gt, br.pose, pts, cfg.threshold_mm, bone=b.bone)
        trials.append(t)
        records[-1]["score"] = t.to_dict()
    return trials, failed, records


def cmd_benchmark(cfg: ExperimentConfig, args, out: str) -> dict:
    v, masks, lm = load_phantom(os.path.join(out, cfg.phantom_dir))
    t0 = time.perf_counter()
    trials, failed, records = run_benchmark(v, masks, cfg.geometry, cfg, cfg.photons)
    if not trials:
        raise RuntimeError("every benchmark trial failed")
    summary = summarize(trials, failed=failed)
    write_json(os.path.join(out, "benchmark.json"), records)
    save_summary(summary, os.path.join(out, "benchmark_summary.json"), os.path.join(out, "benchmark_summary.txt"),
                 args.label)
    sys.stdout.write(summary.table(args.label))
    return {"trials": summary.count, "elapsed_s": time.perf_counter() - t0}


COMMANDS = {
    "phantom": (cmd_phantom, "generate the analytic knee phantom"),
    "simulate": (cmd_simulate, "render a flexion sequence with ground-truth poses"),
    "register": (cmd_register, "register one frame without a prior"),
    "track": (cmd_track, "register all frames in order with kinematic propagation"),
    "evaluate": (cmd_evaluate, "score estimated poses against ground truth"),
    "kinematics": (cmd_kinematics, "condyle-plateau distances and MLD report"),
    "benchmark": (cmd_benchmark, "single-frame trials at random poses"),
}


# -- argument handling ----------------------------------------------------------------

def _global_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--threads", type=int, default=d, help="worker threads (results do not depend on it)")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "out", help="output directory")
    p.add_argument("--no-kpm", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="disable the kinematic prior (global search every frame)")
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boneaxisreg", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        _global_options(sp, suppress=True)
        subs[name] = sp
    subs["simulate"].add_argument("--frames", type=int, help="number of frames")
    subs["simulate"].add_argument("--max-flexion", type=float, help="final flexion angle (deg)")
    subs["simulate"].add_argument("--photons", type=float, help="Poisson noise photon count per pixel")
    subs["simulate"].add_argument("--background", action="store_true", default=None,
                                  help="add the static soft-tissue background")
    subs["register"].add_argument("--frame", type=int, default=0)
    for name in ("evaluate", "kinematics"):
        subs[name].add_argument("--estimate", help="track/register/pose file (default OUT/track.json)")
    subs["evaluate"].add_argument("--truth", help="ground-truth poses (default OUT/frames/truth.json)")
    for name in ("evaluate", "benchmark"):
        subs[name].add_argument("--label", default="BoneAxis-Reg", help="row label in the summary table")
    subs["benchmark"].add_argument("--trials", type=int)
    subs["benchmark"].add_argument("--photons", type=float)
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        try:
            cfg = ExperimentConfig.from_dict(read_json(args.config))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
    else:
        cfg = ExperimentConfig()
    reg = cfg.registration
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    reg = replace(reg, seed=cfg.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        reg = replace(reg, workers=args.threads)
    if args.no_kpm:
        reg = replace(reg, force_de=True)
    cfg = replace(cfg, registration=reg)
    traj = cfg.trajectory
    if getattr(args, "frames", None) is not None:
        traj = replace(traj, n_frames=args.frames)
    if getattr(args, "max_flexion", None) is not None:
        traj = replace(traj, max_flexion_deg=args.max_flexion)
    cfg = replace(cfg, trajectory=traj)
    if getattr(args, "photons", None) is not None:
        cfg = replace(cfg, photons=args.photons)
    if getattr(args, "background", None):
        cfg = replace(cfg, background=True)
    if getattr(args, "trials", None) is not None:
        cfg = replace(cfg, benchmark=replace(cfg.benchmark, trials=args.trials))
    cfg.validate()
    return cfg


def _versions() -> dict:
    import numba
    import scipy
    import sklearn

    return {"boneaxisreg": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "scikit-learn": sklearn.__version__}


def _record_run(out, command, cfg, info, elapsed, argv) -> None:
    path = os.path.join(out, "run.json")
    try:
        runs = read_json(path)
    except (OSError, json.JSONDecodeError):
        runs = {}
    runs.setdefault("commands", {})[command] = {
        "argv": argv, "config": cfg.to_dict(), "seed": cfg.seed, "versions": _versions(),
        "timings": {"elapsed_s": elapsed}, "info": info,
    }
    runs["last_command"] = command
    write_json(path, runs)


def _error(kind: str, exc: Exception, code: int) -> int:
    json.dump({"error": kind, "type": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, PhantomConfigError, ValueError) as exc:
        return _error("config", exc, EXIT_CONFIG)
    out = args.out
    os.makedirs(out, exist_ok=True)
    _set_threads(cfg.registration.workers)
    fn = COMMANDS[args.command][0]
    t0 = time.perf_counter()
    try:
        info = fn(cfg, args, out)
    except (ConfigError, PhantomConfigError) as exc:
        return _error("config", exc, EXIT_CONFIG)
    except Exception as exc:  # reported as structured JSON, not a traceback
        log.debug("command failed", exc_info=True)
        return _error("failure", exc, EXIT_FAILURE)
    _record_run(out, args.command, cfg, info, time.perf_counter() - t0, argv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
