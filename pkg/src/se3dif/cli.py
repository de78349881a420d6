"""Command-line front end: ``se3dif <command> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Every command reads one JSON run configuration (all sections optional),
writes its outputs atomically into ``--out`` and exits with 0 on success,
1 on a runtime error and 2 on a configuration error. Errors are reported as
one tab-separated ``ERROR`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from se3dif import datagen as dg
from se3dif import evaluation as ev
from se3dif import fileio
from se3dif import gradcheck as gc
from se3dif import kinematics as kin
from se3dif import motionopt as mo
from se3dif import sampler as smp
from se3dif import training as tr
from se3dif.energymodel import EnergyModel, GraspField, geometric_noise_scales
from se3dif.errors import ConfigError, Se3DifError

COMMANDS = ("gen-data", "train", "sample", "optimize", "eval", "infer-pose", "gradcheck")
PATH_KEYS = ("grasps", "sdf", "reference", "checkpoint", "poses", "pointcloud", "scene")
SECTIONS = {"seed", "object", "data", "model", "train", "sampler", "optimizer", "scene", "preset", "weights", "eval",
            "infer", "paths"}
DATA_KEYS = {"grasps", "sdf_points", "reference", "cloud_points", "near_sigma", "bbox_pad", "standoff", "families"}
MODEL_KEYS = {"code_dim", "feature_dim", "encoder_hidden", "decoder_hidden", "point_scale"}
FAMILY_BY_NAME = {name: fam for fam, name in dg.FAMILY_NAMES.items()}


@dataclass
class RunConfig:
    seed: int = 0
    object: dict = field(default_factory=lambda: {"kind": "cylinder", "dims": [0.04, 0.12]})
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    scene: str = "pick_occlusion"
    preset: str | None = None
    weights: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        unknown = set(d) - SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, allowed in (("data", DATA_KEYS), ("model", MODEL_KEYS), ("paths", set(PATH_KEYS)),
                              ("eval", {"threshold"}), ("infer", {"iters", "step", "k", "init"})):
            extra = set(d.get(name, {})) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
        cfg = cls(**{k: v for k, v in d.items()}, base_dir=Path(base_dir))
        # validate the sub-configurations eagerly so bad keys fail before any work
        cfg.train_config()
        cfg.sampler_config()
        cfg.optimizer_config()
        cfg.manifold()
        return cfg

    # -- typed views -----------------------------------------------------------

    def path(self, key: str, out: Path, default: str | None = None, must_exist: bool = True) -> Path:
        raw = self.paths.get(key)
        p = (self.base_dir / raw) if raw is not None else out / (default or f"{key}.json")
        if must_exist and not p.exists():
            raise ConfigError(f"{key} file not found: {p}")
        return p

    def analytic_object(self) -> dg.AnalyticObject:
        kind = self.object.get("kind", "cylinder")
        dims = self.object.get("dims", [0.04, 0.12])
        try:
            return dg.AnalyticObject.cylinder(*dims) if kind == "cylinder" else dg.AnalyticObject.box(dims)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad object: {err}") from None

    def manifold(self) -> dg.GraspManifold:
        names = self.data.get("families", ["side", "top"])
        try:
            fams = tuple(FAMILY_BY_NAME[n] for n in names)
        except KeyError as err:
            raise ConfigError(f"unknown grasp family {err}") from None
        try:
            return dg.GraspManifold(self.analytic_object(), self.data.get("standoff", 0.02), fams)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig.from_dict({"seed": self.seed, **self.train})

    def sampler_config(self, threads=None) -> smp.SamplerConfig:
        d = {"seed": self.seed, **self.sampler}
        if threads is not None:
            d["threads"] = threads
        return smp.SamplerConfig.from_dict(d)

    def optimizer_config(self, threads=None, particles=None) -> mo.OptimizerConfig:
        d = {"seed": self.seed, **self.optimizer}
        if threads is not None:
            d["threads"] = threads
        if particles is not None:
            d["n_particles"] = particles
        return mo.OptimizerConfig.from_dict(d)

    def threshold(self) -> float:
        return float(self.eval.get("threshold", dg.DEFAULT_SUCCESS_THRESHOLD))


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc, p.parent)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _sidecar(out: Path, command: str, started: float) -> None:
    """Timestamps live here only, so every other output stays reproducible."""
    line = f"{command}\tstarted={time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))}" \
           f"\twall_clock={time.time() - started:.3f}\n"
    with open(out / "run.log", "a") as fh:
        fh.write(line)


def new_model(cfg: RunConfig, seed: int) -> EnergyModel:
    tcfg = cfg.train_config()
    m = cfg.model
    return EnergyModel.create(
        code_dim=m.get("code_dim", 8),
        feature_dim=m.get("feature_dim", 7),
        encoder_hidden=tuple(m.get("encoder_hidden", (128, 128, 128, 128))),
        decoder_hidden=tuple(m.get("decoder_hidden", (128, 128, 128))),
        noise_scales=geometric_noise_scales(tcfg.sigma_min, tcfg.sigma_max, tcfg.levels),
        point_scale=m.get("point_scale", 0.02),
        seed=seed,
    )


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    obj, manifold = cfg.analytic_object(), cfg.manifold()
    d = cfg.data
    grasps, sdf = dg.generate_datasets(obj, manifold, (d.get("grasps", 2000), d.get("sdf_points", 2000)), cfg.seed,
                                       d.get("near_sigma", 0.01), d.get("bbox_pad", 0.05))
    ref_poses, ref_labels = manifold.sample(d.get("reference", 200), np.random.default_rng([cfg.seed, 1]))
    meta = {"seed": cfg.seed, "object": cfg.object}
    fileio.save_grasps(out / "grasps.json", grasps, meta)
    fileio.save_sdf(out / "sdf.json", sdf, meta)
    fileio.save_grasps(out / "reference.json", dg.GraspDataset(ref_poses, ref_labels), {**meta, "held_out": True})
    cloud = dg.sample_surface(obj, d.get("cloud_points", 256), np.random.default_rng([cfg.seed, 2]))
    fileio.save_pointcloud(out / "pointcloud.json", cloud, {**meta, "frame": "object"})
    print(f"grasps={len(grasps)}\tsdf={len(sdf)}\treference={len(ref_poses)}\tcloud={len(cloud)}")
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    tcfg = cfg.train_config()
    grasps = fileio.load_grasps(cfg.path("grasps", out))
    sdf = fileio.load_sdf(cfg.path("sdf", out))
    model, report = tr.train(new_model(cfg, tcfg.seed), tr.ObjectData(grasps, sdf), tcfg)
    fileio.save_checkpoint(out / "checkpoint.json", model, tcfg.steps,
                           {"init_seed": tcfg.seed, "train_seed": tcfg.seed, "train": tcfg.to_dict()})
    report.write_metrics(out / "metrics.tsv")
    last = report.total[-1] if report.total else float("nan")
    print(f"steps={tcfg.steps}\tfinal_loss={last!r}\tchecksum={report.checksum}")
    return 0


def _load_model(cfg: RunConfig, out: Path):
    model, _ = fileio.load_checkpoint(cfg.path("checkpoint", out))
    return model


def _print_report(report: ev.EvalReport) -> None:
    print(report.metrics_line())


def cmd_sample(cfg: RunConfig, out: Path, args) -> int:
    model = _load_model(cfg, out)
    scfg = cfg.sampler_config(args.threads)
    if args.particles is not None:
        scfg.n_particles = args.particles
    trace = smp.sample(model, scfg)
    fileio.save_poses(out / "poses.json", trace.poses, trace.energies, {"seed": scfg.seed})
    ref_path = cfg.path("reference", out, must_exist=False)
    reference = None
    if ref_path.exists():
        reference = fileio.load_grasps(ref_path).poses
        reference = reference[: len(trace.poses)] if len(reference) >= len(trace.poses) else None
    report = ev.evaluate(trace.poses, cfg.manifold(), reference, cfg.threshold())
    fileio.save_report(out / "report.json", report.as_dict())
    _print_report(report)
    return 0


def optimize_scene(cfg: RunConfig, model, scene: mo.Scene, mode: str, ocfg: mo.OptimizerConfig):
    objective = scene.objective(GraspField(model, scene.object_pose, 0))
    if mode == "decoupled":
        return objective, mo.decoupled_optimize(objective, ocfg)
    return objective, mo.optimize(objective, ocfg)


def cmd_optimize(cfg: RunConfig, out: Path, args) -> int:
    model = _load_model(cfg, out)
    scene_ref = cfg.paths.get("scene")
    scene = mo.load_scene(cfg.path("scene", out) if scene_ref else cfg.scene)
    if cfg.preset is not None:
        scene.preset = cfg.preset
    scene.weights.update(cfg.weights)
    ocfg = cfg.optimizer_config(args.threads, args.particles)
    objective, res = optimize_scene(cfg, model, scene, args.mode, ocfg)
    b = res.best_index
    breakdown = {k: float(v[b]) for k, v in res.breakdown.items()}
    outcome = mo.grasp_outcome(objective, res.best, scene.object_pose, cfg.manifold(), cfg.threshold())
    meta = {"mode": args.mode, "scene": scene.name, "particles": ocfg.n_particles, "best_index": b, **outcome}
    fileio.save_trajectory(out / "trajectory.json", res.best, ocfg.seed, res.best_cost, breakdown, meta)
    fileio.write_history(out / "history.tsv", res.history)
    fields = {"cost": res.best_cost, **breakdown, **outcome}
    print("\t".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items()))
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    poses, _ = fileio.load_poses(cfg.path("poses", out))
    ref_path = cfg.path("reference", out, must_exist=False)
    reference = None
    if ref_path.exists():
        reference = fileio.load_grasps(ref_path).poses
        if len(reference) < len(poses):
            raise ConfigError("reference set is smaller than the pose set")
        reference = reference[: len(poses)]
    report = ev.evaluate(poses, cfg.manifold(), reference, cfg.threshold())
    fileio.save_report(out / "report.json", report.as_dict())
    _print_report(report)
    return 0


def cmd_infer_pose(cfg: RunConfig, out: Path, args) -> int:
    model = _load_model(cfg, out)
    cloud = fileio.load_pointcloud(cfg.path("pointcloud", out))
    opts = cfg.infer
    init = None if opts.get("init") is None else fileio.poses_from_rows([opts["init"]])[0]
    pose, history = ev.infer_object_pose(model, cloud, 0, init, opts.get("iters", 100), opts.get("k", 1),
                                         opts.get("step", 0.05), return_history=True)
    residual = ev.sdf_residual(model, cloud, pose)
    fileio.save_poses(out / "pose.json", pose[None], None, {"objective": history.tolist(), "residual": residual})
    print(f"residual={residual!r}\titers={len(history) - 1}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> int:
    ckpt = cfg.path("checkpoint", out, must_exist=False)
    if cfg.paths.get("checkpoint") is not None and not ckpt.exists():
        raise ConfigError(f"checkpoint file not found: {ckpt}")
    model = fileio.load_checkpoint(ckpt)[0] if ckpt.exists() else new_model(cfg, cfg.seed)
    checks = gc.run_all(model, kin.load_chain("arm6"), cfg.seed)
    rows = [c.row() for c in checks]
    fileio.write_table(out / "gradcheck.tsv", ["check", "rel_error", "tolerance", "status"], rows)
    for name, err, tol, status in rows:
        print(f"{status}\t{name}\t{err:.3e}\t{tol:.0e}")
    return 0 if all(c.passed for c in checks) else 1


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "infer-pose": cmd_infer_pose,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="se3dif", description="Grasp energy fields on SE(3) and trajectory diffusion.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--out", default=".", help="output directory (default: current directory)")
    parser.add_argument("--threads", type=int, help="worker threads for particle blocks")
    parser.add_argument("--mode", choices=("joint", "decoupled"), default="joint", help="optimize only")
    parser.add_argument("--particles", type=int, help="particle count (optimize, sample)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.particles is not None and args.particles < 1:
            raise ConfigError("--particles must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        started = time.time()
        code = HANDLERS[args.command](cfg, out, args)
        _sidecar(out, args.command, started)
        return code
    except ConfigError as err:
        print(err.machine_line(), file=sys.stderr)
        return 2
    except Se3DifError as err:
        print(err.machine_line(), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as err:
        print(f"ERROR\t{type(err).__name__}\t{err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
