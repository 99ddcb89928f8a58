"""Command-line entry point.

Every subcommand reads a flat ``section.key = value`` config file, writes its
effective configuration to ``<out>/config.echo`` and a ``manifest.json``
listing the files produced.  Exit codes: 0 success, 1 check or evaluation
failure, 2 runtime abort (including rejected configs).
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from . import evaluation as ev
from . import matrix_param as mp
from . import sde
from .errors import FPDiffusionError, TrainingDivergedError
from .experiments import TOY3D_NAMES, Toy3DConfig, field_grid_rows, generate, run_toy3d
from .score import MixtureSpec, PlaneGaussian, ScoreNetParams, mixture_score_at_time, stationary_score
from .simulate import (
    RngSpec,
    euler_maruyama_forward,
    euler_maruyama_reverse,
    integrate_flow,
    write_trajectory_csv,
)
from .train import AdamMoments, Mode, TrainConfig, TrainState, Weighting, fit, write_loss_csv

CHECKPOINT_VERSION = 1


class ConfigError(FPDiffusionError):
    pass


class CheckpointError(FPDiffusionError):
    pass


# -- config ---------------------------------------------------------------------------

# key -> (type, default); a default of None means optional with no value
SCHEMA = {
    "run.seed": ("int", None),
    "model.kind": ("str", "vp"),
    "model.dim": ("int", 2),
    "model.beta_min": ("float", 0.1),
    "model.beta_max": ("float", 20.0),
    "model.horizon": ("float", 1.0),
    "model.scale": ("float", 1.0),
    "model.init": ("str", "identity"),
    "model.init_scale": ("float", 0.5),
    "model.normalize_trace": ("bool", False),
    "model.r_inv": ("matrix", None),
    "model.omega": ("matrix", None),
    "model.a_eigs": ("floats", None),
    "model.b_eigs": ("floats", None),
    "data.kind": ("str", "mixture"),
    "data.weights": ("floats", None),
    "data.means": ("matrix", None),
    "data.stds": ("matrix", None),
    "data.plane_z": ("float", 2.0),
    "train.mode": ("str", "score_only"),
    "train.lr": ("float", 2e-4),
    "train.forward_lr": ("float", None),
    "train.batch_size": ("int", 96),
    "train.n_iters": ("int", 1000),
    "train.n_iters_stage2": ("int", None),
    "train.lam1": ("float", 0.0),
    "train.lam2": ("float", 0.0),
    "train.weighting": ("str", "kernel_variance"),
    "train.hidden": ("ints", (128, 128, 128)),
    "train.n_freq": ("int", 8),
    "train.log_every": ("int", 100),
    "train.checkpoint_every": ("int", 0),
    "simulate.direction": ("str", "forward"),
    "simulate.n_paths": ("int", 4),
    "simulate.n_steps": ("int", 1000),
    "simulate.logdet": ("bool", False),
    "simulate.checkpoint": ("str", None),
    "simulate.save_every": ("int", 1),
    "check.n_points": ("int", 100),
    "check.n_random": ("int", 0),
    "check.tol": ("float", 1e-8),
    "check.n_paths": ("int", 20000),
    "check.n_steps": ("int", 1000),
    "check.moment_tol": ("float", 0.05),
    "check.drift": ("matrix", None),
    "check.r_inv": ("matrix", None),
    "eval.metrics": ("strs", ("nll",)),
    "eval.score": ("str", "exact"),
    "eval.checkpoint": ("str", None),
    "eval.n_samples": ("int", 2000),
    "eval.n_steps": ("int", 1000),
    "eval.n_points": ("int", 10),
    "eval.n_mc": ("int", 200),
    "eval.mu": ("floats", None),
    "eval.sigma": ("matrix", None),
    "eval.threshold": ("float", 0.1),
    "eval.aniso_eigs": ("floats", None),
    "eval.n_projections": ("int", 128),
    "toy3d.n_iters": ("int", 3000),
    "toy3d.lr": ("float", 1e-3),
    "toy3d.forward_lr": ("float", 1e-2),
    "toy3d.batch_size": ("int", 96),
    "toy3d.hidden": ("ints", (64, 64)),
    "toy3d.lam1": ("float", 0.01),
    "toy3d.lam2": ("float", 0.01),
    "toy3d.plane_z": ("float", 2.0),
    "toy3d.normalize_trace": ("bool", True),
    "toy3d.plot_t": ("float", 0.5),
    "toy3d.grid_n": ("int", 25),
}


def _parse_value(kind, raw, key):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind == "str":
            return raw
        if kind == "strs":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if kind == "floats":
            return tuple(float(s) for s in raw.split(","))
        if kind == "ints":
            return tuple(int(s) for s in raw.split(","))
        if kind == "matrix":
            # rows separated by ';', entries by ','
            rows = [[float(s) for s in row.split(",")] for row in raw.split(";")]
            if len({len(r) for r in rows}) != 1:
                raise ValueError("ragged rows")
            return tuple(tuple(r) for r in rows)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    raise ConfigError(f"unknown type {kind}")


def _format_value(kind, value):
    if kind == "matrix":
        return "; ".join(", ".join(repr(float(v)) for v in row) for row in value)
    if kind in ("floats",):
        return ", ".join(repr(float(v)) for v in value)
    if kind in ("ints", "strs"):
        return ", ".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict
    explicit: frozenset

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["run.seed"]

    def echo(self):
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if v is None:
                continue
            lines.append(f"{key} = {_format_value(SCHEMA[key][0], v)}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self):
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()[:16]


def parse_config(text, seed_override=None):
    """Parse config text; unknown keys, duplicates and a missing seed are rejected."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _parse_value(SCHEMA[key][0], raw, key)
    if seed_override is not None:
        values["run.seed"] = int(seed_override)
        seen.add("run.seed")
    if values["run.seed"] is None:
        raise ConfigError("run.seed is mandatory")
    return ExperimentConfig(values, frozenset(seen))


def load_config(path, seed_override=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), seed_override)


# -- builders -------------------------------------------------------------------------


def build_schedule(cfg):
    return sde.TimeSchedule(cfg["model.beta_min"], cfg["model.beta_max"], cfg["model.horizon"])


def build_model(cfg, seed_purpose="model"):
    kind = sde.Kind(cfg["model.kind"])
    d = cfg["model.dim"]
    sched = build_schedule(cfg)
    m = cfg["model.scale"]
    rng = RngSpec.derive(cfg.seed, seed_purpose).generator()
    rand = cfg["model.init"] == "random"
    scale = cfg["model.init_scale"]
    if kind == sde.Kind.VP:
        return sde.ForwardModel.vp(d, sched, m)
    if kind == sde.Kind.FP_NOISE:
        spd = mp.SpdParam.random(d, rng, scale) if rand else mp.SpdParam.identity(d)
        return sde.ForwardModel.fp_noise(spd, sched, m, cfg["model.normalize_trace"])
    if kind == sde.Kind.FP_DRIFT:
        anti = mp.AntisymParam.random(d, rng, scale) if rand else mp.AntisymParam.zero(d)
        return sde.ForwardModel.fp_drift(anti, sched, m)
    if kind == sde.Kind.FP_GENERAL:
        spd = mp.SpdParam.random(d, rng, scale) if rand else mp.SpdParam.identity(d)
        anti = mp.AntisymParam.random(d, rng, scale) if rand else mp.AntisymParam.zero(d)
        return sde.ForwardModel.fp_general(spd, anti, sched, m)
    if kind == sde.Kind.FP_LINEAR:
        r = np.array(cfg["model.r_inv"] or np.eye(d), dtype=float)
        om = np.array(cfg["model.omega"] or np.zeros((d, d)), dtype=float)
        return sde.ForwardModel.fp_linear(r, om, sched, m)
    if kind == sde.Kind.FP_DAMPED:
        a = cfg["model.a_eigs"] or (1.0,) * (d // 2)
        b = cfg["model.b_eigs"] or (2.0,) * (d // 2)
        return sde.ForwardModel.fp_damped(mp.DampedBlocks(a, b), sched, m)
    if kind == sde.Kind.VE:
        return sde.ForwardModel.ve(d, horizon=cfg["model.horizon"])
    raise ConfigError(f"unsupported model.kind {kind.value}")


def build_dataset(cfg):
    kind = cfg["data.kind"]
    d = cfg["model.dim"]
    if kind == "plane":
        if d != 3:
            raise ConfigError("plane data needs model.dim = 3")
        return PlaneGaussian(cfg["data.plane_z"])
    if kind == "gaussian":
        means = np.array(cfg["data.means"] or np.zeros((1, d)), dtype=float)
        stds = np.array(cfg["data.stds"] or np.ones((1, d)), dtype=float)
        return MixtureSpec([1.0], means[:1], [np.diag(stds[0] ** 2)])
    if kind == "mixture":
        if cfg["data.weights"] is None:
            w = (0.5, 0.5)
            means = np.array([[-1.5] + [-0.5] * (d - 1), [1.5] + [0.5] * (d - 1)])
            stds = np.full((2, d), 0.4)
        else:
            w = cfg["data.weights"]
            means = np.array(cfg["data.means"], dtype=float)
            stds = np.array(cfg["data.stds"] or np.ones((len(w), d)), dtype=float)
        return MixtureSpec(w, means, [np.diag(s**2) for s in stds])
    raise ConfigError(f"unknown data.kind {kind!r}")


def build_train_config(cfg, model=None, dataset=None):
    return TrainConfig(
        dataset=dataset or build_dataset(cfg),
        model=model or build_model(cfg),
        seed=cfg.seed,
        lr=cfg["train.lr"],
        forward_lr=cfg["train.forward_lr"],
        batch_size=cfg["train.batch_size"],
        n_iters=cfg["train.n_iters"],
        n_iters_stage2=cfg["train.n_iters_stage2"],
        mode=Mode(cfg["train.mode"]),
        lam1=cfg["train.lam1"],
        lam2=cfg["train.lam2"],
        weighting=Weighting(cfg["train.weighting"]),
        hidden=tuple(cfg["train.hidden"]),
        n_freq=cfg["train.n_freq"],
        log_every=cfg["train.log_every"],
    )


# -- checkpoints ----------------------------------------------------------------------


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def model_to_dict(model):
    out = {
        "kind": model.kind.value,
        "dim": model.dim,
        "schedule": [model.schedule.beta_min, model.schedule.beta_max, model.schedule.horizon],
        "scale": float(model.scale),
        "normalize_trace": bool(model.normalize_trace),
    }
    if model.spd is not None:
        out["spd"] = {"generator": _floats(model.spd.orth.generator), "log_eigs": _floats(model.spd.log_eigs)}
    if model.antisym is not None:
        out["antisym"] = {"generator": _floats(model.antisym.orth.generator),
                          "block_eigs": _floats(model.antisym.block_eigs)}
    if model.blocks is not None:
        out["blocks"] = {"a_eigs": _floats(model.blocks.a_eigs), "b_eigs": _floats(model.blocks.b_eigs)}
    if model.kind in (sde.Kind.FP_LINEAR,) or (model.kind == sde.Kind.FP_GENERAL and model.spd is None):
        out["r_inv"] = _floats(model.r_inv_matrix)
    if model.kind in (sde.Kind.FP_LINEAR,) or (model.kind == sde.Kind.FP_GENERAL and model.antisym is None):
        out["omega"] = _floats(model.omega)
    return out


def model_from_dict(d):
    kind = sde.Kind(d["kind"])
    dim = d["dim"]
    sched = sde.TimeSchedule(*d["schedule"])
    m = d["scale"]

    def spd():
        s = d["spd"]
        return mp.SpdParam(mp.OrthogonalParam(dim, s["generator"]), s["log_eigs"])

    def anti():
        a = d["antisym"]
        return mp.AntisymParam(mp.OrthogonalParam(dim, a["generator"]), a["block_eigs"])

    def mat(key):
        return np.array(d[key], dtype=float).reshape(dim, dim)

    if kind == sde.Kind.VP:
        return sde.ForwardModel.vp(dim, sched, m)
    if kind == sde.Kind.VE:
        return sde.ForwardModel.ve(dim, horizon=sched.horizon)
    if kind == sde.Kind.FP_NOISE:
        return sde.ForwardModel.fp_noise(spd(), sched, m, d["normalize_trace"])
    if kind == sde.Kind.FP_DRIFT:
        return sde.ForwardModel.fp_drift(anti(), sched, m)
    if kind == sde.Kind.FP_LINEAR:
        return sde.ForwardModel.fp_linear(mat("r_inv"), mat("omega"), sched, m)
    if kind == sde.Kind.FP_GENERAL:
        r = spd() if "spd" in d else mat("r_inv")
        om = anti() if "antisym" in d else mat("omega")
        return sde.ForwardModel.fp_general(r, om, sched, m, dim=dim)
    if kind == sde.Kind.FP_DAMPED:
        b = d["blocks"]
        return sde.ForwardModel.fp_damped(mp.DampedBlocks(b["a_eigs"], b["b_eigs"]), sched, m)
    raise CheckpointError(f"cannot restore model kind {kind.value}")


def checkpoint_dict(state, config_hash):
    sc = state.score
    params = {}
    for k in range(len(sc.weights) // 2):
        params[f"W{k}"] = _floats(sc.weights[2 * k])
        params[f"b{k}"] = _floats(sc.weights[2 * k + 1])
    optim = {g: {"m": _floats(mo.m), "v": _floats(mo.v), "count": mo.count} for g, mo in state.moments.items()}
    return {
        "format_version": CHECKPOINT_VERSION,
        "model": model_to_dict(state.model),
        "arch": {"dim": sc.dim, "hidden": list(sc.hidden), "n_freq": sc.n_freq,
                 "scale_by_sigma": sc.scale_by_sigma},
        "params": params,
        "optimizer": optim,
        "step": state.step,
        "seed": state.seed,
        "config_hash": config_hash,
    }


def dumps_checkpoint(state, config_hash):
    return json.dumps(checkpoint_dict(state, config_hash), sort_keys=True, indent=1) + "\n"


def save_checkpoint(state, config_hash, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(state, config_hash))


def loads_checkpoint(text):
    """Returns ``(TrainState, config_hash)``."""
    d = json.loads(text)
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {d.get('format_version')} != {CHECKPOINT_VERSION}")
    model = model_from_dict(d["model"])
    arch = d["arch"]
    sizes = [arch["dim"] + 2 * arch["n_freq"], *arch["hidden"], arch["dim"]]
    weights = []
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(np.array(d["params"][f"W{k}"], dtype=float).reshape(fi, fo))
        weights.append(np.array(d["params"][f"b{k}"], dtype=float))
    score = ScoreNetParams(arch["dim"], tuple(arch["hidden"]), arch["n_freq"], model.schedule, weights,
                           arch["scale_by_sigma"])
    moments = {g: AdamMoments(np.array(o["m"], dtype=float), np.array(o["v"], dtype=float), o["count"])
               for g, o in d["optimizer"].items()}
    state = TrainState(score, model, moments, d["seed"], d["step"])
    return state, d["config_hash"]


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())


# -- output helpers -------------------------------------------------------------------


class Output:
    def __init__(self, out_dir, command, cfg):
        self.dir = out_dir
        self.command = command
        self.cfg = cfg
        self.files = []
        os.makedirs(out_dir, exist_ok=True)
        self.write_text("config.echo", cfg.echo())

    def path(self, name):
        if name not in self.files:
            self.files.append(name)
        return os.path.join(self.dir, name)

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")

    def finish(self, status):
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash,
            "status": status,
            "files": sorted(self.files),
        }
        with open(os.path.join(self.dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _score_from_checkpoint(path):
    if path is None or not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state, _ = load_checkpoint(path)
    return state.model, state.score.as_score()


# -- commands -------------------------------------------------------------------------


def cmd_check_stationary(cfg, out):
    checks = []
    d = cfg["model.dim"]
    gen = RngSpec.derive(cfg.seed, "check").generator()
    tol = cfg["check.tol"]

    def residual_check(name, model):
        x = gen.standard_normal((cfg["check.n_points"], model.dim)) / np.sqrt(model.scale)
        res = sde.fpk_residual(model, sde.GaussianDensity.standard(model.dim, model.scale), x)
        val = float(np.max(np.abs(res)))
        checks.append({"name": name, "value": val, "tol": tol, "passed": bool(val < tol)})

    if cfg["check.drift"] is not None:
        a = np.array(cfg["check.drift"], dtype=float)
        r = np.array(cfg["check.r_inv"] or np.eye(a.shape[0]), dtype=float)
        probe = sde.completeness_probe(a, r, seed=cfg.seed)
        checks.append({"name": "linear_drift_fpk", "value": probe.max_residual, "tol": tol,
                       "symmetric_defect": probe.symmetric_defect,
                       "passed": bool(probe.is_stationary_gaussian)})
    else:
        model = build_model(cfg)
        residual_check(f"fpk_{model.kind.value}", model)
        for i in range(cfg["check.n_random"]):
            dim = int(gen.integers(2, 7))
            rm = sde.ForwardModel.fp_general(mp.SpdParam.random(dim, gen, 0.5), mp.AntisymParam.random(dim, gen))
            residual_check(f"fpk_random_fp_general_{i}", rm)
        if cfg["check.n_paths"] > 0:
            x0 = np.full((cfg["check.n_paths"], model.dim), 2.0)
            traj = euler_maruyama_forward(model, x0, cfg["check.n_steps"], RngSpec.derive(cfg.seed, "check-sim"),
                                          save_steps=[cfg["check.n_steps"]])
            rep = ev.empirical_moments(traj.final, np.eye(model.dim) / model.scale)
            mt = cfg["check.moment_tol"]
            checks.append({"name": "long_run_mean", "value": rep.max_mean_dev, "tol": mt,
                           "passed": bool(rep.max_mean_dev < mt)})
            checks.append({"name": "long_run_cov", "value": rep.max_cov_dev, "tol": mt,
                           "passed": bool(rep.max_cov_dev < mt)})
    passed = all(c["passed"] for c in checks)
    out.write_json("check.json", {"passed": passed, "checks": checks, "config_hash": cfg.hash})
    for c in checks:
        if not c["passed"]:
            print(f"FAIL {c['name']}: {c['value']:.3e} (tol {c['tol']:.1e})", file=sys.stderr)
    return 0 if passed else 1


def cmd_simulate(cfg, out):
    direction = cfg["simulate.direction"]
    n, n_steps = cfg["simulate.n_paths"], cfg["simulate.n_steps"]
    every = max(1, cfg["simulate.save_every"])
    save = sorted(set(range(0, n_steps + 1, every)) | {n_steps})
    gen = RngSpec.derive(cfg.seed, "simulate")
    if cfg["simulate.checkpoint"] is not None:
        model, score = _score_from_checkpoint(cfg["simulate.checkpoint"])
    else:
        model, score = build_model(cfg), stationary_score
    if direction == "forward":
        x0 = build_dataset(cfg).sample(n, RngSpec.derive(cfg.seed, "data").generator())
        traj = euler_maruyama_forward(model, x0, n_steps, gen, save_steps=save)
    elif direction == "reverse":
        xt = RngSpec.derive(cfg.seed, "prior").generator().standard_normal((n, model.dim))
        traj = euler_maruyama_reverse(model, score, xt, n_steps, gen, save_steps=save)
    elif direction == "ode":
        x0 = build_dataset(cfg).sample(n, RngSpec.derive(cfg.seed, "data").generator())
        traj = integrate_flow(model, score, x0, "forward", n_steps, with_logdet=cfg["simulate.logdet"],
                              save_steps=save)
    else:
        raise ConfigError(f"simulate.direction must be forward, reverse or ode, got {direction!r}")
    for i in range(n):
        write_trajectory_csv(traj.path(i), out.path(f"path_{i:04d}.csv"))
    d = model.dim
    out.write_csv("samples.csv", [f"x{j}" for j in range(d)], traj.final)
    return 0


def cmd_train(cfg, out):
    tc = build_train_config(cfg)

    def stage_end(i, st):
        if tc.mode == Mode.MIX:
            save_checkpoint(st, cfg.hash, out.path(f"ckpt_stage{i + 1}.json"))

    def step_hook(st):
        k = cfg["train.checkpoint_every"]
        if k > 0 and st.step % k == 0:
            save_checkpoint(st, cfg.hash, out.path(f"ckpt_step{st.step:07d}.json"))

    try:
        state = fit(tc, on_stage_end=stage_end, on_step=step_hook)
    except TrainingDivergedError as exc:
        out.write_json("abort.json", {"step": exc.step, "loss": repr(exc.loss), "param_norms": exc.param_norms})
        raise
    save_checkpoint(state, cfg.hash, out.path("ckpt_final.json"))
    write_loss_csv(state, out.path("loss.csv"))
    return 0


def cmd_toy3d(cfg, out):
    n = cfg["toy3d.grid_n"]
    # an even number of z rows keeps grid points off the plane z = 2
    grid = ev.GridSpec(n_x=n, n_z=n - 1 if n % 2 else n)
    tc = Toy3DConfig(
        seed=cfg.seed, plane_z=cfg["toy3d.plane_z"], n_iters=cfg["toy3d.n_iters"], lr=cfg["toy3d.lr"],
        forward_lr=cfg["toy3d.forward_lr"], batch_size=cfg["toy3d.batch_size"], hidden=cfg["toy3d.hidden"],
        lam1=cfg["toy3d.lam1"], lam2=cfg["toy3d.lam2"], normalize_trace=cfg["toy3d.normalize_trace"], grid=grid,
    )
    res = run_toy3d(tc)
    report = {"config_hash": cfg.hash, "seed": cfg.seed, "plane_z": tc.plane_z, "ordering_holds": res.ordering_holds,
              "grid": {"x_range": list(grid.x_range), "z_range": list(grid.z_range), "n_x": grid.n_x,
                       "n_z": grid.n_z, "y": grid.y, "times": list(grid.times)},
              "plot_t": cfg["toy3d.plot_t"],
              "runs": {}}
    for name in TOY3D_NAMES:
        rep = res.reports[name]
        st = res.states[name]
        report["runs"][name] = {"mean_alignment": rep.mean, "n_excluded": rep.n_excluded,
                                "r_inv": st.model.r_inv_matrix.tolist()}
        plot_grid = ev.GridSpec(grid.x_range, grid.z_range, grid.n_x, grid.n_z, grid.y, (cfg["toy3d.plot_t"],))
        snap = ev.alignment_metric(ev.flow_field_fn(st.model, st.score.as_score()), tc.plane_z, plot_grid)
        out.write_csv(f"field_{name}.csv", ["x", "z", "vx", "vz"], field_grid_rows(snap))
        write_loss_csv(st, out.path(f"loss_{name}.csv"))
    out.write_json("alignment.json", report)
    return 0


def _exact_score(model, data):
    if not isinstance(data, MixtureSpec):
        raise ConfigError("eval.score = exact needs gaussian or mixture data")
    return lambda x, t: mixture_score_at_time(data, model, x, t)


def cmd_eval(cfg, out):
    data = None
    records = []

    def rec(name, value, n):
        records.append(ev.metric_record(name, value, n, cfg.seed, cfg.hash))

    metrics = cfg["eval.metrics"]
    needs_score = any(m in metrics for m in ("nll", "sliced_w2", "elbo"))
    if needs_score:
        data = build_dataset(cfg)
        if cfg["eval.score"] == "checkpoint":
            model, score = _score_from_checkpoint(cfg["eval.checkpoint"])
        else:
            model = build_model(cfg)
            score = _exact_score(model, data)
    for metric in metrics:
        if metric == "nll":
            x = data.sample(cfg["eval.n_samples"], RngSpec.derive(cfg.seed, "eval-nll").generator())
            rec("nll_bits_per_dim", ev.nll_bits_per_dim(model, score, x, cfg["eval.n_steps"]), len(x))
        elif metric == "w2":
            mu = np.array(cfg["eval.mu"], dtype=float)
            sigma = np.array(cfg["eval.sigma"], dtype=float)
            rec("w2_gaussian", ev.w2_gaussian(mu, sigma), 1)
        elif metric == "sliced_w2":
            n = cfg["eval.n_samples"]
            fake = generate(model, score, n, cfg.seed, cfg["eval.n_steps"], "eval-generate")
            real = data.sample(n, RngSpec.derive(cfg.seed, "eval-holdout").generator())
            val = ev.sliced_w2(fake, real, cfg["eval.n_projections"], RngSpec.derive(cfg.seed, "eval-proj").generator())
            rec("sliced_w2", val, n)
        elif metric == "elbo":
            gen = RngSpec.derive(cfg.seed, "eval-elbo").generator()
            pts = data.sample(cfg["eval.n_points"], gen)
            est = ev.elbo_path(model, score, pts, cfg["eval.n_mc"], gen, cfg["eval.n_steps"])
            rec("elbo", float(np.mean(est)), len(pts))
        elif metric == "mixing":
            d = 3
            aniso = np.array(cfg["eval.aniso_eigs"] or (0.5, 0.5, 2.0), dtype=float)
            iso = np.full(d, aniso.sum() / d)
            plane = PlaneGaussian(cfg["data.plane_z"])
            res = ev.mixing_rate_compare(sde.ForwardModel.fp_linear(np.diag(iso), np.zeros((d, d))),
                                         sde.ForwardModel.fp_linear(np.diag(aniso), np.zeros((d, d))),
                                         plane, cfg["eval.threshold"], cfg["eval.n_samples"], seed=cfg.seed)
            rec("mixing_b_iso", res.b_iso, cfg["eval.n_samples"])
            rec("mixing_b_aniso", res.b_aniso, cfg["eval.n_samples"])
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    ev.write_metrics_json(records, out.path("metrics.json"))
    return 0


COMMANDS = {
    "check-stationary": cmd_check_stationary,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "toy3d": cmd_toy3d,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fpdiffusion", description="Parameterised forward-process diffusion tools")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Output(args.out, args.command, cfg)
    try:
        code = COMMANDS[args.command](cfg, out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        out.finish("failed")
        return 1
    except TrainingDivergedError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        out.finish("aborted")
        return 2
    except (FPDiffusionError, ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        out.finish("aborted")
        return 2
    out.finish("ok" if code == 0 else "failed")
    return code


if __name__ == "__main__":
    sys.exit(main())
