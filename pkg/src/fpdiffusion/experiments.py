"""Small end-to-end experiments shared by the command line, tests and demos."""

from dataclasses import dataclass, field

import numpy as np

from . import matrix_param as mp
from . import sde
from .evaluation import GridSpec, alignment_metric, flow_field_fn
from .score import PlaneGaussian
from .simulate import RngSpec, euler_maruyama_reverse
from .train import DEFAULT_REG, Mode, TrainConfig, fit

__all__ = ["generate", "Toy3DConfig", "Toy3DResult", "run_toy3d", "field_grid_rows", "TOY3D_NAMES"]

TOY3D_NAMES = ("vp", "fp", "fp_reg")


def generate(model, score, n, seed, n_steps=1000, purpose="generate"):
    """Reverse Euler-Maruyama from N(0, I) at ``T`` down to ``t_eps``."""
    gen = RngSpec.derive(seed, purpose).generator()
    x_t = gen.standard_normal((n, model.dim))
    traj = euler_maruyama_reverse(model, score, x_t, n_steps, gen, save_steps=[n_steps])
    return traj.final


@dataclass
class Toy3DConfig:
    """Three matched runs on a Gaussian supported on the plane ``z = plane_z``:
    fixed VP, jointly learned FP_NOISE, and the same with the field penalty."""

    seed: int
    plane_z: float = 2.0
    n_iters: int = 3000
    lr: float = 1e-3
    forward_lr: float = 1e-2
    batch_size: int = 96
    hidden: tuple = (64, 64)
    lam1: float = DEFAULT_REG
    lam2: float = DEFAULT_REG
    normalize_trace: bool = True
    grid: GridSpec = field(default_factory=GridSpec)

    def train_configs(self):
        data = PlaneGaussian(self.plane_z)
        common = dict(seed=self.seed, n_iters=self.n_iters, lr=self.lr, forward_lr=self.forward_lr,
                      batch_size=self.batch_size, hidden=tuple(self.hidden))

        def fp():
            return sde.ForwardModel.fp_noise(mp.SpdParam.identity(3), normalize_trace=self.normalize_trace)

        return {
            "vp": TrainConfig(data, sde.ForwardModel.vp(3), mode=Mode.SCORE_ONLY, **common),
            "fp": TrainConfig(data, fp(), mode=Mode.JOINT, **common),
            "fp_reg": TrainConfig(data, fp(), mode=Mode.JOINT, lam1=self.lam1, lam2=self.lam2, **common),
        }


@dataclass(eq=False)
class Toy3DResult:
    reports: dict
    states: dict

    @property
    def scores(self):
        return {k: r.mean for k, r in self.reports.items()}

    @property
    def ordering_holds(self):
        s = self.scores
        return s["fp_reg"] >= s["fp"] >= s["vp"]


def run_toy3d(config):
    grid = config.grid
    reports, states = {}, {}
    for name, cfg in config.train_configs().items():
        st = fit(cfg)
        states[name] = st
        field_fn = flow_field_fn(st.model, st.score.as_score())
        reports[name] = alignment_metric(field_fn, config.plane_z, grid)
    return Toy3DResult(reports, states)


def field_grid_rows(report, time_index=0):
    """Rows ``(x, z, vx, vz)`` of the projected field at one probe time."""
    p, v = report.points, report.field[time_index]
    return np.stack([p[:, 0], p[:, 2], v[:, 0], v[:, 2]], axis=1)
