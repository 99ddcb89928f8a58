"""Denoising score matching with optionally learnable forward processes.

Noisy inputs are drawn with the reparameterisation
``x_t = mean_map(t) x0 + cov(t)^{1/2} xi`` so the loss is a smooth function
of the forward-model parameters.  Those parameters are few (at most
``d^2``), so their gradients are taken by central differences with the same
``(t, xi)`` draw on both sides; the score network uses exact backprop.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import sde
from .errors import TrainingDivergedError, ValidationError
from .score import ScoreNetParams, scorenet_grad
from .simulate import RngSpec, probability_flow_field

__all__ = [
    "Mode",
    "Weighting",
    "TrainConfig",
    "TrainState",
    "AdamMoments",
    "loss_weight",
    "draw_noise",
    "dsm_objective",
    "dsm_loss",
    "reg_objective",
    "reg_penalty",
    "optimizer_step",
    "fit",
    "write_loss_csv",
]

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
DEFAULT_REG = 0.01
FD_STEP_FORWARD = 1e-5


class Mode(str, enum.Enum):
    JOINT = "joint"
    MIX = "mix"
    SCORE_ONLY = "score_only"


class Weighting(str, enum.Enum):
    KERNEL_VARIANCE = "kernel_variance"
    UNIT = "unit"


@dataclass
class TrainConfig:
    dataset: object
    model: sde.ForwardModel
    seed: int
    lr: float = 2e-4
    forward_lr: float = None
    batch_size: int = 96
    n_iters: int = 1000
    n_iters_stage2: int = None
    mode: Mode = Mode.SCORE_ONLY
    lam1: float = 0.0
    lam2: float = 0.0
    weighting: Weighting = Weighting.KERNEL_VARIANCE
    hidden: tuple = (128, 128, 128)
    n_freq: int = 8
    log_every: int = 100
    fd_step: float = FD_STEP_FORWARD
    # abort once the loss exceeds this multiple of the first-step loss
    divergence_factor: float = 1e6

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.weighting = Weighting(self.weighting)
        if self.lr <= 0 or (self.forward_lr is not None and self.forward_lr <= 0):
            raise ValidationError("learning rates must be positive")
        if self.batch_size < 1 or self.n_iters < 0:
            raise ValidationError("batch_size must be >= 1 and n_iters >= 0")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValidationError("regularisation weights must be nonnegative")

    @property
    def stages(self):
        """List of ``(n_iters, forward_live)`` pairs."""
        if self.mode == Mode.JOINT:
            return [(self.n_iters, True)]
        if self.mode == Mode.MIX:
            n2 = self.n_iters if self.n_iters_stage2 is None else self.n_iters_stage2
            return [(self.n_iters, True), (n2, False)]
        return [(self.n_iters, False)]


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass(eq=False)
class TrainState:
    score: ScoreNetParams
    model: sde.ForwardModel
    moments: dict
    seed: int
    step: int = 0
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    stage_forward: list = field(default_factory=list)

    @classmethod
    def init(cls, config):
        rng = RngSpec.derive(config.seed, "init").generator()
        score = ScoreNetParams.init(config.model.dim, config.hidden, config.n_freq,
                                    config.model.schedule, rng)
        moments = {
            "score": AdamMoments.zeros(score.flat().size),
            "forward": AdamMoments.zeros(config.model.params().size),
        }
        return cls(score, config.model, moments, config.seed)

    @property
    def forward_params(self):
        return self.model.params()


def loss_weight(schedule, t, weighting=Weighting.KERNEL_VARIANCE):
    if Weighting(weighting) == Weighting.UNIT:
        return np.ones_like(np.asarray(t, dtype=float))
    return -np.expm1(-schedule.integral(t))


def draw_noise(model, n, rng):
    """Per-example times uniform on ``[t_eps, T]`` and standard normal ``xi``."""
    t = rng.uniform(sde.T_EPS, model.schedule.horizon, n)
    xi = rng.standard_normal((n, model.dim))
    return t, xi


def _noisy_batch(model, x0, t, xi):
    mean_map, s, s_inv = sde.kernel_factors(model, t)
    xt = np.einsum("nij,nj->ni", mean_map, x0) + np.einsum("nij,nj->ni", s, xi)
    # -cov^{-1}(xt - M x0) = -S^{-1} xi for the symmetric root S
    target = -np.einsum("nij,nj->ni", s_inv, xi)
    return xt, target


def dsm_objective(score_fn, model, x0, t, xi, weighting=Weighting.KERNEL_VARIANCE):
    """Weighted DSM loss of an arbitrary ``score_fn(x, t)`` for a fixed noise draw."""
    xt, target = _noisy_batch(model, x0, t, xi)
    w = loss_weight(model.schedule, t, weighting)
    r = score_fn(xt, t) - target
    return float(np.mean(w * np.sum(r * r, axis=1)))


def _fd_forward(objective, model, h):
    p = model.params()
    g = np.zeros(p.size)
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        g[i] = (objective(model.with_params(p + e)) - objective(model.with_params(p - e))) / (2 * h)
    return g


def dsm_loss(state, model, x0, rng, forward_grad=False, weighting=Weighting.KERNEL_VARIANCE,
             fd_step=FD_STEP_FORWARD):
    """DSM loss on one batch plus gradients ``{"score": flat, "forward": flat}``."""
    x0 = np.asarray(x0, dtype=float)
    t, xi = draw_noise(model, x0.shape[0], rng)
    xt, target = _noisy_batch(model, x0, t, xi)
    w = loss_weight(model.schedule, t, weighting)
    loss, grads = scorenet_grad(state.score, xt, t, target, w)
    out = {"score": np.concatenate([g.ravel() for g in grads])}
    if forward_grad and model.params().size:
        score_fn = state.score.as_score()
        out["forward"] = _fd_forward(
            lambda m: dsm_objective(score_fn, m, x0, t, xi, weighting), model, fd_step)
    return loss, out


def _flow_rows(model, score_fn, x, t):
    """Probability-flow field with one time per row (constant-metric models)."""
    if model.kind == sde.Kind.VE or not model.constant_metric:
        return np.stack([probability_flow_field(model, score_fn, xk[None], tk)[0] for xk, tk in zip(x, t)])
    rate = model.schedule.rate(t)[:, None]
    r = model.r_inv_matrix
    s = score_fn(x, t)
    return 0.5 * rate * (model.scale * (-x @ r.T - 2.0 * x @ model.omega.T) - s @ r.T)


def reg_objective(score_fn, model, x0, t, xi, eps, lam1, lam2):
    """``lam1 T mean|v|^2 + lam2 T mean (eps^T v)^2`` at perturbed data points."""
    if lam1 == 0 and lam2 == 0:
        return 0.0
    xt, _ = _noisy_batch(model, x0, t, xi)
    v = _flow_rows(model, score_fn, xt, t)
    horizon = model.schedule.horizon
    kinetic = np.mean(np.sum(v * v, axis=1))
    proj = np.mean(np.sum(eps * v, axis=1) ** 2)
    return float(lam1 * horizon * kinetic + lam2 * horizon * proj)


def reg_penalty(state, model, x0, rng, lam1=DEFAULT_REG, lam2=DEFAULT_REG, fd_step=FD_STEP_FORWARD):
    """Vector-field penalty and its gradient with respect to forward parameters only."""
    x0 = np.asarray(x0, dtype=float)
    n = x0.shape[0]
    if lam1 == 0 and lam2 == 0:
        return 0.0, {"forward": np.zeros(model.params().size)}
    t, xi = draw_noise(model, n, rng)
    eps = rng.standard_normal((n, model.dim))
    score_fn = state.score.as_score()
    value = reg_objective(score_fn, model, x0, t, xi, eps, lam1, lam2)
    grad = _fd_forward(lambda m: reg_objective(score_fn, m, x0, t, xi, eps, lam1, lam2), model, fd_step)
    return value, {"forward": grad}


def _adam(param, grad, mom, lr):
    mom.count += 1
    mom.m = BETA1 * mom.m + (1 - BETA1) * grad
    mom.v = BETA2 * mom.v + (1 - BETA2) * grad * grad
    m_hat = mom.m / (1 - BETA1**mom.count)
    v_hat = mom.v / (1 - BETA2**mom.count)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def optimizer_step(state, grads, lr, forward_lr=None, frozen=()):
    """One Adam update of every group in ``grads`` that is not in ``frozen``."""
    if "score" in grads and "score" not in frozen:
        flat = _adam(state.score.flat(), grads["score"], state.moments["score"], lr)
        state.score = state.score.with_flat(flat)
    if "forward" in grads and "forward" not in frozen and grads["forward"].size:
        p = _adam(state.model.params(), grads["forward"], state.moments["forward"],
                  lr if forward_lr is None else forward_lr)
        state.model = state.model.with_params(p)
    state.step += 1
    return state


def _param_norms(state):
    return {"score": float(np.linalg.norm(state.score.flat())),
            "forward": float(np.linalg.norm(state.model.params()))}


def fit(config, state=None, on_stage_end=None, on_step=None):
    """Train per ``config.mode``; returns the final :class:`TrainState`.

    ``on_stage_end(stage_index, state)`` and ``on_step(state)`` are optional hooks.
    """
    state = state or TrainState.init(config)
    gen = RngSpec.derive(config.seed, "train").generator()
    regularised = config.lam1 > 0 or config.lam2 > 0
    window_loss, window_reg = [], []
    first_loss = None
    for stage, (n_iters, live) in enumerate(config.stages):
        live = live and state.model.params().size > 0
        frozen = () if live else ("forward",)
        for _ in range(n_iters):
            x0 = config.dataset.sample(config.batch_size, gen)
            loss, grads = dsm_loss(state, state.model, x0, gen, forward_grad=live,
                                   weighting=config.weighting, fd_step=config.fd_step)
            pen = 0.0
            if live and regularised:
                pen, pg = reg_penalty(state, state.model, x0, gen, config.lam1, config.lam2, config.fd_step)
                grads["forward"] = grads["forward"] + pg["forward"]
            total = loss + pen
            if first_loss is None:
                first_loss = max(total, 1e-12)
            blown = total > config.divergence_factor * first_loss
            if blown or not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(state.step + 1, total, _param_norms(state))
            optimizer_step(state, grads, config.lr, config.forward_lr, frozen)
            state.losses.append(loss)
            window_loss.append(loss)
            window_reg.append(pen)
            if state.step % config.log_every == 0:
                state.history.append((state.step, float(np.mean(window_loss)), float(np.mean(window_reg))))
                window_loss, window_reg = [], []
            if on_step is not None:
                on_step(state)
        state.stage_forward.append(state.model.params().copy())
        if on_stage_end is not None:
            on_stage_end(stage, state)
    return state


def write_loss_csv(state, path):
    """Loss history as ``step,loss,reg_penalty``."""
    with open(path, "w") as fh:
        fh.write("step,loss,reg_penalty\n")
        for step, loss, pen in state.history:
            fh.write(f"{step},{loss:.17g},{pen:.17g}\n")
