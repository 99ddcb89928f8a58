"""Euler-Maruyama for the forward and reverse SDEs, RK4 for the probability flow.

All integrators run on a fixed uniform grid.  States may carry a leading batch
axis of independent paths; every path then shares the time grid.
Gaussian increments come from numpy's PCG64 generator (ziggurat normals),
seeded by ``(seed, stream)`` through ``SeedSequence`` so runs are bit-stable
on the same build.
"""

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from . import sde
from .errors import DivergenceError, UnsupportedModelError
from .sde import T_EPS

MAX_LOGDET_DIM = 16
FD_STEP_DIV = 1e-5


@dataclass(frozen=True)
class RngSpec:
    seed: int
    stream: int = 0

    def generator(self):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream,))))

    @classmethod
    def derive(cls, seed, purpose):
        """Stream id from a stable hash of a purpose string."""
        digest = hashlib.sha256(purpose.encode("utf-8")).digest()
        return cls(seed, int.from_bytes(digest[:4], "little"))


@dataclass(eq=False)
class Trajectory:
    """Recorded states; ``states`` is ``(n_times, dim)`` or ``(n_times, n_paths, dim)``."""

    times: np.ndarray
    states: np.ndarray
    logdet: np.ndarray = None

    @property
    def final(self):
        return self.states[-1]

    def path(self, i):
        """Single-path view of a batched trajectory."""
        if self.states.ndim == 2:
            return self
        ld = None if self.logdet is None else self.logdet[:, i]
        return Trajectory(self.times, self.states[:, i, :], ld)


def _record_mask(n_steps, save_steps):
    if save_steps is None:
        return np.ones(n_steps + 1, dtype=bool)
    mask = np.zeros(n_steps + 1, dtype=bool)
    mask[np.asarray(save_steps, dtype=int)] = True
    return mask


def _noise(model, x, t, dt, xi):
    g = sde.diffusion_coeff(model, x, t)
    if g.ndim == 2:
        return np.sqrt(dt) * (xi @ g.T)
    return np.sqrt(dt) * np.einsum("...ij,...j->...i", g, xi)


def euler_maruyama_forward(model, x0, n_steps, rng, save_steps=None, t_start=0.0, t_end=None):
    """Forward Euler-Maruyama on ``[t_start, t_end]`` (default ``[0, T]``).

    ``save_steps`` selects which grid indices are recorded (default: all).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    t_end = model.schedule.horizon if t_end is None else t_end
    times = np.linspace(t_start, t_end, n_steps + 1)
    dt = (t_end - t_start) / n_steps
    x = np.array(x0, dtype=float)
    mask = _record_mask(n_steps, save_steps)
    out = [x.copy()] if mask[0] else []
    for k in range(n_steps):
        t = times[k]
        xi = gen.standard_normal(x.shape)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + sde.drift(model, x, t) * dt + _noise(model, x, t, dt, xi)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k + 1)
        if mask[k + 1]:
            out.append(x.copy())
    return Trajectory(times[mask], np.array(out))


def euler_maruyama_reverse(model, score, xT, n_steps=1000, rng=None, t_end=T_EPS, save_steps=None):
    """Reverse-time Euler-Maruyama from ``T`` down to ``t_end``.

    Drift is ``f - g g^T score`` with the spatial divergence of ``g g^T``
    included for position-dependent metrics; ``score(x, t)`` must accept
    batched ``x``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    T = model.schedule.horizon
    times = np.linspace(T, t_end, n_steps + 1)
    dt = (T - t_end) / n_steps
    y = np.array(xT, dtype=float)
    mask = _record_mask(n_steps, save_steps)
    out = [y.copy()] if mask[0] else []
    for k in range(n_steps):
        t = times[k]
        dmat = sde.diffusion_matrix(model, y, t)
        s = score(y, t)
        if dmat.ndim == 2:
            corr = s @ dmat.T
        else:
            corr = np.einsum("...ij,...j->...i", dmat, s)
        corr = corr + sde.diffusion_divergence(model, y, t)
        rev = sde.drift(model, y, t) - corr
        xi = gen.standard_normal(y.shape)
        y = y - rev * dt + _noise(model, y, t, dt, xi)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(k + 1)
        if mask[k + 1]:
            out.append(y.copy())
    return Trajectory(times[mask], np.array(out))


def probability_flow_field(model, score, x, t):
    """``v = f - 1/2 div(g g^T) - 1/2 g g^T score``."""
    x = np.asarray(x, dtype=float)
    dmat = sde.diffusion_matrix(model, x, t)
    s = score(x, t)
    if dmat.ndim == 2:
        ds = s @ dmat.T
    else:
        ds = np.einsum("...ij,...j->...i", dmat, s)
    return sde.drift(model, x, t) - 0.5 * sde.diffusion_divergence(model, x, t) - 0.5 * ds


def fd_divergence(field, x, t, h=FD_STEP_DIV):
    """Divergence of ``field(x, t)`` by per-coordinate central differences.

    All ``2 d`` shifted copies go through ``field`` in one batched call.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    shifts = np.concatenate([np.eye(d) * h, -np.eye(d) * h])
    pts = x[None, ...] + shifts.reshape((2 * d,) + (1,) * (x.ndim - 1) + (d,))
    vals = field(pts.reshape(-1, d), t).reshape(pts.shape)
    plus, minus = vals[:d], vals[d:]
    idx = np.arange(d)
    return np.sum((plus[idx, ..., idx] - minus[idx, ..., idx]), axis=0) / (2 * h)


def rk4_integrate(field, x0, t0, t1, n_steps, with_logdet=False, save_steps=None):
    """Classic RK4 for ``dx/dt = field(x, t)`` from ``t0`` to ``t1``.

    With ``with_logdet`` the divergence integral ``int div v dt`` is carried
    along as an extra state, so ``logdet[k]`` is its value at ``times[k]``.
    """
    x = np.array(x0, dtype=float)
    if with_logdet and x.shape[-1] > MAX_LOGDET_DIM:
        raise UnsupportedModelError(f"exact divergence limited to dim <= {MAX_LOGDET_DIM}")
    times = np.linspace(t0, t1, n_steps + 1)
    dt = (t1 - t0) / n_steps
    ld = np.zeros(x.shape[:-1])
    mask = _record_mask(n_steps, save_steps)
    xs = [x.copy()] if mask[0] else []
    lds = [ld.copy()] if mask[0] else []

    def rhs(y, t):
        v = field(y, t)
        dv = fd_divergence(field, y, t) if with_logdet else 0.0
        return v, dv

    for k in range(n_steps):
        t = times[k]
        k1, l1 = rhs(x, t)
        k2, l2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3, l3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4, l4 = rhs(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if with_logdet:
            ld = ld + dt / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k + 1)
        if mask[k + 1]:
            xs.append(x.copy())
            lds.append(np.array(ld, copy=True))
    return Trajectory(times[mask], np.array(xs), np.array(lds) if with_logdet else None)


def integrate_flow(model, score, x_start, direction="forward", n_steps=1000, with_logdet=False,
                   t_eps=T_EPS, save_steps=None):
    """Integrate the probability-flow ODE between ``t_eps`` and ``T``.

    ``direction="forward"`` maps data (at ``t_eps``) to latents (at ``T``);
    ``"reverse"`` goes the other way.  ``logdet`` accumulates ``int div v dt``
    along the direction of travel.
    """
    T = model.schedule.horizon
    t0, t1 = (t_eps, T) if direction == "forward" else (T, t_eps)
    if direction not in ("forward", "reverse"):
        raise ValueError("direction must be 'forward' or 'reverse'")

    def field(x, t):
        return probability_flow_field(model, score, x, t)

    return rk4_integrate(field, x_start, t0, t1, n_steps, with_logdet, save_steps)


def write_trajectory_csv(traj, path):
    """One row per recorded time: ``t,x0,...,x{d-1}[,logdet]`` with 17 significant digits."""
    if traj.states.ndim != 2:
        raise ValueError("write one path at a time; use Trajectory.path(i)")
    d = traj.states.shape[1]
    header = ["t"] + [f"x{i}" for i in range(d)] + (["logdet"] if traj.logdet is not None else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(traj.times):
            row = [t, *traj.states[k]]
            if traj.logdet is not None:
                row.append(traj.logdet[k])
            w.writerow([format(float(v), ".17g") for v in row])


def read_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    has_ld = header[-1] == "logdet"
    states = body[:, 1:-1] if has_ld else body[:, 1:]
    return Trajectory(body[:, 0], states, body[:, -1] if has_ld else None)
