"""Evaluation metrics: Gaussian W2, moments, sliced W2, flow NLL, path ELBO,
vertical-alignment of 3D fields, and mixing-time comparison."""

import json
from dataclasses import dataclass

import numpy as np

from . import sde
from .errors import DimensionError, NotPositiveDefiniteError, ValidationError
from .simulate import _noise, fd_divergence, integrate_flow, probability_flow_field

__all__ = [
    "MomentReport",
    "AlignmentReport",
    "GridSpec",
    "MixingResult",
    "w2_gaussian",
    "empirical_moments",
    "sliced_w2",
    "nll_bits_per_dim",
    "elbo_path",
    "alignment_metric",
    "mixing_time",
    "mixing_rate_compare",
    "metric_record",
    "write_metrics_json",
]

LOG2 = np.log(2.0)


def _std_normal_logpdf(z):
    d = z.shape[-1]
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * d * np.log(2 * np.pi)


def w2_gaussian(mu, sigma):
    """Squared W2 from N(0, I) to N(mu, sigma): ``|mu|^2 + Tr(I + sigma - 2 sigma^{1/2})``."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (mu.size, mu.size):
        raise DimensionError("sigma must be square and match mu")
    if np.max(np.abs(sigma - sigma.T)) > 1e-10 * max(1.0, np.max(np.abs(sigma))):
        raise NotPositiveDefiniteError("sigma is not symmetric")
    lam = np.linalg.eigvalsh(0.5 * (sigma + sigma.T))
    if np.any(lam <= 0):
        raise NotPositiveDefiniteError(f"sigma has eigenvalue {lam.min():.3e}")
    # Tr(I + S - 2 S^{1/2}) = sum (1 - sqrt(lam))^2, which is never negative
    return float(mu @ mu + np.sum((1.0 - np.sqrt(lam)) ** 2))


@dataclass(eq=False)
class MomentReport:
    n: int
    mean: np.ndarray
    cov: np.ndarray
    max_mean_dev: float
    max_cov_dev: float


def empirical_moments(samples, target_cov=None):
    """Sample mean and unbiased covariance, with deviations from N(0, target_cov)."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValidationError("need at least two samples")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    target = np.eye(x.shape[1]) if target_cov is None else np.asarray(target_cov, dtype=float)
    return MomentReport(x.shape[0], mean, cov, float(np.max(np.abs(mean))), float(np.max(np.abs(cov - target))))


def random_directions(dim, n, rng):
    u = rng.standard_normal((n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _quantile_w2(a, b):
    if a.size == b.size:
        return np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2))
    q = (np.arange(max(a.size, b.size)) + 0.5) / max(a.size, b.size)
    return np.sqrt(np.mean((np.quantile(a, q) - np.quantile(b, q)) ** 2))


def sliced_w2(samples_a, samples_b, n_projections=128, rng=None, directions=None):
    """Mean over random unit directions of the 1D quantile W2 between projections."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if directions is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        directions = random_directions(a.shape[1], n_projections, rng)
    pa, pb = a @ directions.T, b @ directions.T
    return float(np.mean([_quantile_w2(pa[:, k], pb[:, k]) for k in range(directions.shape[0])]))


def nll_bits_per_dim(model, score, data, n_steps=1000, t_eps=sde.T_EPS, per_point=False):
    """Negative log-likelihood in bits/dim through the probability-flow ODE.

    Data are carried from ``t_eps`` to ``T``; ``log p_0(x) = log N(z; 0, I) + int div v dt``.
    """
    x = np.atleast_2d(np.asarray(data, dtype=float))
    traj = integrate_flow(model, score, x, "forward", n_steps, with_logdet=True, t_eps=t_eps,
                          save_steps=[n_steps])
    logp = _std_normal_logpdf(traj.final) + traj.logdet[-1]
    nll = -logp / (x.shape[1] * LOG2)
    return nll if per_point else float(np.mean(nll))


def elbo_path(model, score, x, n_mc, rng, n_steps=1000, t_eps=sde.T_EPS, return_se=False):
    """Monte Carlo path-space lower bound on ``log p_0(x)``.

    ``E[log N(X_T)] - int E[1/2 s^T D s + div(D s - f)] dt`` along ``n_mc``
    forward Euler-Maruyama paths started at ``x`` (``D = g g^T``).  ``x`` may
    be a single point or a batch; the time integral uses the trapezoid rule on
    the simulation grid.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    n_pts, d = pts.shape
    y = np.repeat(pts, n_mc, axis=0)
    T = model.schedule.horizon
    times = np.linspace(t_eps, T, n_steps + 1)
    dt = (T - t_eps) / n_steps

    def inner(z, t):
        dmat = sde.diffusion_matrix(model, z, t)
        s = score(z, t)
        ds = s @ dmat.T if dmat.ndim == 2 else np.einsum("...ij,...j->...i", dmat, s)
        return ds, s

    def integrand(z, t):
        ds, s = inner(z, t)

        def field(u, tt):
            return inner(u, tt)[0] - sde.drift(model, u, tt)

        return 0.5 * np.sum(s * ds, axis=1) + fd_divergence(field, z, t)

    acc = 0.5 * integrand(y, times[0])
    for k in range(n_steps):
        t = times[k]
        xi = rng.standard_normal(y.shape)
        y = y + sde.drift(model, y, t) * dt + _noise(model, y, t, dt, xi)
        w = 0.5 if k == n_steps - 1 else 1.0
        acc = acc + w * integrand(y, times[k + 1])
    per_path = _std_normal_logpdf(y) - acc * dt
    per_path = per_path.reshape(n_pts, n_mc)
    est = per_path.mean(axis=1)
    se = per_path.std(axis=1, ddof=1) / np.sqrt(n_mc) if n_mc > 1 else np.full(n_pts, np.nan)
    if single:
        est, se = float(est[0]), float(se[0])
    return (est, se) if return_se else est


MIDPOINT_TIMES = tuple(np.round(np.linspace(0.05, 0.95, 10), 10))


@dataclass(frozen=True)
class GridSpec:
    """Regular grid in the ``(x, z)`` plane at fixed ``y``, probed at several times.

    The default times are the midpoints of ten equal bins of ``[0, 1]``, so
    the mean alignment approximates an average over the whole process.
    """

    x_range: tuple = (-3.0, 3.0)
    z_range: tuple = (-1.0, 5.0)
    n_x: int = 25
    n_z: int = 24
    y: float = 0.0
    times: tuple = MIDPOINT_TIMES

    def points(self):
        xs = np.linspace(*self.x_range, self.n_x)
        zs = np.linspace(*self.z_range, self.n_z)
        gx, gz = np.meshgrid(xs, zs, indexing="xy")
        return np.stack([gx.ravel(), np.full(gx.size, self.y), gz.ravel()], axis=1)


@dataclass(eq=False)
class AlignmentReport:
    """``cosines`` and ``field`` carry a leading time axis matching ``grid.times``."""

    grid: GridSpec
    mean: float
    cosines: np.ndarray
    points: np.ndarray
    field: np.ndarray
    n_excluded: int


def alignment_metric(field, plane_z=2.0, grid=None):
    """Cosine between the generative direction ``-v`` and the unit normal toward the plane.

    ``field(points, t)`` returns the forward probability-flow field for ``(n, 3)``
    points.  Points where ``|v| < 1e-12`` or that lie on the plane are excluded;
    the mean runs over every remaining (point, time) pair.
    """
    grid = grid or GridSpec()
    pts = grid.points()
    side = np.sign(pts[:, 2] - plane_z)
    fields, cosines = [], []
    for t in grid.times:
        v = np.asarray(field(pts, t), dtype=float)
        if v.shape != pts.shape:
            raise DimensionError("alignment needs a 3D field")
        norm = np.linalg.norm(v, axis=1)
        keep = (norm >= 1e-12) & (side != 0)
        cos = np.full(pts.shape[0], np.nan)
        cos[keep] = side[keep] * v[keep, 2] / norm[keep]
        fields.append(v)
        cosines.append(cos)
    cosines = np.array(cosines)
    valid = ~np.isnan(cosines)
    mean = float(np.mean(cosines[valid])) if np.any(valid) else float("nan")
    return AlignmentReport(grid, mean, cosines, pts, np.array(fields), int(np.sum(~valid)))


def flow_field_fn(model, score):
    """``(points, t) -> v`` for alignment or plotting."""
    return lambda pts, t: probability_flow_field(model, score, pts, t)


@dataclass(frozen=True)
class MixingResult:
    b_iso: float
    b_aniso: float
    censored_iso: bool
    censored_aniso: bool


def mixing_time(model, data, threshold=0.1, n_samples=5000, n_grid=200, seed=0, n_projections=128):
    """First integrated time ``B(t)`` where sliced W2 to N(0, I) falls below ``threshold``.

    Marginals are sampled exactly from the transition kernel with common noise
    across the time grid; returns ``(B, censored)`` with ``B = inf`` if the
    threshold is never reached by ``T``.
    """
    rng = np.random.default_rng(seed)
    x0 = data.sample(n_samples, rng)
    xi = rng.standard_normal((n_samples, model.dim))
    ref = rng.standard_normal((n_samples, model.dim))
    dirs = random_directions(model.dim, n_projections, rng)
    times = np.linspace(model.schedule.horizon / n_grid, model.schedule.horizon, n_grid)
    mean_map, s, _ = sde.kernel_factors(model, times)
    for k, t in enumerate(times):
        xt = x0 @ mean_map[k].T + xi @ s[k].T
        if sliced_w2(xt, ref, directions=dirs) < threshold:
            return float(model.schedule.integral(t)), False
    return float("inf"), True


def mixing_rate_compare(iso_model, aniso_model, data, threshold=0.1, n_samples=5000, n_grid=200, seed=0,
                        n_projections=128, check_trace=True):
    """Mixing times of two models at equal ``Tr(R_inv)``, same data and seeds."""
    if check_trace:
        ti, ta = np.trace(iso_model.r_inv_matrix), np.trace(aniso_model.r_inv_matrix)
        if abs(ti - ta) > 1e-9:
            raise ValidationError(f"trace mismatch: {ti} vs {ta}")
    bi, ci = mixing_time(iso_model, data, threshold, n_samples, n_grid, seed, n_projections)
    ba, ca = mixing_time(aniso_model, data, threshold, n_samples, n_grid, seed, n_projections)
    return MixingResult(bi, ba, ci, ca)


def metric_record(metric, value, n, seed, config_hash):
    return {"metric": metric, "value": float(value), "n": int(n), "seed": int(seed), "config_hash": config_hash}


def write_metrics_json(records, path):
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")
