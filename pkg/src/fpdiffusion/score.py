"""Score functions: analytic Gaussian / mixture oracles and a small MLP score network.

The network maps ``(x, t)`` to a score estimate.  Time enters through
sinusoidal features of the normalised integrated time ``B(t) / B(T)`` at
frequencies ``pi * k``; the
raw output is divided by the VP noise scale ``sqrt(1 - exp(-B(t)))`` so the
network only has to produce O(1) values near ``t = 0``.  Hidden activation is
SiLU, ``z * sigmoid(z)``.  Gradients are hand-derived.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import sde
from .errors import DimensionError, SingularCovarianceError, ValidationError

__all__ = [
    "MixtureSpec",
    "PlaneGaussian",
    "gaussian_score",
    "mixture_score_at_time",
    "mixture_logpdf_at_time",
    "conditional_score",
    "ScoreNetParams",
    "scorenet_eval",
    "scorenet_grad",
    "stationary_score",
]


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance is singular or not positive definite") from exc


def gaussian_score(mean, cov, x):
    """``-cov^{-1} (x - mean)``, batched over leading axes of ``x``."""
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    x = np.asarray(x, dtype=float)
    c = _chol(cov)
    z = (x - mean).reshape(-1, cov.shape[0]).T
    sol = np.linalg.solve(c.T, np.linalg.solve(c, z))
    return -sol.T.reshape(x.shape)


def stationary_score(x, t):
    """Score of N(0, I), which every FP model leaves invariant."""
    return -np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cv = np.asarray(self.covs, dtype=float)
        if cv.ndim == 2:
            cv = cv[None]
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValidationError("weights must lie on the simplex")
        if mu.shape[0] != w.size or cv.shape != (w.size, mu.shape[1], mu.shape[1]):
            raise DimensionError("inconsistent mixture shapes")
        for c in cv:
            _chol(c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cv)

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, n, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chols = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chols[comp], z)

    def logpdf(self, x):
        return mixture_logpdf_at_time(self, None, x, None)


@dataclass(frozen=True)
class PlaneGaussian:
    """Standard 2D Gaussian on the plane ``z = plane_z`` inside R^3.

    ``tangent_std`` scales the in-plane coordinates (1 gives the law whose
    optimal transport from N(0, I) is the vertical projection).
    """

    plane_z: float = 2.0
    tangent_std: float = 1.0
    dim: int = 3

    def sample(self, n, rng):
        out = np.empty((n, self.dim))
        out[:, :-1] = self.tangent_std * rng.standard_normal((n, self.dim - 1))
        out[:, -1] = self.plane_z
        return out


def _pushed_components(mix, model, t):
    if model is None:
        return mix.means, mix.covs
    k = sde.transition_kernel(model, t)
    means = mix.means @ k.mean_map.T
    covs = np.einsum("ij,njk,lk->nil", k.mean_map, mix.covs, k.mean_map) + k.cov
    return means, covs


def _component_terms(mix, model, x, t):
    x = np.asarray(x, dtype=float)
    means, covs = _pushed_components(mix, model, t)
    d = mix.dim
    flat = x.reshape(-1, d)
    logp = np.empty((mix.weights.size, flat.shape[0]))
    scores = np.empty((mix.weights.size,) + flat.shape)
    for i, (mu, c) in enumerate(zip(means, covs)):
        ch = _chol(c)
        z = np.linalg.solve(ch, (flat - mu).T)
        logp[i] = (np.log(mix.weights[i]) - 0.5 * np.sum(z * z, axis=0)
                   - np.sum(np.log(np.diag(ch))) - 0.5 * d * np.log(2 * np.pi))
        scores[i] = -np.linalg.solve(ch.T, z).T
    return logp, scores


def mixture_logpdf_at_time(mix, model, x, t):
    """Log density of the mixture after pushing it through the model's kernel at ``t``."""
    x = np.asarray(x, dtype=float)
    logp, _ = _component_terms(mix, model, x, t)
    return logsumexp(logp, axis=0).reshape(x.shape[:-1])


def mixture_score_at_time(mix, model, x, t):
    """Exact score of the time-``t`` marginal of a Gaussian mixture under a linear FP model."""
    x = np.asarray(x, dtype=float)
    logp, scores = _component_terms(mix, model, x, t)
    resp = np.exp(logp - logsumexp(logp, axis=0))
    return np.einsum("kn,knd->nd", resp, scores).reshape(x.shape)


def conditional_score(kernel, x0, xt):
    """``grad log p_t(xt | x0) = -cov^{-1} (xt - mean_map x0)``."""
    try:
        return gaussian_score(kernel.mean(x0), kernel.cov, xt)
    except SingularCovarianceError as exc:
        raise SingularCovarianceError(
            "kernel covariance is singular; evaluate at t >= t_eps (1e-5)"
        ) from exc


# -- score network --------------------------------------------------------------


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass(eq=False)
class ScoreNetParams:
    """Fully-connected score network ``[x, emb(t)] -> hidden... -> dim``.

    ``weights`` alternates ``W_k`` (``fan_in x fan_out``) and ``b_k``.
    """

    dim: int
    hidden: tuple
    n_freq: int
    schedule: sde.TimeSchedule
    weights: list = field(default_factory=list)
    scale_by_sigma: bool = True

    @classmethod
    def init(cls, dim, hidden=(128, 128, 128), n_freq=8, schedule=None, rng=None, scale_by_sigma=True):
        """He-normal weights ``N(0, 2 / fan_in)``, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [dim + 2 * n_freq, *hidden, dim]
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            weights.append(np.zeros(fan_out))
        return cls(dim, tuple(hidden), n_freq, schedule or sde.TimeSchedule(), weights, scale_by_sigma)

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    def flat(self):
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat(self, vec):
        out, pos = [], 0
        for w in self.weights:
            out.append(np.asarray(vec[pos : pos + w.size], dtype=float).reshape(w.shape))
            pos += w.size
        return ScoreNetParams(self.dim, self.hidden, self.n_freq, self.schedule, out, self.scale_by_sigma)

    def copy(self):
        return self.with_flat(self.flat().copy())

    def as_score(self):
        """Callable ``(x, t) -> score`` for the samplers."""
        return lambda x, t: scorenet_eval(self, x, t)

    def time_features(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        tau = self.schedule.integral(t) / self.schedule.integral(self.schedule.horizon)
        k = np.arange(1, self.n_freq + 1)
        arg = np.pi * tau[:, None] * k[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def noise_scale(self, t, n):
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        if not self.scale_by_sigma:
            return np.ones(n)
        return np.sqrt(-np.expm1(-self.schedule.integral(t)))


def _forward(params, x, t):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise DimensionError(f"input has dimension {x.shape[-1]}, network expects {params.dim}")
    flat = x.reshape(-1, params.dim)
    n = flat.shape[0]
    t_flat = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1]).reshape(-1)
    h = np.concatenate([flat, params.time_features(t_flat, n)], axis=1)
    pre, acts = [], [h]
    n_layers = len(params.weights) // 2
    for k in range(n_layers):
        z = h @ params.weights[2 * k] + params.weights[2 * k + 1]
        if k < n_layers - 1:
            pre.append(z)
            h = _silu(z)
            acts.append(h)
        else:
            h = z
    sig = params.noise_scale(t_flat, n)
    return h / sig[:, None], pre, acts, sig


def scorenet_eval(params, x, t):
    """Network score at ``x`` (any leading batch shape) and time(s) ``t``."""
    x = np.asarray(x, dtype=float)
    out, _, _, _ = _forward(params, x, t)
    return out.reshape(x.shape)


def scorenet_grad(params, x, t, target, weight=None):
    """Loss ``mean_n w_n |s(x_n, t_n) - target_n|^2`` and its gradient.

    Returns ``(loss, grads)`` with ``grads`` matching ``params.weights``.
    """
    x = np.asarray(x, dtype=float).reshape(-1, params.dim)
    target = np.asarray(target, dtype=float).reshape(x.shape)
    n = x.shape[0]
    w = np.ones(n) if weight is None else np.broadcast_to(np.asarray(weight, dtype=float), (n,))
    s, pre, acts, sig = _forward(params, x, t)
    resid = s - target
    loss = float(np.mean(w * np.sum(resid * resid, axis=1)))
    delta = (2.0 / n) * (w / sig)[:, None] * resid
    grads = [None] * len(params.weights)
    n_layers = len(params.weights) // 2
    for k in range(n_layers - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[2 * k].T) * _silu_grad(pre[k - 1])
    return loss, grads
