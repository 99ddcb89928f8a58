"""Forward SDE family with a standard-Gaussian stationary law.

Every FP model has the time-changed form::

    dX = (m beta'(t) / 2) [-R_inv(X) X - 2 omega X + div R_inv(X)] dt
         + sqrt(beta'(t) R_inv(X)) dW

with ``R_inv`` symmetric positive (semi-)definite and ``omega`` antisymmetric.
Only the drift carries the scale ``m``; the stationary law is N(0, I / m).
VP is the special case ``R_inv = I, omega = 0``.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from . import matrix_param as mp
from .errors import DimensionError, DomainError, UnsupportedModelError, ValidationError

T_EPS = 1e-5


class Kind(str, enum.Enum):
    VP = "vp"
    VE = "ve"
    FP_DRIFT = "fp_drift"
    FP_NOISE = "fp_noise"
    FP_LINEAR = "fp_linear"
    FP_GENERAL = "fp_general"
    FP_DAMPED = "fp_damped"


@dataclass(frozen=True)
class TimeSchedule:
    """Linear rate ``beta'(t)`` from ``beta_min`` at 0 to ``beta_max`` at ``horizon``."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (self.beta_max > self.beta_min > 0):
            raise ValidationError("need beta_max > beta_min > 0")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * self.horizon
        if np.any(t < -tol) or np.any(t > self.horizon + tol):
            raise DomainError(f"t outside [0, {self.horizon}]")
        return t

    def rate(self, t):
        t = self._check(t)
        return self.beta_min + t * (self.beta_max - self.beta_min) / self.horizon

    def integral(self, t):
        t = self._check(t)
        return self.beta_min * t + t**2 * (self.beta_max - self.beta_min) / (2 * self.horizon)


def schedule_rate(s, t):
    return s.rate(t)


def schedule_integral(s, t):
    return s.integral(t)


class SpatialMetricField:
    """Position-dependent inverse metric ``R_inv(x)``.

    ``constant(matrix)`` is x-independent.  ``diagonal(fn, dfn, d2fn)`` has
    ``R_inv(x) = diag(fn(x))`` where entry ``i`` depends on ``x_i`` only and
    ``dfn``/``d2fn`` return the first/second derivative of entry ``i`` with
    respect to ``x_i``.  ``general(fn)`` takes any callable returning
    ``(..., d, d)``; its derivatives are taken by central differences.
    """

    CONSTANT = "constant"
    DIAGONAL = "diagonal"
    GENERAL = "general"

    def __init__(self, kind, matrix=None, fn=None, dfn=None, d2fn=None):
        self.kind = kind
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.fn = fn
        self.dfn = dfn
        self.d2fn = d2fn

    @classmethod
    def constant(cls, matrix):
        return cls(cls.CONSTANT, matrix=matrix)

    @classmethod
    def diagonal(cls, fn, dfn, d2fn=None):
        return cls(cls.DIAGONAL, fn=fn, dfn=dfn, d2fn=d2fn)

    @classmethod
    def general(cls, fn):
        return cls(cls.GENERAL, fn=fn)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == self.CONSTANT:
            return np.broadcast_to(self.matrix, x.shape[:-1] + self.matrix.shape)
        if self.kind == self.DIAGONAL:
            diag = np.asarray(self.fn(x), dtype=float)
            return diag[..., :, None] * np.eye(x.shape[-1])
        return np.asarray(self.fn(x), dtype=float)


FD_STEP_FIELD = 1e-5


def divergence_term(fld, x, method="auto"):
    """Row divergences ``sum_j d/dx_j R_inv[i, j](x)``.

    ``method="fd"`` forces central differences even when analytic derivatives exist.
    """
    x = np.asarray(x, dtype=float)
    if fld.kind == SpatialMetricField.CONSTANT:
        return np.zeros_like(x)
    if fld.kind == SpatialMetricField.DIAGONAL and method != "fd":
        return np.asarray(fld.dfn(x), dtype=float)
    d = x.shape[-1]
    h = FD_STEP_FIELD
    out = np.zeros_like(x)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        col = (fld(x + e)[..., :, j] - fld(x - e)[..., :, j]) / (2 * h)
        out = out + col
    return out


@dataclass(frozen=True, eq=False)
class ForwardModel:
    kind: Kind
    dim: int
    schedule: TimeSchedule = field(default_factory=TimeSchedule)
    r_inv: object = None
    omega: np.ndarray = None
    scale: float = 1.0
    spd: mp.SpdParam = None
    antisym: mp.AntisymParam = None
    blocks: mp.DampedBlocks = None
    sigma_range: tuple = (0.01, 50.0)
    normalize_trace: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        if isinstance(self.r_inv, SpatialMetricField) and self.r_inv.kind != SpatialMetricField.CONSTANT:
            object.__setattr__(self, "_r_const", None)
        else:
            r = self.r_inv.matrix if isinstance(self.r_inv, SpatialMetricField) else self.r_inv
            r = np.asarray(r, dtype=float)
            if r.shape != (self.dim, self.dim):
                raise DimensionError(f"r_inv must be {self.dim}x{self.dim}")
            object.__setattr__(self, "_r_const", r)
            if self.kind == Kind.FP_DAMPED:
                object.__setattr__(self, "_r_sqrt", mp.psd_sqrt(r))
            else:
                object.__setattr__(self, "_r_sqrt", mp.spd_sqrt(r))
        om = np.asarray(self.omega, dtype=float)
        if om.shape != (self.dim, self.dim):
            raise DimensionError(f"omega must be {self.dim}x{self.dim}")
        if np.max(np.abs(om + om.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(om))):
            raise ValidationError("omega must be antisymmetric")
        object.__setattr__(self, "omega", om)

    # -- constructors -------------------------------------------------------

    @classmethod
    def vp(cls, dim, schedule=None, scale=1.0):
        return cls(Kind.VP, dim, schedule or TimeSchedule(), np.eye(dim), np.zeros((dim, dim)), scale)

    @classmethod
    def ve(cls, dim, sigma_min=0.01, sigma_max=50.0, horizon=1.0):
        # VE has no beta schedule; a placeholder keeps the horizon.
        sched = TimeSchedule(0.1, 20.0, horizon)
        return cls(Kind.VE, dim, sched, np.eye(dim), np.zeros((dim, dim)),
                   sigma_range=(float(sigma_min), float(sigma_max)))

    @classmethod
    def fp_drift(cls, antisym, schedule=None, scale=1.0):
        return cls(Kind.FP_DRIFT, antisym.dim, schedule or TimeSchedule(), np.eye(antisym.dim),
                   mp.realize_antisym(antisym), scale, antisym=antisym)

    @classmethod
    def fp_noise(cls, spd, schedule=None, scale=1.0, normalize_trace=False):
        r = mp.realize_spd(spd)
        if normalize_trace:
            r = r * (spd.dim / np.trace(r))
        return cls(Kind.FP_NOISE, spd.dim, schedule or TimeSchedule(), r,
                   np.zeros((spd.dim, spd.dim)), scale, spd=spd, normalize_trace=normalize_trace)

    @classmethod
    def fp_linear(cls, r_inv, omega, schedule=None, scale=1.0):
        r_inv = np.asarray(r_inv, dtype=float)
        return cls(Kind.FP_LINEAR, r_inv.shape[0], schedule or TimeSchedule(), r_inv,
                   np.asarray(omega, dtype=float), scale)

    @classmethod
    def fp_general(cls, r_inv, omega, schedule=None, scale=1.0, dim=None):
        """``r_inv``: SpdParam, matrix or SpatialMetricField; ``omega``: AntisymParam or matrix."""
        spd = antisym = None
        if isinstance(r_inv, mp.SpdParam):
            spd = r_inv
            r_inv = mp.realize_spd(spd)
        if isinstance(omega, mp.AntisymParam):
            antisym = omega
            omega = mp.realize_antisym(antisym)
        omega = np.asarray(omega, dtype=float)
        dim = dim or omega.shape[0]
        return cls(Kind.FP_GENERAL, dim, schedule or TimeSchedule(), r_inv, omega, scale,
                   spd=spd, antisym=antisym)

    @classmethod
    def fp_damped(cls, blocks, schedule=None, scale=1.0):
        omega, r_inv = mp.assemble_damped(blocks)
        return cls(Kind.FP_DAMPED, 2 * blocks.d, schedule or TimeSchedule(), r_inv, omega, scale,
                   blocks=blocks)

    # -- learnable forward parameters --------------------------------------

    def params(self):
        """Flat vector of learnable forward-process parameters (possibly empty)."""
        parts = []
        if self.kind in (Kind.FP_NOISE, Kind.FP_GENERAL) and self.spd is not None:
            parts += [self.spd.orth.generator, self.spd.log_eigs]
        if self.kind in (Kind.FP_DRIFT, Kind.FP_GENERAL) and self.antisym is not None:
            parts += [self.antisym.orth.generator, self.antisym.block_eigs]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_params(self, vec):
        vec = np.asarray(vec, dtype=float).ravel()
        if vec.size != self.params().size:
            raise DimensionError(f"expected {self.params().size} parameters, got {vec.size}")
        d = self.dim
        ng = mp.n_generator(d)
        pos = 0
        spd = self.spd
        antisym = self.antisym
        if self.kind in (Kind.FP_NOISE, Kind.FP_GENERAL) and spd is not None:
            spd = mp.SpdParam(mp.OrthogonalParam(d, vec[pos : pos + ng]), vec[pos + ng : pos + ng + d])
            pos += ng + d
        if self.kind in (Kind.FP_DRIFT, Kind.FP_GENERAL) and antisym is not None:
            antisym = mp.AntisymParam(mp.OrthogonalParam(d, vec[pos : pos + ng]), vec[pos + ng : pos + ng + d // 2])
        if self.kind == Kind.FP_NOISE:
            return ForwardModel.fp_noise(spd, self.schedule, self.scale, self.normalize_trace)
        if self.kind == Kind.FP_DRIFT:
            return ForwardModel.fp_drift(antisym, self.schedule, self.scale)
        if self.kind == Kind.FP_GENERAL:
            return ForwardModel.fp_general(spd if spd is not None else self.r_inv,
                                           antisym if antisym is not None else self.omega,
                                           self.schedule, self.scale, dim=d)
        return self

    # -- evaluation helpers -------------------------------------------------

    @property
    def constant_metric(self):
        return self._r_const is not None

    @property
    def r_inv_matrix(self):
        if self._r_const is None:
            raise UnsupportedModelError("spatially varying R_inv has no single matrix")
        return self._r_const

    def metric_at(self, x):
        """``R_inv`` at ``x``: ``(d, d)`` if constant, else ``(..., d, d)``."""
        if self._r_const is not None:
            return self._r_const
        return self.r_inv(x)

    def _rate(self, t):
        return float(self.schedule.rate(t))

    def _ve_sigma(self, t):
        smin, smax = self.sigma_range
        return smin * (smax / smin) ** (t / self.schedule.horizon)


def _check_x(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise DimensionError(f"state has dimension {x.shape[-1]}, model has {model.dim}")
    return x


def _div_metric(model, x):
    if model.constant_metric:
        return np.zeros_like(x)
    return divergence_term(model.r_inv, x)


def drift(model, x, t):
    """Drift ``f(x, t)``; ``x`` may carry leading batch axes."""
    x = _check_x(model, x)
    if model.kind == Kind.VE:
        return np.zeros_like(x)
    return (model.scale * model._rate(t) / 2.0) * _drift_inner(model, x)


def _drift_inner(model, x):
    r = model.metric_at(x)
    if r.ndim == 2:
        lin = x @ r.T
    else:
        lin = np.einsum("...ij,...j->...i", r, x)
    return -lin - 2.0 * (x @ model.omega.T) + _div_metric(model, x)


def diffusion_coeff(model, x, t):
    """``g(x, t) = sqrt(beta'(t) R_inv(x))`` (symmetric square root)."""
    x = _check_x(model, x)
    if model.kind == Kind.VE:
        smin, smax = model.sigma_range
        sig = model._ve_sigma(t)
        g2 = 2.0 * sig**2 * np.log(smax / smin) / model.schedule.horizon
        return np.sqrt(g2) * np.eye(model.dim)
    b = model._rate(t)
    if model.constant_metric:
        return np.sqrt(b) * model._r_sqrt
    r = model.metric_at(x)
    w, v = np.linalg.eigh(r)
    return np.sqrt(b) * np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0, None)), v)


def diffusion_matrix(model, x, t):
    """``g g^T = beta'(t) R_inv(x)``."""
    x = _check_x(model, x)
    if model.kind == Kind.VE:
        g = diffusion_coeff(model, x, t)
        return g @ g.T
    return model._rate(t) * model.metric_at(x)


def diffusion_divergence(model, x, t):
    """Row divergence of ``g g^T``."""
    x = _check_x(model, x)
    if model.kind == Kind.VE or model.constant_metric:
        return np.zeros_like(x)
    return model._rate(t) * divergence_term(model.r_inv, x)


# -- closed-form transition kernel ---------------------------------------------


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    """Law of ``X_t`` given ``X_0``: ``N(mean_map @ x0, cov)``."""

    mean_map: np.ndarray
    cov: np.ndarray

    def mean(self, x0):
        return np.asarray(x0, dtype=float) @ self.mean_map.T


_KERNEL_KINDS = (Kind.VP, Kind.VE, Kind.FP_LINEAR, Kind.FP_DRIFT, Kind.FP_NOISE, Kind.FP_GENERAL)


def _kernel_case(model):
    """Return "diag" (omega = 0), "rotation" (R_inv = I) or raise."""
    if model.kind not in _KERNEL_KINDS:
        raise UnsupportedModelError(f"no closed-form kernel for {model.kind.value}")
    if not model.constant_metric:
        raise UnsupportedModelError("closed-form kernel requires a constant R_inv")
    if model.kind == Kind.VE:
        return "ve"
    if not np.any(model.omega):
        return "diag"
    if np.array_equal(model.r_inv_matrix, np.eye(model.dim)):
        return "rotation"
    raise UnsupportedModelError(
        "closed-form covariance is only available for omega = 0 or R_inv = I"
    )


def transition_kernel(model, t):
    """Gaussian transition law of a linear FP model after time ``t``."""
    case = _kernel_case(model)
    d = model.dim
    bt = float(model.schedule.integral(t))
    if case == "ve":
        sig0 = model._ve_sigma(0.0)
        return GaussianKernel(np.eye(d), (model._ve_sigma(t) ** 2 - sig0**2) * np.eye(d))
    m = model.scale
    r = model.r_inv_matrix
    gen = -0.5 * r - model.omega
    mean_map = mp.matrix_exp(m * bt * gen)
    if case == "diag":
        cov = (np.eye(d) - mp.matrix_exp(-m * bt * r)) / m
    else:
        cov = (1.0 - np.exp(-m * bt)) / m * np.eye(d)
    return GaussianKernel(mean_map, 0.5 * (cov + cov.T))


def kernel_factors(model, t):
    """Batched kernel pieces for an array of times.

    Returns ``(mean_map, cov_sqrt, cov_sqrt_inv)`` each of shape ``(n, d, d)``,
    where ``cov_sqrt`` is the symmetric square root of the covariance.  Uses the
    spectral form of ``R_inv`` (omega = 0) or of ``omega`` (R_inv = I) so no
    per-time matrix exponential is needed.
    """
    case = _kernel_case(model)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    bt = model.schedule.integral(t)
    m = model.scale
    d = model.dim
    eye = np.eye(d)
    if case == "ve":
        var = model._ve_sigma(t) ** 2 - model._ve_sigma(0.0) ** 2
        sd = np.sqrt(var)
        mean_map = np.broadcast_to(eye, (t.size, d, d)).copy()
        return mean_map, sd[:, None, None] * eye, (1.0 / sd)[:, None, None] * eye
    if case == "diag":
        lam, q = np.linalg.eigh(model.r_inv_matrix)
        mb = m * bt[:, None] * lam[None, :]
        mean_d = np.exp(-0.5 * mb)
        sd_d = np.sqrt(-np.expm1(-mb) / m)
        mean_map = np.einsum("ij,nj,kj->nik", q, mean_d, q)
        cov_sqrt = np.einsum("ij,nj,kj->nik", q, sd_d, q)
        cov_sqrt_inv = np.einsum("ij,nj,kj->nik", q, 1.0 / sd_d, q)
        return mean_map, cov_sqrt, cov_sqrt_inv
    # R_inv = I: exp(-m B omega) via the Hermitian matrix i*omega.
    mu, u = np.linalg.eigh(1j * model.omega)
    phase = np.exp(1j * m * bt[:, None] * mu[None, :])
    rot = np.einsum("ij,nj,kj->nik", u, phase, u.conj()).real
    mean_map = np.exp(-0.5 * m * bt)[:, None, None] * rot
    sd = np.sqrt(-np.expm1(-m * bt) / m)
    return mean_map, sd[:, None, None] * eye, (1.0 / sd)[:, None, None] * eye


def sample_marginal(model, x0, t, xi):
    """Reparameterised draw ``mean_map(t) x0 + cov(t)^{1/2} xi`` for per-row times."""
    mean_map, s, _ = kernel_factors(model, t)
    return np.einsum("nij,nj->ni", mean_map, x0) + np.einsum("nij,nj->ni", s, xi)


# -- Fokker-Planck stationarity ------------------------------------------------


class GaussianDensity:
    """Gaussian density with analytic log-gradient and log-Hessian."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)
        self.dim = self.mean.size
        sign, logdet = np.linalg.slogdet(self.cov)
        self._norm = -0.5 * (self.dim * np.log(2 * np.pi) + logdet)

    @classmethod
    def standard(cls, dim, scale=1.0):
        """N(0, I / scale), the stationary law under drift scale ``scale``."""
        return cls(np.zeros(dim), np.eye(dim) / scale)

    def logpdf(self, x):
        z = np.asarray(x, dtype=float) - self.mean
        return self._norm - 0.5 * np.einsum("...i,ij,...j->...", z, self.prec, z)

    def grad_log(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) @ self.prec.T

    def hess_log(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-self.prec, x.shape[:-1] + self.prec.shape)


class CallableDensity:
    """Density known only through ``logpdf``; derivatives by central differences."""

    def __init__(self, logpdf, h=1e-4):
        self._logpdf = logpdf
        self.h = h

    def logpdf(self, x):
        return self._logpdf(np.asarray(x, dtype=float))

    def grad_log(self, x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        out = np.empty_like(x)
        for i in range(d):
            e = np.zeros(d)
            e[i] = self.h
            out[..., i] = (self.logpdf(x + e) - self.logpdf(x - e)) / (2 * self.h)
        return out

    def hess_log(self, x):
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        h = self.h
        out = np.empty(x.shape + (d,))
        f0 = self.logpdf(x)
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            out[..., i, i] = (self.logpdf(x + ei) - 2 * f0 + self.logpdf(x - ei)) / h**2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = h
                v = (self.logpdf(x + ei + ej) - self.logpdf(x + ei - ej)
                     - self.logpdf(x - ei + ej) + self.logpdf(x - ei - ej)) / (4 * h**2)
                out[..., i, j] = v
                out[..., j, i] = v
        return out


def _residual_over_p(div_f, f, d_mat, d_div, d_divdiv, g, hess):
    """``(L* p)(x) / p(x)`` from drift/diffusion pieces and log-density derivatives."""
    lap_term = np.einsum("...ij,...ij->...", d_mat, hess + g[..., :, None] * g[..., None, :])
    return (-div_f - np.einsum("...i,...i->...", f, g)
            + 0.5 * d_divdiv + np.einsum("...i,...i->...", d_div, g) + 0.5 * lap_term)


def fpk_residual_linear(drift_matrix, diffusion_matrix, density, x):
    """Stationary FPK residual, divided by the density, for ``dX = A X dt + sqrt(D) dW``."""
    a = np.asarray(drift_matrix, dtype=float)
    dm = np.asarray(diffusion_matrix, dtype=float)
    x = np.asarray(x, dtype=float)
    g = density.grad_log(x)
    hess = density.hess_log(x)
    f = x @ a.T
    zeros = np.zeros_like(x)
    return _residual_over_p(np.trace(a), f, dm, zeros, 0.0, g, hess)


def _metric_derivatives(model, x):
    """``(D, sum_j d_j D_ij, sum_ij d_i d_j D_ij, div f_unscaled)`` at beta' = 1."""
    d = model.dim
    if model.constant_metric:
        r = model.r_inv_matrix
        return r, np.zeros_like(x), np.zeros(x.shape[:-1]), None
    fld = model.r_inv
    if fld.kind == SpatialMetricField.DIAGONAL and fld.d2fn is not None:
        diag = np.asarray(fld.fn(x), dtype=float)
        d1 = np.asarray(fld.dfn(x), dtype=float)
        d2 = np.asarray(fld.d2fn(x), dtype=float)
        # f_i = (m/2)(-h_i x_i + h_i')  =>  d_i f_i = (m/2)(-h_i' x_i - h_i + h_i'')
        div_f = 0.5 * model.scale * np.sum(-d1 * x - diag + d2, axis=-1)
        return fld(x), d1, np.sum(d2, axis=-1), div_f
    # generic field: central differences throughout
    h = 1e-4
    dvec = divergence_term(fld, x)
    dd = np.zeros(x.shape[:-1])
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        dd = dd + (divergence_term(fld, x + e)[..., i] - divergence_term(fld, x - e)[..., i]) / (2 * h)
    return fld(x), dvec, dd, None


def fpk_residual(model, density, x):
    """Stationary Fokker-Planck residual ``(L* p)(x) / p(x)`` with ``beta' = 1``.

    Zero at ``x`` exactly when ``density`` balances drift and diffusion there.
    Dividing by ``p`` keeps the value scale-free across dimensions.
    """
    x = _check_x(model, np.asarray(x, dtype=float))
    if model.kind == Kind.VE:
        raise UnsupportedModelError("VE has no stationary law")
    d_mat, d_div, d_divdiv, div_f = _metric_derivatives(model, x)
    m = model.scale
    if d_mat.ndim == 2:
        lin = x @ d_mat.T
    else:
        lin = np.einsum("...ij,...j->...i", d_mat, x)
    f = 0.5 * m * (-lin - 2.0 * (x @ model.omega.T) + d_div)
    if div_f is None:
        if model.constant_metric:
            div_f = np.full(x.shape[:-1], -0.5 * m * np.trace(d_mat))
        else:
            h = 1e-5
            div_f = np.zeros(x.shape[:-1])
            for i in range(model.dim):
                e = np.zeros(model.dim)
                e[i] = h
                fp = _drift_inner(model, x + e)[..., i]
                fm = _drift_inner(model, x - e)[..., i]
                div_f = div_f + 0.5 * m * (fp - fm) / (2 * h)
    g = density.grad_log(x)
    hess = density.hess_log(x)
    return _residual_over_p(div_f, f, d_mat, d_div, d_divdiv, g, hess)


def _probe_points(dim, rng, n_random=64, c=2.0):
    pts = [np.zeros(dim)]
    eye = np.eye(dim)
    for i in range(dim):
        pts.append(c * eye[i])
        for j in range(i + 1, dim):
            pts.append(c * (eye[i] + eye[j]) / np.sqrt(2))
            pts.append(c * (eye[i] - eye[j]) / np.sqrt(2))
    pts = np.array(pts)
    return np.vstack([pts, rng.standard_normal((n_random, dim))])


@dataclass(frozen=True)
class CompletenessResult:
    is_stationary_gaussian: bool
    symmetric_defect: float
    max_residual: float


def completeness_probe(linear_drift, r_inv, seed=0):
    """Check whether ``dX = A X dt + sqrt(R_inv) dW`` keeps N(0, I) stationary.

    A linear drift leaves the standard Gaussian invariant only if its symmetric
    part is exactly ``-R_inv / 2``; any other linear drift shows a non-zero
    FPK residual somewhere on the probe grid.
    """
    a = np.asarray(linear_drift, dtype=float)
    r = np.asarray(r_inv, dtype=float)
    defect = float(np.max(np.abs(a + a.T + r)))
    dim = a.shape[0]
    pts = _probe_points(dim, np.random.default_rng(seed))
    res = fpk_residual_linear(a, r, GaussianDensity.standard(dim), pts)
    max_res = float(np.max(np.abs(res)))
    flag = defect < 1e-8 and max_res < 1e-6
    return CompletenessResult(flag, defect, max_res)
