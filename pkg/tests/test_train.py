import numpy as np
import pytest

from fpdiffusion import matrix_param as mp
from fpdiffusion import sde
from fpdiffusion.errors import TrainingDivergedError, UnsupportedModelError, ValidationError
from fpdiffusion.score import MixtureSpec, PlaneGaussian, ScoreNetParams, mixture_score_at_time
from fpdiffusion.train import (
    AdamMoments,
    Mode,
    TrainConfig,
    TrainState,
    Weighting,
    draw_noise,
    dsm_loss,
    dsm_objective,
    fit,
    optimizer_step,
    reg_objective,
    reg_penalty,
    write_loss_csv,
)

GAUSS_1D = MixtureSpec([1.0], [[0.0]], [[[1.0]]])
MIX_2D = MixtureSpec([0.5, 0.5], [[-1.5, -0.5], [1.5, 0.5]], [np.eye(2) * 0.1, np.diag([0.3, 0.1])])


def test_config_validation():
    m = sde.ForwardModel.vp(1)
    with pytest.raises(ValidationError):
        TrainConfig(GAUSS_1D, m, seed=0, lr=0)
    with pytest.raises(ValidationError):
        TrainConfig(GAUSS_1D, m, seed=0, batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(GAUSS_1D, m, seed=0, lam1=-1)
    assert TrainConfig(GAUSS_1D, m, seed=0, mode="mix").stages == [(1000, True), (1000, False)]


# -- DSM objective -------------------------------------------------------------------


def test_conditional_score_gives_zero_loss(rng):
    model = sde.ForwardModel.fp_noise(mp.SpdParam.random(2, rng, 0.4))
    x0 = MIX_2D.sample(64, rng)
    t, xi = draw_noise(model, 64, rng)
    mm, s, s_inv = sde.kernel_factors(model, t)
    exact = -np.einsum("nij,nj->ni", s_inv, xi)
    assert dsm_objective(lambda x, tt: exact, model, x0, t, xi) < 1e-20


def test_marginal_score_beats_zero_function(rng):
    data = MixtureSpec([1.0], [[0.5]], [[[0.3]]])
    model = sde.ForwardModel.vp(1)
    n = 100_000
    x0 = data.sample(n, rng)
    t, xi = draw_noise(model, n, rng)
    mm, s, _ = sde.kernel_factors(model, t)
    var = mm[:, 0, 0] ** 2 * 0.3 + s[:, 0, 0] ** 2
    mean = mm[:, 0, 0] * 0.5
    exact = dsm_objective(lambda x, tt: -(x - mean[:, None]) / var[:, None], model, x0, t, xi)
    # spot-check the closed form against the mixture oracle
    for k in range(3):
        ref = mixture_score_at_time(data, model, np.array([0.2]), t[k])
        assert ref[0] == pytest.approx(-(0.2 - mean[k]) / var[k], rel=1e-10)
    zero = dsm_objective(lambda x, tt: np.zeros_like(x), model, x0, t, xi)
    assert exact < zero


def test_identical_batch_equals_single_sample(rng):
    model = sde.ForwardModel.vp(2)
    p = ScoreNetParams.init(2, (8,), 2, rng=rng)
    x0 = np.tile(rng.standard_normal(2), (10, 1))
    t = np.full(10, 0.37)
    xi = np.tile(rng.standard_normal(2), (10, 1))
    f = p.as_score()
    batch = dsm_objective(f, model, x0, t, xi)
    single = dsm_objective(f, model, x0[:1], t[:1], xi[:1])
    assert batch == pytest.approx(single, rel=1e-14)


def test_dsm_loss_rejects_damped(rng):
    model = sde.ForwardModel.fp_damped(mp.DampedBlocks([1.0], [2.0]))
    state = TrainState.init(TrainConfig(MixtureSpec([1.0], [np.zeros(2)], [np.eye(2)]), model, seed=0,
                                        hidden=(4,)))
    with pytest.raises(UnsupportedModelError):
        dsm_loss(state, model, np.zeros((3, 2)), rng)


def _five_point_forward_grad(state, model, x0, t, xi, h=1e-3):
    """Forward-parameter gradient through expm-based kernels and a 5-point stencil."""

    def objective(m):
        loss = 0.0
        for x0k, tk, xik in zip(x0, t, xi):
            k = sde.transition_kernel(m, tk)
            root = mp.spd_sqrt(k.cov)
            xt = k.mean_map @ x0k + root @ xik
            target = -np.linalg.solve(k.cov, root @ xik)
            w = -np.expm1(-m.schedule.integral(tk))
            r = state.score.as_score()(xt[None], np.array([tk]))[0] - target
            loss += w * r @ r
        return loss / len(x0)

    p = model.params()
    g = np.zeros(p.size)
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        f = [objective(model.with_params(p + c * e)) for c in (-2, -1, 1, 2)]
        g[i] = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
    return g


@pytest.mark.parametrize("kind", ["noise", "drift"])
def test_forward_gradient_matches_independent_oracle(kind, rng):
    if kind == "noise":
        model = sde.ForwardModel.fp_noise(mp.SpdParam.random(2, rng, 0.4))
    else:
        model = sde.ForwardModel.fp_drift(mp.AntisymParam.random(2, rng))
    cfg = TrainConfig(MIX_2D, model, seed=1, hidden=(16, 16))
    state = TrainState.init(cfg)
    x0 = MIX_2D.sample(8, rng)
    seed = 99
    _, grads = dsm_loss(state, model, x0, np.random.default_rng(seed), forward_grad=True)
    t, xi = draw_noise(model, 8, np.random.default_rng(seed))
    ref = _five_point_forward_grad(state, model, x0, t, xi)
    assert np.max(np.abs(grads["forward"] - ref) / np.maximum(np.abs(ref), 1e-6)) < 1e-3


# -- regulariser ---------------------------------------------------------------------


def test_reg_zero_weights(rng):
    model = sde.ForwardModel.fp_noise(mp.SpdParam.random(3, rng, 0.3))
    state = TrainState.init(TrainConfig(PlaneGaussian(), model, seed=0, hidden=(8,)))
    pen, g = reg_penalty(state, model, PlaneGaussian().sample(16, rng), rng, 0.0, 0.0)
    assert pen == 0.0 and not np.any(g["forward"])


def test_reg_zero_field_for_stationary_data(rng):
    model = sde.ForwardModel.fp_noise(mp.SpdParam.random(3, rng, 0.3))
    x0 = rng.standard_normal((50, 3))
    t, xi = draw_noise(model, 50, rng)
    eps = rng.standard_normal((50, 3))
    val = reg_objective(lambda x, tt: -x, model, x0, t, xi, eps, 0.01, 0.01)
    assert val < 1e-25


def test_reg_finite_and_reproducible():
    data = PlaneGaussian()
    for model in (sde.ForwardModel.vp(3), sde.ForwardModel.fp_noise(mp.SpdParam.identity(3))):
        state = TrainState.init(TrainConfig(data, model, seed=4, hidden=(16, 16)))
        vals = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            pen, g = reg_penalty(state, model, data.sample(32, rng), rng)
            vals.append((pen, g["forward"].copy()))
        assert np.isfinite(vals[0][0]) and vals[0][0] > 0
        assert vals[0][0] == vals[1][0]
        assert np.array_equal(vals[0][1], vals[1][1])


# -- optimiser -----------------------------------------------------------------------


def _state(dim=1, hidden=(4,), model=None):
    model = model or sde.ForwardModel.vp(dim)
    return TrainState.init(TrainConfig(GAUSS_1D if dim == 1 else MIX_2D, model, seed=0, hidden=hidden))


def test_zero_gradient_from_fresh_moments():
    st = _state()
    before = st.score.flat().copy()
    optimizer_step(st, {"score": np.zeros_like(before)}, 1e-3)
    assert np.array_equal(st.score.flat(), before)


def test_zero_gradient_decays_moments():
    st = _state()
    mom = st.moments["score"]
    mom.m = np.ones_like(mom.m)
    mom.v = np.ones_like(mom.v)
    optimizer_step(st, {"score": np.zeros_like(mom.m)}, 1e-3)
    assert np.allclose(mom.m, 0.9) and np.allclose(mom.v, 0.999)


def test_adam_scalar_quadratic():
    from fpdiffusion.train import _adam

    p = np.array([0.0])
    mom = AdamMoments.zeros(1)
    for _ in range(5000):
        p = _adam(p, 2 * (p - 3.0), mom, 1e-2)
    assert abs(p[0] - 3.0) < 1e-4


def test_frozen_group_untouched(rng):
    model = sde.ForwardModel.fp_noise(mp.SpdParam.random(2, rng, 0.3))
    st = _state(2, model=model)
    before = st.model.params().copy()
    optimizer_step(st, {"score": np.ones(st.score.flat().size), "forward": np.ones(before.size)}, 1e-2,
                   frozen=("forward",))
    assert np.array_equal(st.model.params(), before)
    assert st.moments["forward"].count == 0


# -- fit -----------------------------------------------------------------------------


def test_fit_deterministic():
    cfg = TrainConfig(MIX_2D, sde.ForwardModel.fp_noise(mp.SpdParam.identity(2)), seed=3,
                      n_iters=30, mode=Mode.JOINT, hidden=(16,), log_every=10, lam1=0.01, lam2=0.01)
    a, b = fit(cfg), fit(cfg)
    assert np.array_equal(a.score.flat(), b.score.flat())
    assert np.array_equal(a.model.params(), b.model.params())
    assert a.history == b.history
    assert len(a.history) == 3


def test_mix_freezes_stage_two():
    cfg = TrainConfig(MIX_2D, sde.ForwardModel.fp_noise(mp.SpdParam.identity(2)), seed=3,
                      n_iters=40, n_iters_stage2=40, mode=Mode.MIX, hidden=(16,), forward_lr=1e-2)
    seen = []
    st = fit(cfg, on_stage_end=lambda i, s: seen.append(s.model.params().copy()))
    assert len(st.stage_forward) == 2
    assert not np.array_equal(st.stage_forward[0], np.zeros(3))
    assert np.array_equal(st.stage_forward[0], st.stage_forward[1])
    assert np.array_equal(seen[0], seen[1])


def test_score_only_keeps_forward_fixed():
    model = sde.ForwardModel.fp_noise(mp.SpdParam.random(2, np.random.default_rng(0), 0.3))
    cfg = TrainConfig(MIX_2D, model, seed=3, n_iters=30, hidden=(16,))
    st = fit(cfg)
    assert np.array_equal(st.model.params(), model.params())


def test_nan_guard():
    cfg = TrainConfig(MIX_2D, sde.ForwardModel.vp(2), seed=0, n_iters=2000, lr=10.0, hidden=(32, 32))
    with pytest.raises(TrainingDivergedError) as info:
        fit(cfg)
    assert info.value.step >= 1
    assert "score" in info.value.param_norms


def test_loss_csv(tmp_path):
    cfg = TrainConfig(GAUSS_1D, sde.ForwardModel.vp(1), seed=0, n_iters=20, hidden=(4,), log_every=10)
    st = fit(cfg)
    path = tmp_path / "loss.csv"
    write_loss_csv(st, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,reg_penalty"
    assert [int(l.split(",")[0]) for l in lines[1:]] == [10, 20]


@pytest.mark.slow
def test_score_only_1d_gaussian_learns_marginal_score():
    cfg = TrainConfig(GAUSS_1D, sde.ForwardModel.vp(1), seed=0, n_iters=8000, lr=3e-4, batch_size=512,
                      hidden=(64, 64), weighting=Weighting.KERNEL_VARIANCE)
    st = fit(cfg)
    xs = np.linspace(-2, 2, 21)[:, None]
    worst = 0.0
    for t in np.linspace(0.25, 1.0, 7):
        worst = max(worst, np.max(np.abs(st.score.as_score()(xs, t) + xs)))
    print("max probe error", worst)
    assert worst < 0.1
    n = len(st.losses) // 10
    assert np.median(st.losses[-n:]) < np.median(st.losses[:n])


@pytest.mark.slow
def test_joint_fp_noise_not_worse_than_vp():
    common = dict(seed=5, n_iters=3000, lr=1e-3, hidden=(64, 64))
    vp = fit(TrainConfig(MIX_2D, sde.ForwardModel.vp(2), **common))
    fp = fit(TrainConfig(MIX_2D, sde.ForwardModel.fp_noise(mp.SpdParam.identity(2)), mode=Mode.JOINT,
                         forward_lr=1e-2, **common))
    tail = 300
    a, b = np.array(fp.losses[-tail:]), np.array(vp.losses[-tail:])
    se = np.sqrt(a.var() / tail + b.var() / tail)
    assert a.mean() < b.mean() + 3 * se
    for st in (vp, fp):
        n = len(st.losses) // 10
        assert np.median(st.losses[-n:]) < np.median(st.losses[:n])
