"""Stationarity of the standard Gaussian under random FP drifts, and the
closed-form transition kernel against simulation.

    python3 demos/stationarity_and_kernel.py
"""

import numpy as np

from fpdiffusion import matrix_param as mp
from fpdiffusion import sde
from fpdiffusion.simulate import euler_maruyama_forward

rng = np.random.default_rng(0)

# Any SPD R_inv and antisymmetric omega leave N(0, I) invariant.
for dim in (2, 4, 6):
    model = sde.ForwardModel.fp_general(mp.SpdParam.random(dim, rng), mp.AntisymParam.random(dim, rng))
    res = sde.fpk_residual(model, sde.GaussianDensity.standard(dim), rng.standard_normal((100, dim)))
    print(f"dim {dim}: max stationary residual {np.max(np.abs(res)):.1e}")

# A linear drift whose symmetric part is off by 0.1 is caught.
r = np.eye(3)
probe = sde.completeness_probe(-0.5 * r + np.diag([0.1, 0.0, 0.0]), r)
print(f"defective drift: stationary={probe.is_stationary_gaussian}, max residual {probe.max_residual:.3f}")

# Closed-form kernel of a learned-noise model versus 20k simulated paths.
model = sde.ForwardModel.fp_noise(mp.SpdParam.random(3, rng, 0.5))
x0 = np.array([1.0, -0.5, 0.3])
paths = euler_maruyama_forward(model, np.tile(x0, (20_000, 1)), 1000, rng, save_steps=[500]).final
k = sde.transition_kernel(model, 0.5)
print("kernel mean   ", np.round(k.mean_map @ x0, 4))
print("empirical mean", np.round(paths.mean(0), 4))
print("max |cov difference|", np.round(np.max(np.abs(np.cov(paths.T) - k.cov)), 4))
