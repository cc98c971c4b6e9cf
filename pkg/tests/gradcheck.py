"""Central finite-difference oracle, independent of the tape machinery.

Used to check every autodiff primitive and the reparameterized gate path:
perturb one input element at a time, re-run the forward function, and
compare the numeric derivative against the tape's gradient.
"""

import numpy as np

STEP = 1e-5
REL_TOL = 1e-4


def finite_difference_grad(forward, x, step=STEP):
    """Gradient of scalar-valued `forward()` w.r.t. array `x` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(forward())
        flat[i] = orig - step
        fm = float(forward())
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def max_rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want) / (np.abs(want) + 1e-8)))


def assert_grad_close(got, want, tol=REL_TOL, what=""):
    err = max_rel_err(got, want)
    assert err < tol, f"{what}: autodiff vs finite differences rel err {err:.3e} >= {tol}"
