"""Shared test systems and oracles.

LTS-1: linear two-time-scale pair  xdot = -2x + z,  eps zdot = x - z.
    Closed form via the 2x2 matrix exponential (oracle, independent of the
    package integrators). QSS map h(x) = x, reduced model xdot = -x,
    boundary layer dy/dtau = -y.

NLS-1: nonlinear pair  xdot = -x + z + u,  eps zdot = x - z - z^3.
    QSS map h(x) solves z + z^3 = x (unique real root, bisection oracle).
"""

import numpy as np
import pytest
import scipy.linalg as sla

from lsor.sysdef import InputSignal, SingularSystem


def make_lts1(eps=0.1):
    return SingularSystem(
        n=1, m=1, p=1,
        f=lambda x, z, u, e: np.array([-2.0 * x[0] + z[0] + 0.0 * u[0]]),
        g=lambda x, z, u, e: np.array([x[0] - z[0]]),
        eps=[eps],
        labels=("x", "z"),
    )


def make_nls1(eps=0.1):
    return SingularSystem(
        n=1, m=1, p=1,
        f=lambda x, z, u, e: np.array([-x[0] + z[0] + u[0]]),
        g=lambda x, z, u, e: np.array([x[0] - z[0] - z[0] ** 3]),
        eps=[eps],
        labels=("x", "z"),
    )


def make_blm_signflip(eps=0.1):
    """LTS-1 with the fast residual sign flipped: the layer dy/dtau = +y."""
    return SingularSystem(
        n=1, m=1, p=1,
        f=lambda x, z, u, e: np.array([-2.0 * x[0] + z[0] + 0.0 * u[0]]),
        g=lambda x, z, u, e: np.array([z[0] - x[0]]),
        eps=[eps],
        labels=("x", "z"),
    )


def lts1_full_exact(eps, x0, z0, ts):
    """Matrix-exponential oracle for the coupled LTS-1 trajectory."""
    A = np.array([[-2.0, 1.0], [1.0 / eps, -1.0 / eps]])
    return np.array([sla.expm(A * t) @ np.array([x0, z0]) for t in ts])


def cubic_root_oracle(x, lo=-10.0, hi=10.0, iters=80):
    """Bisection solve of z + z^3 = x (monotone increasing)."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid + mid**3 < x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture(scope="session")
def lts1():
    return make_lts1()


@pytest.fixture(scope="session")
def nls1():
    return make_nls1()


@pytest.fixture(scope="session")
def zero_input():
    return InputSignal.constant([0.0])


# scenario bundles are expensive; share them across test modules and record
# their wall time for the fidelity runtime budget
BUILD_SECONDS = {}


@pytest.fixture(scope="session")
def grid_tied_bundle():
    import time

    from lsor.harness import run_scenario

    tic = time.perf_counter()
    bundle = run_scenario("configs/grid_tied_default.json", bench=False)
    BUILD_SECONDS["grid_tied"] = time.perf_counter() - tic
    return bundle


@pytest.fixture(scope="session")
def islanded_bundle():
    import time

    from lsor.harness import run_scenario

    tic = time.perf_counter()
    bundle = run_scenario("configs/islanded_default.json", bench=False)
    BUILD_SECONDS["islanded"] = time.perf_counter() - tic
    return bundle


@pytest.fixture(scope="session")
def bench_bundle():
    from lsor.harness import run_scenario

    return run_scenario("configs/grid_tied_default.json", grid_points=64, bench=True)
