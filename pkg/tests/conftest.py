import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from shockfem.assembly import BoundaryData
from shockfem.fespace import build_space
from shockfem.mesh import KEEP, REFINE, Rectangle, adapt, new_uniform
from shockfem.physics import EulerGas, ScalarTransport, euler_state
from shockfem.solver import DiscreteProblem
from shockfem.stabilization import SMOOTH, StabilizationParams

UNIT = Rectangle(0.0, 0.0, 1.0, 1.0)


def make_seven_leaf(m=1):
    mesh = new_uniform(2, 2, UNIT)
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    return build_space(mesh, m=m)


def find_node(space, x, y):
    d = np.linalg.norm(space.nodes - np.array([x, y]), axis=1)
    i = int(np.argmin(d))
    assert d[i] < 1e-12
    return i


def linear_discontinuity_problem(space=None, n=8, scheme="high", q=2.0):
    """Scalar transport with a straight discontinuity entering the left/top."""
    if space is None:
        space = build_space(new_uniform(n, n, UNIT))
    vel = np.array([0.5, np.sin(-np.pi / 3)])
    model = ScalarTransport(lambda x: np.broadcast_to(vel, x.shape).copy())

    def u_d(x):
        x = np.atleast_2d(x)
        on_left = x[:, 0] < 1e-12
        hi = (on_left & (x[:, 1] > 0.7)) | (x[:, 1] > 1 - 1e-12)
        return hi.astype(float)[:, None]

    params = StabilizationParams(q=q, L=1.0)
    prob = DiscreteProblem(space=space, model=model, params=params,
                           bc=BoundaryData(value=u_d), scheme=scheme,
                           variant=SMOOTH, tracked=(0,))
    return prob


def uniform_supersonic_problem(space=None, n=4, mach=2.0, angle_deg=0.0,
                               scheme="high"):
    """Euler with a constant supersonic stream (its exact steady solution)."""
    if space is None:
        space = build_space(new_uniform(n, n, UNIT), m=4)
    gamma = 1.4
    ang = np.deg2rad(angle_deg)
    free = euler_state(1.0, mach * np.array([np.cos(ang), np.sin(ang)]),
                       p=1.0 / gamma, gamma=gamma)

    def value(x):
        x = np.atleast_2d(x)
        return np.broadcast_to(free, x.shape[:-1] + (4,)).copy()

    params = StabilizationParams(q=2.0, L=1.0)
    prob = DiscreteProblem(space=space, model=EulerGas(gamma), params=params,
                           bc=BoundaryData(value=value), scheme=scheme,
                           variant=SMOOTH, tracked=(0,))
    return prob, free
