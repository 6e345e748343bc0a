"""Shared fixtures: small systems, grids, and random field builders."""

import numpy as np
import pytest

from blochstab.fields import CoverSpec, GridFn, make_grid
from blochstab.system import Poly, SystemDef


def poly(n, *terms):
    return Poly.from_terms(n, terms)


def zero(n):
    return Poly.from_terms(n, [])


@pytest.fixture(scope="session")
def heat1():
    """Scalar heat: n=1, no flux, no reaction."""
    return SystemDef(1, 0, np.array([[zero(1)], [zero(1)]], dtype=object),
                     np.array([zero(1)], dtype=object), name="heat")


@pytest.fixture(scope="session")
def burgers1():
    """Scalar conservation law with quadratic flux in the first direction."""
    G = np.array([[poly(1, (0.5, (2,)))], [zero(1)]], dtype=object)
    return SystemDef(1, 1, G, np.array([zero(1)], dtype=object), name="burgers")


@pytest.fixture(scope="session")
def mixed3():
    """n=3, r=1: quadratic fluxes and cubic reactions in the free components."""
    n = 3
    G = np.array(
        [
            [poly(n, (0.3, (1, 1, 0))), poly(n, (0.2, (2, 0, 0))), poly(n, (-0.1, (0, 1, 1)))],
            [poly(n, (-0.2, (0, 2, 0))), poly(n, (0.15, (1, 0, 1))), poly(n, (0.25, (0, 0, 2)))],
        ],
        dtype=object,
    )
    f = np.array(
        [
            zero(n),
            poly(n, (1.0, (0, 1, 0)), (-1.0, (0, 3, 0)), (0.4, (1, 0, 1))),
            poly(n, (-0.5, (0, 0, 1)), (0.3, (2, 0, 0)), (-0.2, (0, 1, 2))),
        ],
        dtype=object,
    )
    return SystemDef(n, 1, G, f, name="mixed3")


@pytest.fixture
def rng():
    return np.random.default_rng(20230817)


@pytest.fixture
def grid16():
    return make_grid(16, [[0.7, 0.1], [-0.2, 1.3]])


@pytest.fixture
def square16():
    return make_grid(16, np.eye(2))


@pytest.fixture
def cover8x8():
    return CoverSpec(make_grid(8, np.eye(2)), 8)


def bandlimited(grid, rng, ncomp=1, modes=2, amp=1.0, offset=0.0):
    """Random real trig field with cell modes |p| <= modes."""
    x1, x2 = grid.nodes()
    vals = np.full((ncomp, grid.m, grid.m), float(offset))
    for p1 in range(-modes, modes + 1):
        for p2 in range(-modes, modes + 1):
            if p1 == 0 and p2 == 0:
                continue
            c = rng.normal(size=(ncomp, 1, 1)) * amp / (1 + p1 * p1 + p2 * p2)
            s = rng.normal(size=(ncomp, 1, 1)) * amp / (1 + p1 * p1 + p2 * p2)
            ph = 2 * np.pi * (p1 * x1 + p2 * x2)
            vals = vals + c * np.cos(ph) + s * np.sin(ph)
    return GridFn(grid, vals)
