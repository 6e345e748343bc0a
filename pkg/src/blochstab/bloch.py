"""Discrete Floquet-Bloch transform on the N-fold periodic cover.

A cover field g decomposes into N^2 fibers indexed by Floquet frequencies
xi on the lattice {2 pi k / N} with representatives in [-pi, pi)^2; each
fiber is a cell-periodic field.  The normalization is chosen so that the
inversion g(x) = sum_xi e^{i xi.x} gcheck(xi, x) holds exactly on grid
nodes, and Parseval holds with a factor N^2 between the squared cover sum
and the sum of squared fiber cell-sums.

Fibers are stored in fft order along two leading axes: data[k1, k2, c, i, j]
with xi(k) = 2 pi fftfreq(N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .fields import CoverFn, CoverSpec, GridFn, GridSpec

__all__ = [
    "BlochField",
    "bloch_forward",
    "bloch_inverse",
    "apply_multiplier",
    "apply_J",
    "fiber",
    "low_floquet_field",
]


@dataclass
class BlochField:
    """Fiber stack of a cover field: data[k1, k2, c, i, j] in fft order."""

    spec: CoverSpec
    data: npt.NDArray[np.complex128]

    def __post_init__(self):
        N, m = self.spec.ncells, self.spec.cell.m
        if self.data.shape[:2] != (N, N) or self.data.shape[3:] != (m, m):
            raise ValueError(f"fiber stack shape {self.data.shape} does not match N={N}, m={m}")

    @property
    def ncomp(self) -> int:
        return self.data.shape[2]

    def frequencies(self):
        """Meshgrid (xi1, xi2) of Floquet representatives, fft order."""
        ax = self.spec.floquet_axis()
        return np.meshgrid(ax, ax, indexing="ij")

    def radii(self) -> npt.NDArray[np.float64]:
        xi1, xi2 = self.frequencies()
        return np.hypot(xi1, xi2)

    def fiber(self, k1: int, k2: int) -> GridFn:
        return GridFn(self.spec.cell, self.data[k1 % self.spec.ncells, k2 % self.spec.ncells])

    def copy(self) -> "BlochField":
        return BlochField(self.spec, self.data.copy())


def _phases(spec: CoverSpec):
    """e^{-i xi . x0} over (k1, k2, i, j) for cell nodes x0."""
    ax = spec.floquet_axis()
    x = spec.cell.axis_coords()
    ph1 = np.exp(-1j * np.outer(ax, x))  # (N, m)
    return ph1


def bloch_forward(g: CoverFn) -> BlochField:
    """Fiber decomposition of a cover field.

    gcheck(xi, x0) = (1/N^2) sum_q e^{-i xi.(x0+q)} g(x0+q) over the N^2
    cell offsets q; the q-sum is a 2D DFT of size N.
    """
    spec = g.spec
    N, m = spec.ncells, spec.cell.m
    n = g.ncomp
    # split cover index into (cell offset q, in-cell node i)
    v = g.values.reshape(n, N, m, N, m)
    # DFT over the offsets: sum_q e^{-2 pi i k.q / N}
    vhat = np.fft.fft(np.fft.fft(v, axis=1), axis=3) / N**2
    # reorder to (k1, k2, c, i, j)
    vhat = np.transpose(vhat, (1, 3, 0, 2, 4))
    ph = _phases(spec)
    vhat *= ph[:, None, None, :, None]
    vhat *= ph[None, :, None, None, :]
    return BlochField(spec, np.ascontiguousarray(vhat))


def bloch_inverse(gb: BlochField, real: bool | None = None) -> CoverFn:
    """Exact inverse of :func:`bloch_forward`."""
    spec = gb.spec
    N, m = spec.ncells, spec.cell.m
    ph = _phases(spec)
    v = gb.data * np.conj(ph)[:, None, None, :, None]
    v *= np.conj(ph)[None, :, None, None, :]
    v = np.transpose(v, (2, 0, 3, 1, 4))  # (c, k1, i, k2, j)
    v = np.fft.ifft(np.fft.ifft(v, axis=1), axis=3) * N**2
    vals = v.reshape(gb.ncomp, N * m, N * m)
    if real is None:
        real = bool(np.max(np.abs(vals.imag)) < 1e-10 * max(1.0, np.max(np.abs(vals.real))))
    return CoverFn(spec, vals.real.copy() if real else vals.copy())


def apply_multiplier(gb: BlochField, weights) -> BlochField:
    """Multiply each fiber by a scalar weight array over (k1, k2)."""
    w = np.asarray(weights)
    return BlochField(gb.spec, gb.data * w[:, :, None, None, None])


def apply_J(gb_or_g, power: tuple[int, int] = (1, 0)):
    """Frequency multiplier J^power: fiber xi scales by xi1^p1 * xi2^p2.

    The representative in [-pi, pi)^2 is used, so J is bounded and maps the
    mean fiber to zero.  Accepts and returns either a BlochField or a
    CoverFn (transforming on the fly).
    """
    was_cover = isinstance(gb_or_g, CoverFn)
    gb = bloch_forward(gb_or_g) if was_cover else gb_or_g
    xi1, xi2 = gb.frequencies()
    w = xi1 ** power[0] * xi2 ** power[1]
    out = apply_multiplier(gb, w)
    return bloch_inverse(out, real=False) if was_cover else out


def fiber(g: CoverFn, k1: int, k2: int) -> GridFn:
    return bloch_forward(g).fiber(k1, k2)


def low_floquet_field(spec: CoverSpec, rng, radius: float, cell_modes: int = 1,
                      ncomp: int = 1, real: bool = True) -> CoverFn:
    """Random cover field whose fibers vanish for |xi| > radius.

    Cell bandwidth is limited to |p| <= cell_modes so pointwise products of
    such fields alias neither in xi nor in the cell modes; useful for
    checking product and Leibniz identities exactly.
    """
    N, m = spec.ncells, spec.cell.m
    data = np.zeros((N, N, ncomp, m, m), dtype=complex)
    ax = spec.floquet_axis()
    xi1, xi2 = np.meshgrid(ax, ax, indexing="ij")
    keep = np.hypot(xi1, xi2) <= radius
    x = spec.cell.axis_coords()
    for k1, k2 in zip(*np.nonzero(keep)):
        vals = np.zeros((ncomp, m, m), dtype=complex)
        for p1 in range(-cell_modes, cell_modes + 1):
            for p2 in range(-cell_modes, cell_modes + 1):
                coef = rng.normal(size=(ncomp, 1, 1)) + 1j * rng.normal(size=(ncomp, 1, 1))
                mode = np.exp(2j * np.pi * (p1 * x[:, None] + p2 * x[None, :]))
                vals += coef * mode
        data[k1, k2] = vals
    gb = BlochField(spec, data)
    if not real:
        return bloch_inverse(gb, real=False)
    g = bloch_inverse(gb, real=False)
    return CoverFn(spec, g.values.real.copy())
