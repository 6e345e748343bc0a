"""Spectral calculus for periodic fields on the unit cell and its N-fold cover.

Geometry convention: all fields live in scaled coordinates on the unit cell
[0,1]^2 (one spatial period) or on the cover [0,N]^2 (N x N periods).  The
physical lattice enters only through the wavevector matrix K attached to the
grid; differential operators that need physical lengths contract derivatives
with K.  Plain derivative routines here differentiate in the scaled
coordinates.

Grids are uniform with m nodes per direction and node coordinates i/m, so
trapezoid quadrature reduces to the node mean times the domain area and is
exact for band-limited integrands.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
import numpy.typing as npt

__all__ = [
    "GridSpec",
    "CoverSpec",
    "GridFn",
    "CoverFn",
    "spectral_derivative",
    "gradient",
    "norm",
    "lp_norm",
    "cell_mean",
    "component_means",
    "multi_indices",
    "derivative_matrix",
    "dealiased_eval",
    "gaussian_bump",
    "save_field",
    "load_field",
]


@dataclass(frozen=True)
class GridSpec:
    """Unit-cell grid: m x m nodes and the wavevector matrix of the pattern.

    ``wavevectors`` holds the matrix K whose columns are the two lattice
    wavevectors; the direct lattice basis is X = K^{-T}, so K^T X = I.
    Derivatives in physical space are K @ grad in scaled coordinates.
    """

    m: int
    wavevectors: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        if self.m < 4 or self.m % 2:
            raise ValueError(f"need even m >= 4, got {self.m}")
        K = self.K
        if abs(np.linalg.det(K)) < 1e-14:
            raise ValueError("wavevector matrix is singular")

    @property
    def K(self) -> npt.NDArray[np.float64]:
        return np.asarray(self.wavevectors, dtype=float)

    @property
    def lattice(self) -> npt.NDArray[np.float64]:
        """Direct basis X = K^{-T} (columns are the period vectors)."""
        return np.linalg.inv(self.K).T

    @property
    def metric(self) -> npt.NDArray[np.float64]:
        """K^T K, the quadratic form of the physical Laplacian."""
        return self.K.T @ self.K

    def axis_coords(self) -> npt.NDArray[np.float64]:
        return np.arange(self.m) / self.m

    def nodes(self):
        """Meshgrid (x1, x2) of scaled node coordinates, indexing 'ij'."""
        x = self.axis_coords()
        return np.meshgrid(x, x, indexing="ij")

    def freqs(self, axis: int) -> npt.NDArray[np.float64]:
        """Angular frequencies along one axis, broadcast over the grid."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.m, d=1.0 / self.m)
        return k.reshape(-1, 1) if axis == 0 else k.reshape(1, -1)

    def nyquist_mask(self, axis: int) -> npt.NDArray[np.bool_]:
        idx = np.fft.fftfreq(self.m, d=1.0 / self.m) * 1.0
        mask = np.abs(idx + self.m / 2) < 0.5  # the unmatched -m/2 mode
        return mask.reshape(-1, 1) if axis == 0 else mask.reshape(1, -1)


def make_grid(m: int, K) -> GridSpec:
    K = np.asarray(K, dtype=float)
    return GridSpec(m, ((K[0, 0], K[0, 1]), (K[1, 0], K[1, 1])))


@dataclass(frozen=True)
class CoverSpec:
    """N-fold periodic cover of a unit-cell grid: (N*m)^2 nodes on [0,N]^2."""

    cell: GridSpec
    ncells: int

    def __post_init__(self):
        if self.ncells < 1 or self.ncells % 2:
            raise ValueError(f"need even ncells >= 2, got {self.ncells}")

    @property
    def m(self) -> int:
        return self.cell.m * self.ncells

    @property
    def K(self) -> npt.NDArray[np.float64]:
        return self.cell.K

    def axis_coords(self) -> npt.NDArray[np.float64]:
        return np.arange(self.m) / self.cell.m

    def nodes(self):
        x = self.axis_coords()
        return np.meshgrid(x, x, indexing="ij")

    def freqs(self, axis: int) -> npt.NDArray[np.float64]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.m, d=1.0 / self.cell.m)
        return k.reshape(-1, 1) if axis == 0 else k.reshape(1, -1)

    def nyquist_mask(self, axis: int) -> npt.NDArray[np.bool_]:
        idx = np.fft.fftfreq(self.m) * self.m
        mask = np.abs(idx + self.m / 2) < 0.5
        return mask.reshape(-1, 1) if axis == 0 else mask.reshape(1, -1)

    def floquet_axis(self) -> npt.NDArray[np.float64]:
        """Floquet representatives 2*pi*k/N in [-pi, pi), fft ordering."""
        return 2.0 * np.pi * np.fft.fftfreq(self.ncells)


def _as_components(values) -> npt.NDArray:
    vals = np.asarray(values)
    if vals.ndim == 2:
        vals = vals[np.newaxis]
    if vals.ndim != 3:
        raise ValueError(f"expected (n, m, m) values, got shape {vals.shape}")
    return vals


@dataclass
class GridFn:
    """n-component field sampled on a unit-cell grid; values[c, i, j]."""

    spec: GridSpec
    values: npt.NDArray

    def __post_init__(self):
        self.values = _as_components(self.values)
        if self.values.shape[1:] != (self.spec.m, self.spec.m):
            raise ValueError(f"values shape {self.values.shape} does not match m={self.spec.m}")

    @property
    def ncomp(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "GridFn":
        return GridFn(self.spec, self.values.copy())


@dataclass
class CoverFn:
    """n-component field on the cover grid; values[c, i, j]."""

    spec: CoverSpec
    values: npt.NDArray

    def __post_init__(self):
        self.values = _as_components(self.values)
        if self.values.shape[1:] != (self.spec.m, self.spec.m):
            raise ValueError(f"values shape {self.values.shape} does not match cover m={self.spec.m}")

    @property
    def ncomp(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "CoverFn":
        return CoverFn(self.spec, self.values.copy())


Field = GridFn | CoverFn


def tile_to_cover(u: GridFn, ncells: int) -> CoverFn:
    """Periodic extension of a cell field to the N-fold cover."""
    spec = CoverSpec(u.spec, ncells)
    vals = np.tile(u.values, (1, ncells, ncells))
    return CoverFn(spec, vals)


def same_spec(a: Field, b: Field) -> bool:
    return a.spec == b.spec


def _like(u: Field, values) -> Field:
    return type(u)(u.spec, values)


def derivative_values(spec, values, axis: int, order: int = 1):
    """Spectral partial derivative (scaled coordinates) of raw values."""
    if order < 0:
        raise ValueError("negative derivative order")
    if order == 0:
        return values.copy()
    ax = values.ndim - 2 + axis  # spatial axes are the last two
    vhat = np.fft.fft(values, axis=ax)
    k = spec.freqs(axis)
    mult = (1j * k) ** order
    if order % 2:
        mult = np.where(spec.nyquist_mask(axis), 0.0, mult)
    vhat *= mult
    out = np.fft.ifft(vhat, axis=ax)
    if np.isrealobj(values):
        out = out.real
    return out


def spectral_derivative(u: Field, axis: int, order: int = 1) -> Field:
    """d^order u / dx_axis^order in scaled coordinates.

    Exact for band-limited data; the unmatched Nyquist mode is zeroed for
    odd orders so real fields stay real and differentiation commutes with
    complex conjugation.
    """
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    return _like(u, derivative_values(u.spec, u.values, axis, order))


def partial(u: Field, alpha: tuple[int, int]) -> Field:
    """Mixed partial d^alpha u."""
    vals = derivative_values(u.spec, u.values, 0, alpha[0])
    vals = derivative_values(u.spec, vals, 1, alpha[1])
    return _like(u, vals)


def gradient(u: Field):
    """Pair (d1 u, d2 u) of scaled-coordinate partials."""
    return spectral_derivative(u, 0), spectral_derivative(u, 1)


def quad_weight(spec) -> float:
    """Trapezoid weight per node (scaled-coordinate area element)."""
    m_cell = spec.m if isinstance(spec, GridSpec) else spec.cell.m
    return 1.0 / m_cell**2


def lp_norm(u: Field, p: float = 2) -> float:
    """L^p norm with the pointwise Euclidean norm over components."""
    mag2 = np.sum(np.abs(u.values) ** 2, axis=0)
    if np.isinf(p):
        return float(np.sqrt(mag2.max()))
    w = quad_weight(u.spec)
    return float((w * np.sum(mag2 ** (p / 2.0))) ** (1.0 / p))


def multi_indices(s: int):
    """All 2D multi-indices with |alpha| <= s, lexicographic."""
    return [(a, b) for a, b in product(range(s + 1), repeat=2) if a + b <= s]


def norm(u: Field, s: int = 0, p: float = 2) -> float:
    """Discrete W^{s,p} norm over all partials |alpha| <= s.

    For p = 2 the partial norms combine in quadrature, matching the usual
    Sobolev norm; for other finite p the p-th powers are summed; for
    p = inf the maximum is taken.
    """
    m_cell = u.spec.m if isinstance(u.spec, GridSpec) else u.spec.cell.m
    if s > m_cell // 4:
        raise ValueError(f"derivative order s={s} too high for m={m_cell}")
    if s == 0:
        return lp_norm(u, p)
    pieces = [lp_norm(partial(u, a), p) for a in multi_indices(s)]
    if np.isinf(p):
        return float(max(pieces))
    q = 2.0 if p == 2 else float(p)
    return float(np.sum(np.asarray(pieces) ** q) ** (1.0 / q))


def cell_mean(u: Field, comp: int) -> float:
    """Mean of one component over its periodic domain."""
    return float(np.mean(u.values[comp].real)) if np.isrealobj(u.values) else complex(np.mean(u.values[comp]))


def component_means(u: Field):
    return np.mean(u.values, axis=(1, 2))


def _pad_axis_len(m: int, pad: float) -> int:
    mp = int(np.ceil(m * pad))
    return mp + (mp % 2)


def _resample(values, m_to: int):
    """Fourier resampling of values[..., m, m] to an m_to x m_to grid."""
    m = values.shape[-1]
    vhat = np.fft.fft2(values) / m**2
    out = np.zeros(values.shape[:-2] + (m_to, m_to), dtype=complex)
    half = min(m, m_to) // 2
    if m_to < m and half:
        # nodal sampling folds the +-Nyquist pair onto the shared bin
        vhat = vhat.copy()
        vhat[..., half, :] += vhat[..., -half, :]
        vhat[..., :, half] += vhat[..., :, -half]
    sl = np.r_[0 : half + 1, -half + 1 : 0] if half else np.r_[0:1]
    out[..., sl[:, None], sl[None, :]] = vhat[..., sl[:, None], sl[None, :]]
    if m_to > m and half:
        # split the combined coarse Nyquist bin across the +- pair so real
        # fields map to Hermitian spectra and the map is complex-linear
        out[..., half, :] /= 2.0
        out[..., -half, :] = out[..., half, :]
        out[..., :, half] /= 2.0
        out[..., :, -half] = out[..., :, half]
    return np.fft.ifft2(out) * m_to**2


def dealiased_eval(fn, fields, pad: float = 1.5):
    """Evaluate a pointwise (polynomial) map of fields with zero-padding.

    All fields are Fourier-interpolated onto a finer grid (default 3/2,
    the classical 2/3 rule), fn is applied nodewise to the stacked
    component arrays, and the result is truncated back.  fn receives an
    array (ncomp_total, mp, mp) and returns (k, mp, mp).
    """
    base = fields[0]
    m = base.spec.m
    for f in fields[1:]:
        if f.spec != base.spec:
            raise ValueError("mismatched field specs in dealiased_eval")
    stacked = np.concatenate([f.values for f in fields], axis=0)
    real_in = np.isrealobj(stacked)
    mp = _pad_axis_len(m, pad)
    fine = _resample(stacked, mp)
    if real_in:
        fine = fine.real
    out_fine = np.asarray(fn(fine))
    out = _resample(out_fine, m)
    if real_in and np.isrealobj(out_fine):
        out = out.real
    return _like(base, out)


def derivative_matrix(spec, axis: int, order: int = 1) -> npt.NDArray[np.float64]:
    """Dense matrix of the spectral derivative acting on flattened (m, m) values.

    Matches :func:`spectral_derivative` exactly, including the zeroed Nyquist
    mode for odd orders.  Row-major node layout (i * m + j).
    """
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    m = spec.m
    k = spec.freqs(axis).ravel()
    mult = (1j * k) ** order
    if order % 2:
        mult = np.where(spec.nyquist_mask(axis).ravel(), 0.0, mult)
    D1 = np.fft.ifft(mult[:, None] * np.fft.fft(np.eye(m), axis=0), axis=0).real
    eye = np.eye(m)
    return np.kron(D1, eye) if axis == 0 else np.kron(eye, D1)


def gaussian_bump(spec, center, sigma: float, amplitude: float = 1.0):
    """Periodized Gaussian bump, scalar field on the given grid."""
    x1, x2 = spec.nodes()
    period = 1.0 if isinstance(spec, GridSpec) else float(spec.ncells)
    d1 = x1 - center[0] - period * np.round((x1 - center[0]) / period)
    d2 = x2 - center[1] - period * np.round((x2 - center[1]) / period)
    vals = np.zeros_like(x1)
    # a few periodic images so the bump is smooth across the seam
    for s1 in (-period, 0.0, period):
        for s2 in (-period, 0.0, period):
            vals += np.exp(-((d1 + s1) ** 2 + (d2 + s2) ** 2) / (2.0 * sigma**2))
    cls = GridFn if isinstance(spec, GridSpec) else CoverFn
    return cls(spec, amplitude * vals[np.newaxis])


def save_field(path, u: Field) -> None:
    """Write values as flat little-endian float64 plus a JSON sidecar."""
    path = Path(path)
    vals = u.values
    complex_data = np.iscomplexobj(vals)
    flat = vals.astype("<c16" if complex_data else "<f8").tobytes(order="C")
    path.with_suffix(".bin").write_bytes(flat)
    if isinstance(u.spec, GridSpec):
        head = {"kind": "cell", "n": u.ncomp, "m": u.spec.m, "N": 1,
                "wavevectors": np.asarray(u.spec.wavevectors).tolist()}
    else:
        head = {"kind": "cover", "n": u.ncomp, "m": u.spec.cell.m, "N": u.spec.ncells,
                "wavevectors": np.asarray(u.spec.cell.wavevectors).tolist()}
    head["complex"] = complex_data
    head["component_order"] = list(range(u.ncomp))
    path.with_suffix(".json").write_text(json.dumps(head, indent=1))


def load_field(path) -> Field:
    path = Path(path)
    head = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    dtype = "<c16" if head.get("complex") else "<f8"
    vals = np.frombuffer(raw, dtype=dtype)
    cell = make_grid(head["m"], head["wavevectors"])
    if head["kind"] == "cell":
        return GridFn(cell, vals.reshape(head["n"], head["m"], head["m"]).copy())
    spec = CoverSpec(cell, head["N"])
    mm = head["m"] * head["N"]
    return CoverFn(spec, vals.reshape(head["n"], mm, mm).copy())
