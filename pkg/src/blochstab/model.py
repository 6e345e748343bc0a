"""Differential operators of the co-moving and modulated equations.

The co-moving equation for a polynomial system with wavevector matrix K,
speed c and drift vector K^T c reads

    W_t = (K grad)^T (K grad) W + (K grad)^T G(W) + (K^T c . grad) W + f(W),

all derivatives in scaled cell coordinates.  A spatially modulated change
of variables x -> x - phi(x) turns the right-hand side into an operator
with coefficients built pointwise from the deformation gradient; it splits
into a flux divergence, a source and a commutator part, and its expansion
about the pure wave yields the nonlinear residual driving the modulated
integral equations.

Conventions: gradients of vector fields are stored (2, n, grid) with the
derivative index first; the phase gradient is stored grad[a, b] = d_a
phi_b, so the deformation matrix is (I - grad phi) and physical derivatives
transform with its pointwise inverse.  Flux tables are (2, n, grid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .fields import (Field, _pad_axis_len, _resample, dealiased_eval,
                     derivative_matrix, derivative_values)
from .system import SystemDef

__all__ = [
    "FrameData",
    "PhaseState",
    "OperatorParts",
    "residual_comoving",
    "apply_B",
    "apply_L",
    "apply_L_phi",
    "nonlinear_residual",
    "linearization_matrix",
]


@dataclass(frozen=True)
class FrameData:
    """Speed of the co-moving frame; geometry comes from the grid spec."""

    speed: tuple[float, float]

    @property
    def c(self) -> npt.NDArray[np.float64]:
        return np.asarray(self.speed, dtype=float)

    def drift(self, K) -> npt.NDArray[np.float64]:
        """Advection coefficients K^T c in scaled coordinates."""
        return np.asarray(K).T @ self.c

    def frequency(self, K) -> npt.NDArray[np.float64]:
        """Temporal frequency vector Omega = -K^T c."""
        return -self.drift(K)


def _grad(spec, vals):
    """Stacked scaled-coordinate gradient, shape (2,) + vals.shape."""
    return np.stack([derivative_values(spec, vals, 0), derivative_values(spec, vals, 1)])


def _div(spec, flux):
    """Divergence over the leading axis of flux[(2), n, grid]."""
    return derivative_values(spec, flux[0], 0) + derivative_values(spec, flux[1], 1)


def _metric_laplacian(spec, met, vals, grad):
    """Metric-weighted Laplacian sum_ab met[a,b] d_a d_b vals.

    Diagonal terms use pure second derivatives, which retain the Nyquist
    mode; composing two first derivatives would drop it.
    """
    lap = (met[0, 0] * derivative_values(spec, vals, 0, 2)
           + met[1, 1] * derivative_values(spec, vals, 1, 2))
    if met[0, 1] != 0.0 or met[1, 0] != 0.0:
        lap = lap + (met[0, 1] + met[1, 0]) * derivative_values(spec, grad[1], 0)
    return lap


def _shape_to(out_comps, vals):
    grid = vals.shape[-2:]
    if isinstance(out_comps, tuple):
        return vals.reshape(out_comps + grid)
    return vals.reshape((out_comps,) + grid)


def poly_field(sysdef: SystemDef, kind: str, W: Field, V: Field | None = None):
    """Dealiased evaluation of model polynomials along a state (and direction).

    kind: 'flux' -> G(W) (2,n,grid); 'reaction' -> f(W) (n,grid);
    'flux_jac' -> DG(W)V (2,n,grid); 'reaction_jac' -> Df(W)V (n,grid).
    """
    n = sysdef.n

    if kind == "flux":
        fn = lambda w: sysdef.flux_values(w)
        out: tuple | int = (2, n)
        fields = (W,)
    elif kind == "reaction":
        fn = lambda w: sysdef.reaction_values(w)
        out = n
        fields = (W,)
    elif kind == "flux_jac":
        fn = lambda w, v: np.einsum("ajk...,k...->aj...", sysdef.flux_jacobian(w), v)
        out = (2, n)
        fields = (W, V)
    elif kind == "reaction_jac":
        fn = lambda w, v: np.einsum("jk...,k...->j...", sysdef.reaction_jacobian(w), v)
        out = n
        fields = (W, V)
    else:
        raise ValueError(f"unknown poly_field kind {kind!r}")

    splits = np.cumsum([f.values.shape[0] for f in fields])[:-1]

    def wrapper(stacked):
        parts = np.split(stacked, splits, axis=0) if len(fields) > 1 else [stacked]
        res = fn(*parts)
        return res.reshape((-1,) + stacked.shape[1:])

    vals = dealiased_eval(wrapper, fields).values
    return _shape_to(out, vals)


class PhaseState:
    """Phase offset phi, its time derivative, and the deformation algebra.

    Stores phi and phi_t as (2, grid) value arrays plus the phase gradient
    grad[a, b] = d_a phi_b.  The deformation matrix I - grad phi must stay
    pointwise invertible; construction rejects sup |grad phi| >= 1 (spectral
    norm per node).
    """

    def __init__(self, spec, phi=None, phi_t=None, grad=None, strict: bool = True):
        self.spec = spec
        shape = (2,) + _gridshape(spec)
        self.phi = np.zeros(shape) if phi is None else np.asarray(phi).reshape(shape)
        self.phi_t = np.zeros(shape) if phi_t is None else np.asarray(phi_t).reshape(shape)
        if grad is None:
            grad = np.stack([_grad(spec, self.phi[b]) for b in range(2)], axis=1)
        self.grad = np.asarray(grad).reshape((2, 2) + _gridshape(spec))
        if strict and self.sup_grad() >= 1.0:
            raise ValueError(f"deformation too large: sup |grad phi| = {self.sup_grad():.3f} >= 1")

    @classmethod
    def identity(cls, spec) -> "PhaseState":
        return cls(spec)

    @classmethod
    def from_gradient(cls, spec, grad, phi_t=None) -> "PhaseState":
        """Build from a raw gradient table (e.g. a constant deformation)."""
        g = np.asarray(grad, dtype=float)
        if g.shape == (2, 2):
            g = np.broadcast_to(g[..., None, None], (2, 2) + _gridshape(spec)).copy()
        return cls(spec, phi=None, phi_t=phi_t, grad=g)

    def sup_grad(self) -> float:
        g = self.grad
        # largest singular value of the 2x2 per node, closed form
        a = g[0, 0] ** 2 + g[0, 1] ** 2 + g[1, 0] ** 2 + g[1, 1] ** 2
        d = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        s = np.sqrt(np.maximum(a**2 - 4 * d**2, 0.0))
        return float(np.sqrt(np.max((a + s) / 2)))

    @property
    def deformation(self):
        """Jm[a, b] = delta_ab - d_a phi_b."""
        eye = np.eye(2)[(...,) + (None,) * (self.grad.ndim - 2)]
        return eye - self.grad

    @property
    def det(self):
        J = self.deformation
        return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]

    @property
    def inverse(self):
        """Pointwise inverse of the deformation matrix."""
        J = self.deformation
        det = self.det
        inv = np.empty_like(J)
        inv[0, 0] = J[1, 1] / det
        inv[1, 1] = J[0, 0] / det
        inv[0, 1] = -J[0, 1] / det
        inv[1, 0] = -J[1, 0] / det
        return inv

    def affine_defect(self) -> float:
        """Distance of phi from the inverse-Laplacian of its own Laplacian.

        Periodic phases reconstruct exactly up to their mean; a nonzero
        defect signals corrupted phase data.
        """
        spec = self.spec
        lap = sum(derivative_values(spec, self.phi, a, 2) for a in range(2))
        rec = _inv_laplacian(spec, lap)
        cen = self.phi - np.mean(self.phi, axis=(-2, -1), keepdims=True)
        scale = max(np.max(np.abs(cen)), 1e-30)
        return float(np.max(np.abs(cen - rec)) / scale)


def _gridshape(spec):
    return (spec.m, spec.m)


def _inv_laplacian(spec, vals):
    k1, k2 = spec.freqs(0), spec.freqs(1)
    ksq = k1**2 + k2**2
    vhat = np.fft.fft2(vals)
    with np.errstate(divide="ignore", invalid="ignore"):
        vhat = np.where(ksq == 0.0, 0.0, -vhat / ksq)
    out = np.fft.ifft2(vhat)
    return out.real if np.isrealobj(vals) else out


@dataclass
class OperatorParts:
    """Total operator value and its flux/source/commutator split."""

    total: Field
    flux: npt.NDArray        # (2, n, grid)
    source: Field
    commutator: Field

    def recombined(self) -> Field:
        spec = self.total.spec
        vals = _div(spec, self.flux) + self.source.values + self.commutator.values
        return type(self.total)(spec, vals)


def residual_comoving(sysdef: SystemDef, frame: FrameData, W: Field) -> Field:
    """Right-hand side of the co-moving equation at the state W."""
    spec = W.spec
    K = spec.K
    met = K.T @ K
    gw = np.stack([_grad(spec, W.values[j]) for j in range(W.ncomp)], axis=1)  # (2, n, grid)
    lap = _metric_laplacian(spec, met, W.values, gw)
    G = poly_field(sysdef, "flux", W)
    fluxdiv = _div(spec, np.einsum("ia,in...->an...", K, G))
    drift = frame.drift(K)
    adv = drift[0] * gw[0] + drift[1] * gw[1]
    reac = poly_field(sysdef, "reaction", W)
    return type(W)(spec, lap + fluxdiv + adv + reac)


def _flux_table(sysdef, frame, K, spec, W: Field, Jinv):
    """Modulated flux A_f[W, Phi] = (K Jinv)^T ((K Jinv) grad W + G(W) + c W^T)."""
    KJ = np.einsum("ab,bc...->ac...", K, Jinv)
    gw = np.stack([_grad(spec, W.values[j]) for j in range(W.ncomp)], axis=1)
    inner = np.einsum("ab...,bn...->an...", KJ, gw)
    inner = inner + poly_field(sysdef, "flux", W)
    inner = inner + frame.c[:, None, None, None] * W.values[None, :, :, :]
    return np.einsum("ab...,an...->bn...", KJ, inner)


def _flux_table_lin(sysdef, frame, K, spec, U: Field, V: Field, Jinv):
    """Linearization of the modulated flux in the state, at U in direction V."""
    KJ = np.einsum("ab,bc...->ac...", K, Jinv)
    gv = np.stack([_grad(spec, V.values[j]) for j in range(V.ncomp)], axis=1)
    inner = np.einsum("ab...,bn...->an...", KJ, gv)
    inner = inner + poly_field(sysdef, "flux_jac", U, V)
    inner = inner + frame.c[:, None, None, None] * V.values[None, :, :, :]
    return np.einsum("ab...,an...->bn...", KJ, inner)


def _weighted_div(spec, det, flux):
    """(1/det) grad^T (det * flux)."""
    return _div(spec, det[None] * flux) / det


def _identity_phase(spec) -> PhaseState:
    return PhaseState.identity(spec)


def apply_B(sysdef: SystemDef, frame: FrameData, W: Field, phase: PhaseState | None = None) -> OperatorParts:
    """Modulated spatial operator at state W under the deformation Id - phi.

    Returns the operator value together with its flux/source/commutator
    split; with phi = 0 the total coincides with :func:`residual_comoving`
    and the commutator vanishes.
    """
    spec = W.spec
    if phase is None:
        phase = _identity_phase(spec)
    K = spec.K
    Jinv, det = phase.inverse, phase.det
    Af = _flux_table(sysdef, frame, K, spec, W, Jinv)
    source = poly_field(sysdef, "reaction", W)
    total = _weighted_div(spec, det, Af) + source
    comm = _weighted_div(spec, det, Af) - _div(spec, Af)
    cls = type(W)
    return OperatorParts(cls(spec, total), Af, cls(spec, source), cls(spec, comm))


def apply_L(sysdef: SystemDef, frame: FrameData, U: Field, V: Field) -> Field:
    """Linearization of the co-moving operator about U, applied to V."""
    spec = V.spec
    K = spec.K
    met = K.T @ K
    gv = np.stack([_grad(spec, V.values[j]) for j in range(V.ncomp)], axis=1)
    lap = _metric_laplacian(spec, met, V.values, gv)
    DGV = poly_field(sysdef, "flux_jac", U, V)
    fluxdiv = _div(spec, np.einsum("ia,in...->an...", K, DGV))
    drift = frame.drift(K)
    adv = drift[0] * gv[0] + drift[1] * gv[1]
    reac = poly_field(sysdef, "reaction_jac", U, V)
    return type(V)(spec, lap + fluxdiv + adv + reac)


def _floquet_reps(m: int, delta: float):
    """In-band representatives of the shifted cell harmonics k + delta.

    Each of the m slots carries up to two representatives with separate row
    (output) and column (input) weights.  Away from delta = 0 the centered
    alias representative is unique; at delta = 0 the unmatched half-band
    slot carries the +-m/2 pair with rows summing and columns averaging,
    the nodal-sampling fold of :func:`_resample`, which keeps odd
    derivatives zero there exactly as :func:`derivative_matrix` does.
    """
    k = np.fft.fftfreq(m) * m + delta
    k = (k + m / 2.0) % m - m / 2.0
    reps = np.stack([k, k], axis=1)
    wrow = np.stack([np.ones(m), np.zeros(m)], axis=1)
    wcol = wrow.copy()
    for e in np.nonzero(np.abs(k) == m / 2.0)[0]:
        reps[e] = (-m / 2.0, m / 2.0)
        wrow[e] = (1.0, 1.0)
        wcol[e] = (0.5, 0.5)
    return reps, wrow, wcol


def _floquet_linearization(sysdef: SystemDef, frame: FrameData, spec, values,
                           xi) -> npt.NDArray:
    """Symbol at a nonzero Floquet offset as a shifted-band compression.

    Works in the cell harmonic basis on the ladder k + xi/(2 pi), folded to
    centered alias representatives: derivatives are diagonal symbols of the
    folded frequencies, coefficient products are convolutions between
    representatives through the padded-grid spectra, and first-order flux
    terms compose the two exactly.  The multiplier sets of a +-xi pair are
    exact negatives of each other, so the assembled family is conjugate
    symmetric and the reconstructed cover evolution maps real fields to
    real fields, the cover-Nyquist fibers included.
    """
    m, n = spec.m, sysdef.n
    m2 = m * m
    K = spec.K
    met = K.T @ K
    drift = frame.drift(K)
    mp = _pad_axis_len(m, 1.5)
    vals = _resample(np.asarray(values), mp).real
    coef = np.einsum("ia,ijk...->ajk...", K, sysdef.flux_jacobian(vals))
    Df = sysdef.reaction_jacobian(vals)
    chat = np.fft.fft2(coef) / mp**2
    dhat = np.fft.fft2(Df) / mp**2
    axes = [_floquet_reps(m, float(xi[a]) / (2.0 * np.pi)) for a in range(2)]
    # per-axis gather tables over (row slot, col slot, row rep, col rep);
    # rep differences are integers, addressed modulo the padded grid just
    # as nodal products alias there
    qd = [np.rint(reps[:, None, :, None] - reps[None, :, None, :]).astype(int) % mp
          for reps, _, _ in axes]
    wt = [wrow[:, None, :, None] * wcol[None, :, None, :]
          for _, wrow, wcol in axes]

    def conv(fh, deriv_axis=None):
        out = np.zeros((m, m, m, m), dtype=complex)
        for u1 in range(2):
            for v1 in range(2):
                w1 = wt[0][:, :, u1, v1]
                if not w1.any():
                    continue
                q1 = qd[0][:, :, u1, v1]
                for u2 in range(2):
                    for v2 in range(2):
                        w2 = wt[1][:, :, u2, v2]
                        if not w2.any():
                            continue
                        q2 = qd[1][:, :, u2, v2]
                        term = fh[q1[:, None, :, None], q2[None, :, None, :]]
                        term = term * (w1[:, None, :, None] * w2[None, :, None, :])
                        if deriv_axis == 0:
                            term = term * (2j * np.pi * axes[0][0][:, u1])[:, None, None, None]
                        elif deriv_axis == 1:
                            term = term * (2j * np.pi * axes[1][0][:, u2])[None, :, None, None]
                        out += term
        return out.reshape(m2, m2)

    # scalar second-order + drift part, diagonal over rep choices
    reps1, wrow1, wcol1 = axes[0]
    reps2, wrow2, wcol2 = axes[1]
    wd1, wd2 = wrow1 * wcol1, wrow2 * wcol2
    diag = np.zeros((m, m), dtype=complex)
    for u1 in range(2):
        for u2 in range(2):
            w = wd1[:, u1][:, None] * wd2[:, u2][None, :]
            if not w.any():
                continue
            a1 = (2.0 * np.pi * reps1[:, u1])[:, None]
            a2 = (2.0 * np.pi * reps2[:, u2])[None, :]
            diag += w * (-(met[0, 0] * a1 * a1 + (met[0, 1] + met[1, 0]) * a1 * a2
                           + met[1, 1] * a2 * a2)
                         + 1j * (drift[0] * a1 + drift[1] * a2))
    dvals = diag.reshape(-1)

    A = np.zeros((n, m2, n, m2), dtype=complex)
    for j in range(n):
        for k in range(n):
            blk = np.zeros((m2, m2), dtype=complex)
            for a in range(2):
                if np.any(chat[a, j, k]):
                    blk += conv(chat[a, j, k], deriv_axis=a)
            if np.any(dhat[j, k]):
                blk += conv(dhat[j, k])
            if j == k:
                blk[np.diag_indices(m2)] += dvals
            if blk.any():
                # back to nodal values: inverse transform on the row index,
                # forward on the column index
                blk4 = blk.reshape(m, m, m, m)
                blk4 = np.fft.fft2(np.fft.ifft2(blk4, axes=(0, 1)), axes=(2, 3))
                A[j, :, k, :] = blk4.reshape(m2, m2)
    return A.reshape(n * m2, n * m2)


def linearization_matrix(sysdef: SystemDef, frame: FrameData, spec, values,
                         floquet=None) -> npt.NDArray:
    """Dense matrix of the linearized co-moving operator on flattened values.

    With a Floquet offset xi the matrix represents e^{-i xi.x} L e^{i xi.x}
    compressed on the shifted harmonic ladder, see
    :func:`_floquet_linearization`.  Rows and columns are component-major
    over row-major (m, m) nodes.  Coefficient products follow the
    padded-grid evaluation of :func:`poly_field`, so at xi = 0 the matrix
    is the exact Jacobian of :func:`residual_comoving` and matches
    :func:`apply_L` to roundoff on every direction, Nyquist modes included.
    """
    m, n = spec.m, sysdef.n
    m2 = m * m
    if n * m2 > 40000:
        raise ValueError(f"dense operator with {n * m2} rows is too large")
    if floquet is not None and (floquet[0] != 0.0 or floquet[1] != 0.0):
        return _floquet_linearization(sysdef, frame, spec, values, floquet)
    K = spec.K
    met = K.T @ K
    drift = frame.drift(K)
    D = [derivative_matrix(spec, 0), derivative_matrix(spec, 1)]
    # pure second derivatives keep the Nyquist mode, so D[a] @ D[a] is wrong
    D2 = {(0, 0): derivative_matrix(spec, 0, order=2),
          (1, 1): derivative_matrix(spec, 1, order=2),
          (0, 1): D[0] @ D[1], (1, 0): D[1] @ D[0]}
    scal = sum(met[a, b] * D2[a, b] for a in range(2) for b in range(2))
    scal = scal + drift[0] * D[0] + drift[1] * D[1]
    # coefficient multiplication acts on the padded grid: resample up,
    # multiply by the jacobians sampled there, truncate back
    mp = _pad_axis_len(m, 1.5)
    mp2 = mp * mp
    Pu = _resample(np.eye(m2).reshape(m2, m, m), mp).real.reshape(m2, mp2).T
    Pd = _resample(np.eye(mp2).reshape(mp2, mp, mp), m).real.reshape(mp2, m2).T
    vals = _resample(np.asarray(values), mp).real
    coef = np.einsum("ia,ijk...->ajk...", K, sysdef.flux_jacobian(vals))
    Df = sysdef.reaction_jacobian(vals)
    DPd = [D[0] @ Pd, D[1] @ Pd]
    A = np.zeros((n, m2, n, m2))
    for j in range(n):
        A[j, :, j, :] += scal
        for k in range(n):
            for a in range(2):
                c = coef[a, j, k].reshape(-1)
                if np.any(c):
                    A[j, :, k, :] += DPd[a] @ (c[:, None] * Pu)
            d = Df[j, k].reshape(-1)
            if np.any(d):
                A[j, :, k, :] += Pd @ (d[:, None] * Pu)
    return A.reshape(n * m2, n * m2)


def apply_L_phi(sysdef: SystemDef, frame: FrameData, U: Field, V: Field,
                phase: PhaseState) -> Field:
    """Linearization of the modulated operator in the state, frozen phase."""
    spec = V.spec
    Jinv, det = phase.inverse, phase.det
    Afl = _flux_table_lin(sysdef, frame, spec.K, spec, U, V, Jinv)
    reac = poly_field(sysdef, "reaction_jac", U, V)
    return type(V)(spec, _weighted_div(spec, det, Afl) + reac)


def _frame_lin_flux(sysdef, frame, K, spec, U: Field):
    """Phase-derivative of the modulated flux at the identity, direction -phi.

    Exact derivative of A_f[U, Id - phi] in phi at 0 divided by the phase
    gradient: returns a function of grad phi (linear), evaluated lazily.
    """
    gw = np.stack([_grad(spec, U.values[j]) for j in range(U.ncomp)], axis=1)
    Kgw = np.einsum("ab,bn...->an...", K, gw)
    G = poly_field(sysdef, "flux", U)
    Gc = G + frame.c[:, None, None, None] * U.values[None]

    def at(gphi):
        Kg = np.einsum("ab,bc...->ac...", K, gphi)
        t1 = np.einsum("ab...,an...->bn...", Kg, Kgw)
        t2 = np.einsum("ab,bc...,cn...->an...", K.T @ K, gphi, gw)
        t3 = np.einsum("ab...,an...->bn...", Kg, Gc)
        return t1 + t2 + t3

    return at


def nonlinear_residual(sysdef: SystemDef, frame: FrameData, U: Field, V: Field,
                       phase: PhaseState) -> OperatorParts:
    """Residual N[V, phi] of the modulated equation about the wave U.

    Defined so that (d/dt - L)(V + (phi . grad) U) = N along solutions of
    the modulated equation.  The returned split (flux, source, commutator)
    follows the structure of the modulated operator: the source part is the
    quadratic reaction remainder and vanishes identically in the first r
    components, the commutator part carries every term with a second phase
    derivative or a gradient of phi_t.
    """
    spec = V.spec
    cls = type(V)
    K = spec.K
    Jinv, det = phase.inverse, phase.det
    UpV = cls(spec, U.values + V.values)

    # advective coefficient rows: u = phi_t^T Jinv, u' = phi_t^T (grad phi) Jinv
    u = np.einsum("a...,ab...->b...", phase.phi_t, Jinv)
    up = np.einsum("a...,ac...,cb...->b...", phase.phi_t, phase.grad, Jinv)

    # ---- flux part ----
    Afl_phi = _flux_table_lin(sysdef, frame, K, spec, U, V, Jinv)
    eyeJ = np.broadcast_to(np.eye(2)[..., None, None], Jinv.shape)
    Afl_id = _flux_table_lin(sysdef, frame, K, spec, U, V, eyeJ)
    lin_diff = Afl_phi - Afl_id

    Af_phi_U = _flux_table(sysdef, frame, K, spec, U, Jinv)
    Af_phi_UpV = _flux_table(sysdef, frame, K, spec, UpV, Jinv)
    quad = Af_phi_UpV - Af_phi_U - Afl_phi

    Af_id_U = _flux_table(sysdef, frame, K, spec, U, eyeJ)
    frame_lin = _frame_lin_flux(sysdef, frame, K, spec, U)(phase.grad)
    frame_diff = Af_phi_U - Af_id_U - frame_lin

    adv_flux = -(u[:, None] * V.values[None]) - (up[:, None] * U.values[None])
    Nf = lin_diff + quad + frame_diff + adv_flux

    # ---- source part ----
    def quad_reaction(w, v):
        return (sysdef.reaction_values(w + v) - sysdef.reaction_values(w)
                - np.einsum("jk...,k...->j...", sysdef.reaction_jacobian(w), v))

    splits = [U.values.shape[0]]

    def wrap(stacked):
        w, v = np.split(stacked, splits, axis=0)
        return quad_reaction(w, v)

    Ns = dealiased_eval(wrap, (U, V)).values

    # ---- commutator part ----
    def comm_of(flux):
        return _weighted_div(spec, det, flux) - _div(spec, flux)

    comm_lin = comm_of(Afl_phi)
    comm_quad = comm_of(Af_phi_UpV) - comm_of(Af_phi_U) - comm_lin
    # phase-derivative of the commutator at the identity, direction -phi
    divphi = phase.grad[0, 0] + phase.grad[1, 1]
    comm_frame = comm_of(Af_phi_U) - (divphi * _div(spec, Af_id_U) - _div(spec, divphi[None] * Af_id_U))
    adv_corr = V.values * _div_vec(spec, u)[None] + U.values * _div_vec(spec, up)[None]
    Nc = comm_lin + comm_quad + comm_frame + adv_corr

    total = cls(spec, _div(spec, Nf) + Ns + Nc)
    return OperatorParts(total, Nf, cls(spec, Ns), cls(spec, Nc))


def _div_vec(spec, u):
    return derivative_values(spec, u[0], 0) + derivative_values(spec, u[1], 1)


def nonlinear_residual_direct(sysdef: SystemDef, frame: FrameData, U: Field, V: Field,
                              phase: PhaseState) -> Field:
    """Independent route to the total nonlinear residual.

    Collapses the defining expansion: N = B[U+V, Id-phi] - B[U, Id]
    - L(V + (phi.grad)U) + (phi.grad) B[U, Id] - advective terms.  Used to
    cross-check the split route; the two must agree to rounding on
    band-limited data.
    """
    spec = V.spec
    cls = type(V)
    Jinv = phase.inverse
    UpV = cls(spec, U.values + V.values)
    B_mod = apply_B(sysdef, frame, UpV, phase).total.values
    R0 = residual_comoving(sysdef, frame, U)
    phigradU = np.einsum("a...,an...->n...", phase.phi,
                         np.stack([_grad(spec, U.values[j]) for j in range(U.ncomp)], axis=1))
    LV = apply_L(sysdef, frame, U, cls(spec, V.values + phigradU)).values
    phigradR = np.einsum("a...,an...->n...", phase.phi,
                         np.stack([_grad(spec, R0.values[j]) for j in range(R0.ncomp)], axis=1))
    u = np.einsum("a...,ab...->b...", phase.phi_t, Jinv)
    up = np.einsum("a...,ac...,cb...->b...", phase.phi_t, phase.grad, Jinv)
    gU = np.stack([_grad(spec, U.values[j]) for j in range(U.ncomp)], axis=1)
    gV = np.stack([_grad(spec, V.values[j]) for j in range(V.ncomp)], axis=1)
    adv = -np.einsum("a...,an...->n...", up, gU) - np.einsum("a...,an...->n...", u, gV)
    return cls(spec, B_mod - R0.values - LV + phigradR + adv)
