"""Periodic wave profiles by constrained Newton iteration.

A profile is a cell-periodic state whose co-moving residual vanishes for a
suitable frame speed.  The nodal values and the two speed components are
solved together.  Translation freedom is removed by two phase constraints
anchored at the initial guess; for each conserved component the residual
equation is redundant (its cell mean vanishes identically), so the equation
at the first node is replaced by a prescribed cell mean.  The bordered
Newton matrix is solved densely, with a least-squares fallback that handles
profiles with degenerate constraint rows (constant states).

Mass-family derivatives (profile and speed sensitivity to the prescribed
means) come from the same bordered matrix and feed the slow-modulation
analysis of the linearized problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import GridFn, GridSpec, derivative_values, make_grid
from .model import FrameData, linearization_matrix, residual_comoving
from .system import SystemDef, load_system

__all__ = [
    "NewtonReport",
    "WaveProfile",
    "WaveFamily",
    "solve_profile",
    "family_derivatives",
    "wave_family",
    "save_profile",
    "load_profile",
]


@dataclass
class NewtonReport:
    """Iteration history of a profile solve."""

    converged: bool
    iterations: int
    residual_norms: list[float] = field(default_factory=list)
    used_lstsq: bool = False


@dataclass
class WaveProfile:
    """Solved wave: system, geometry, frame speed, nodal values, masses."""

    system: SystemDef
    spec: GridSpec
    frame: FrameData
    values: np.ndarray
    masses: np.ndarray
    residual_norm: float
    report: NewtonReport | None = None

    def field(self) -> GridFn:
        return GridFn(self.spec, self.values)

    @property
    def n(self) -> int:
        return self.system.n

    def translations(self) -> np.ndarray:
        """Derivative fields (2, n, m, m) spanning the translation modes."""
        return np.stack([derivative_values(self.spec, self.values, a) for a in range(2)])


def _phase_rows(spec, anchor):
    """Quadrature-weighted rows pairing against the anchor's translations."""
    w = 1.0 / spec.m**2
    return np.stack([w * derivative_values(spec, anchor, a).reshape(-1) for a in range(2)])


def _replace_rows(sysdef, spec, A, C):
    """Swap the first-node equation of each conserved component for a mean."""
    m2 = spec.m**2
    w = 1.0 / m2
    for j in range(sysdef.r):
        row = j * m2
        A[row, :] = 0.0
        A[row, j * m2 : (j + 1) * m2] = w
        C[row, :] = 0.0


def _residual_vector(sysdef, frame, spec, values, masses, anchor, rows):
    R = residual_comoving(sysdef, frame, GridFn(spec, values)).values
    F = R.reshape(-1).copy()
    m2 = spec.m**2
    for j in range(sysdef.r):
        F[j * m2] = values[j].mean() - masses[j]
    g = rows @ (values - anchor).reshape(-1)
    return np.concatenate([F, g])


def _bordered_matrix(sysdef, frame, spec, values, rows):
    A = linearization_matrix(sysdef, frame, spec, values)
    gU = np.stack([derivative_values(spec, values, a) for a in range(2)])
    C = np.einsum("ia,an...->in...", spec.K, gU).reshape(2, -1).T
    _replace_rows(sysdef, spec, A, C)
    nbig = A.shape[0] + 2
    big = np.zeros((nbig, nbig))
    big[:-2, :-2] = A
    big[:-2, -2:] = C
    big[-2:, :-2] = rows
    return big


def _solve_with_fallback(big, rhs, report):
    try:
        sol = np.linalg.solve(big, rhs)
        if np.all(np.isfinite(sol)):
            # reject solutions of numerically singular systems
            if np.linalg.norm(big @ sol - rhs) <= 1e-8 * max(1.0, np.linalg.norm(rhs)):
                return sol
    except np.linalg.LinAlgError:
        pass
    report.used_lstsq = True
    sol, *_ = np.linalg.lstsq(big, rhs, rcond=None)
    return sol


def solve_profile(sysdef: SystemDef, guess: GridFn, speed=(0.0, 0.0), masses=None,
                  *, tol: float = 1e-10, max_iter: int = 40,
                  max_backtrack: int = 6) -> WaveProfile:
    """Newton-solve the profile equation from an initial guess.

    ``masses`` prescribes the cell means of the conserved components and
    defaults to the means of the guess.  The translation gauge is anchored
    at the guess, so a shifted guess converges to the equally shifted wave.
    """
    spec = guess.spec
    values = guess.values.astype(float).copy()
    anchor = values.copy()
    c = np.asarray(speed, dtype=float).copy()
    if masses is None:
        masses = np.array([values[j].mean() for j in range(sysdef.r)])
    masses = np.asarray(masses, dtype=float).reshape(sysdef.r)
    rows = _phase_rows(spec, anchor)
    report = NewtonReport(False, 0)

    def scale():
        return 1.0 + np.max(np.abs(values))

    F = _residual_vector(sysdef, _frame_of(c), spec, values, masses, anchor, rows)
    fnorm = np.max(np.abs(F))
    report.residual_norms.append(fnorm)
    for it in range(max_iter):
        if fnorm < tol * scale():
            break
        big = _bordered_matrix(sysdef, _frame_of(c), spec, values, rows)
        step = _solve_with_fallback(big, -F, report)
        dU = step[:-2].reshape(values.shape)
        dc = step[-2:]
        t = 1.0
        for _ in range(max_backtrack + 1):
            trial_v = values + t * dU
            trial_c = c + t * dc
            Ft = _residual_vector(sysdef, _frame_of(trial_c), spec, trial_v, masses, anchor, rows)
            ft = np.max(np.abs(Ft))
            if ft < fnorm:
                break
            t *= 0.5
        values, c, F, fnorm = trial_v, trial_c, Ft, ft
        report.iterations = it + 1
        report.residual_norms.append(fnorm)

    report.converged = bool(fnorm < tol * scale())
    frame = _frame_of(c)
    resid = residual_comoving(sysdef, frame, GridFn(spec, values)).values
    return WaveProfile(sysdef, spec, frame, values, masses,
                       float(np.max(np.abs(resid))), report)


def _frame_of(c) -> FrameData:
    c = np.asarray(c, dtype=float)
    return FrameData((float(c[0]), float(c[1])))


def family_derivatives(profile: WaveProfile):
    """Sensitivity of the profile and speed to the prescribed masses.

    Returns (dU, dc) with shapes (r, n, m, m) and (2, r).  The translation
    gauge anchors at the solved profile, so the mass directions carry no
    translation component.  Obtained from one factorization of the bordered
    Newton matrix at the solution.
    """
    sysdef, spec = profile.system, profile.spec
    r = sysdef.r
    m2 = spec.m**2
    dU = np.zeros((r, sysdef.n, spec.m, spec.m))
    dc = np.zeros((2, r))
    if r == 0:
        return dU, dc
    rows = _phase_rows(spec, profile.values)
    big = _bordered_matrix(sysdef, profile.frame, spec, profile.values, rows)
    rep = NewtonReport(True, 0)
    for j in range(r):
        rhs = np.zeros(big.shape[0])
        rhs[j * m2] = 1.0
        sol = _solve_with_fallback(big, rhs, rep)
        dU[j] = sol[:-2].reshape(sysdef.n, spec.m, spec.m)
        dc[:, j] = sol[-2:]
    return dU, dc


@dataclass
class WaveFamily:
    """Profile together with its mass-family sensitivities.

    The translation fields and the mass derivatives seed the slow critical
    block of the linearization; dc_dM enters its leading-order coupling.
    """

    profile: WaveProfile
    dU_dM: np.ndarray
    dc_dM: np.ndarray

    @property
    def seeds(self) -> np.ndarray:
        """Stacked kernel seeds (r + 2, n, m, m): translations then masses."""
        return np.concatenate([self.profile.translations(), self.dU_dM])


def wave_family(profile: WaveProfile) -> WaveFamily:
    """Bundle a solved profile with its family derivatives."""
    dU, dc = family_derivatives(profile)
    return WaveFamily(profile, dU, dc)


def save_profile(path, profile: WaveProfile) -> None:
    """Write nodal values as little-endian float64 plus a JSON header."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(profile.values.astype("<f8").tobytes())
    head = {
        "m": profile.spec.m,
        "wavevectors": np.asarray(profile.spec.wavevectors).tolist(),
        "speed": list(profile.frame.speed),
        "masses": profile.masses.tolist(),
        "residual_norm": profile.residual_norm,
        "system": profile.system.to_json() | {"name": profile.system.name},
    }
    path.with_suffix(".json").write_text(json.dumps(head, indent=1))


def load_profile(path) -> WaveProfile:
    path = Path(path)
    head = json.loads(path.with_suffix(".json").read_text())
    sysdef = load_system(head["system"])
    spec = make_grid(head["m"], head["wavevectors"])
    vals = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    vals = vals.reshape(sysdef.n, spec.m, spec.m).copy()
    return WaveProfile(sysdef, spec, FrameData(tuple(head["speed"])), vals,
                       np.asarray(head["masses"]), float(head["residual_norm"]))
