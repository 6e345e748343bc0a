"""Floquet spectra of the linearized wave and the slow critical block.

The linearization about a periodic wave block-diagonalizes over Floquet
exponents xi in [-pi, pi)^2 into dense symbols acting on cell-periodic
data.  Stability splits into three checks: at xi = 0 the eigenvalue 0
must carry algebraic multiplicity r + 2 (two translations plus one mode
per conserved component) with the rest of the spectrum strictly in the
left half plane; away from xi = 0 every eigenvalue must have negative
real part; and the slow (r + 2)-dimensional block must decay diffusively,
uniformly over ray directions.

The critical block is continued along rays through a resolvent contour
integral around the origin.  Fixed xi = 0 seeds (translation derivatives
and mass-family derivatives; translation duals and per-component
constants) are pushed through the spectral projector and its transpose,
bi-orthonormalized through their Gram matrix, and paired against the
symbol to form the coupling matrix D.  A correction built from the ray
derivative of the projected translation columns removes first-order
content of the conserved dual rows, after which the scaled matrix
Delta = S D S^{-1}, S = diag(rho, rho, 1, ..., 1), stays bounded as the
radius rho goes to zero.  The decay check samples log |exp(t Delta)| on
a (point, time) lattice and certifies the largest rate theta for which
C = sup exp(t Delta) exp(theta t rho^2) stays a modest constant, with an
explicit witness when certification fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, eigs

from .model import linearization_matrix
from .profiles import WaveFamily, WaveProfile, wave_family

__all__ = [
    "BlochSymbol", "BlockPoint", "CriticalBlock", "D1Report", "D2Report",
    "D3Report", "GramBreakdown", "RayFan", "SpectralSweep", "StabilityVerdict",
    "SweepPoint", "assemble_symbol", "assess_stability", "check_D1_D2",
    "check_D3", "critical_block_along_ray", "eigen_sweep", "floquet_grid",
    "loglog_slope", "pairing_families", "ray_fan",
]

# dense eigensolves below this dimension, shift-invert iteration above
DENSE_EIG_LIMIT = 2048
GRAM_COND_LIMIT = 1e6
TRACE_DRIFT_LIMIT = 0.1


class GramBreakdown(RuntimeError):
    """Seeded bases stopped resolving the slow cluster; results are void."""


@dataclass
class BlochSymbol:
    """Dense Floquet symbol of the linearization at one exponent xi."""

    xi: tuple[float, float]
    matrix: npt.NDArray
    _schur: tuple | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def schur(self):
        """Cached complex Schur factorization matrix = Z T Z^H."""
        if self._schur is None:
            T, Z = sla.schur(np.asarray(self.matrix, dtype=complex),
                             output="complex")
            self._schur = (T, Z)
        return self._schur

    def eigenvalues(self) -> npt.NDArray:
        return np.diag(self.schur()[0]).copy()

    def solve_resolvent(self, z: complex, B: npt.NDArray) -> npt.NDArray:
        """(z I - L)^{-1} B through the cached Schur factorization."""
        T, Z = self.schur()
        rhs = Z.conj().T @ B
        out = sla.solve_triangular(z * np.eye(self.dim) - T, rhs, lower=False)
        return Z @ out

    def solve_resolvent_dual(self, z: complex, B: npt.NDArray) -> npt.NDArray:
        """(z I - L^T)^{-1} B without forming a second factorization."""
        T, Z = self.schur()
        rhs = Z.T @ B
        out = sla.solve_triangular(z * np.eye(self.dim) - T.T, rhs, lower=True)
        return Z.conj() @ out


def assemble_symbol(profile: WaveProfile, xi=(0.0, 0.0)) -> BlochSymbol:
    """Dense symbol of the linearization about the wave at exponent xi.

    Mirror exponents are built once at the canonical sign and conjugated,
    so conj(symbol(-xi)) equals symbol(xi) bitwise.
    """
    x = (float(xi[0]), float(xi[1]))
    if x == (0.0, 0.0):
        return BlochSymbol(x, linearization_matrix(
            profile.system, profile.frame, profile.spec, profile.values))
    flip = x[0] < 0.0 or (x[0] == 0.0 and x[1] < 0.0)
    rep = (-x[0], -x[1]) if flip else x
    mat = linearization_matrix(profile.system, profile.frame, profile.spec,
                               profile.values, floquet=rep)
    return BlochSymbol(x, np.conj(mat) if flip else mat)


def floquet_grid(n1: int, n2: int | None = None) -> npt.NDArray:
    """Uniform exponents in [-pi, pi)^2, lexicographically sorted, (N, 2)."""
    n2 = n1 if n2 is None else n2
    ax1 = np.sort(2.0 * np.pi * np.fft.fftfreq(n1))
    ax2 = np.sort(2.0 * np.pi * np.fft.fftfreq(n2))
    return np.array([(x1, x2) for x1 in ax1 for x2 in ax2])


@dataclass
class SweepPoint:
    """Leading eigenvalues at one exponent, sorted by descending real part."""

    xi: tuple[float, float]
    eigenvalues: npt.NDArray
    residuals: npt.NDArray
    k: int
    failed: bool = False
    message: str = ""


@dataclass
class SpectralSweep:
    """Eigenvalue sweep over a set of Floquet exponents."""

    points: list[SweepPoint]
    k: int
    m: int
    n: int
    r: int
    dense: bool
    name: str


def _leading_shift_invert(A: npt.NDArray, k: int, sigma: float = 1e-3):
    """Eigenpairs near the origin of a large dense matrix via shift-invert."""
    dim = A.shape[0]
    lu = sla.lu_factor(A - sigma * np.eye(dim))
    op = LinearOperator((dim, dim), matvec=lambda x: sla.lu_solve(lu, x),
                        dtype=complex)
    kk = min(max(3 * k, k + 4), dim - 2)
    return eigs(A, k=kk, sigma=sigma, OPinv=op, which="LM")


def eigen_sweep(profile: WaveProfile, xi_grid, k: int = 8) -> SpectralSweep:
    """Leading-k eigenvalues of the symbol at every exponent in xi_grid.

    Solver failures are recorded on the affected point instead of raised,
    so downstream checks can report an indeterminate verdict.
    """
    dim = profile.n * profile.spec.m ** 2
    dense = dim <= DENSE_EIG_LIMIT
    points = []
    for xi in xi_grid:
        site = (float(xi[0]), float(xi[1]))
        A = np.asarray(assemble_symbol(profile, site).matrix, dtype=complex)
        try:
            if dense:
                lam, vec = sla.eig(A)
            else:
                lam, vec = _leading_shift_invert(A, k)
        except Exception as exc:    # noqa: BLE001 - recorded, not silenced
            points.append(SweepPoint(site, np.zeros(0, dtype=complex),
                                     np.zeros(0), k, failed=True,
                                     message=str(exc)))
            continue
        order = np.lexsort((-lam.imag, -lam.real))[:k]
        lam, vec = lam[order], vec[:, order]
        res = (np.linalg.norm(A @ vec - vec * lam[None, :], axis=0)
               / np.linalg.norm(vec, axis=0))
        points.append(SweepPoint(site, lam, res, k))
    return SpectralSweep(points, k=k, m=profile.spec.m, n=profile.n,
                         r=profile.system.r, dense=dense,
                         name=profile.system.name)


@dataclass
class D1Report:
    """Multiplicity and spectral gap of the zero cluster at xi = 0."""

    passes: bool
    multiplicity: int
    margin: float
    cluster_radius: float


@dataclass
class D2Report:
    """Sign of the spectrum over the sampled nonzero exponents."""

    passes: bool
    max_real: float
    worst_xi: tuple[float, float] | None
    indeterminate: bool
    failures: list


@dataclass
class D3Report:
    """Certified uniform diffusive decay rate of the scaled slow block."""

    passes: bool
    theta: float | None
    C: float | None
    xi0: float | None
    witness: tuple[tuple[float, float], float] | None = None


@dataclass
class StabilityVerdict:
    """Bundle of the three diffusive-stability checks.

    A full verdict carries all three reports; check_D3 alone leaves d1 and
    d2 empty.  theta_prime and C_prime certify the unscaled block with its
    1/rho prefactor absorbed, the form used by pointwise semigroup bounds.
    """

    d1: D1Report | None
    d2: D2Report | None
    d3: D3Report | None
    theta_prime: float | None = None
    C_prime: float | None = None
    xi0: float | None = None
    meta: dict = field(default_factory=dict)
    version: str = "1"

    @property
    def passes(self) -> bool:
        return all(rep is not None and rep.passes
                   for rep in (self.d1, self.d2, self.d3))

    def to_json(self) -> dict:
        def opt(x):
            return None if x is None else float(x)

        d1 = self.d1
        d2 = self.d2
        d3 = self.d3
        return {
            "version": self.version,
            "passes": self.passes,
            "d1": None if d1 is None else {
                "passes": bool(d1.passes),
                "multiplicity": int(d1.multiplicity),
                "margin": opt(d1.margin),
                "cluster_radius": float(d1.cluster_radius)},
            "d2": None if d2 is None else {
                "passes": bool(d2.passes),
                "max_real": opt(d2.max_real),
                "worst_xi": None if d2.worst_xi is None else
                            [float(d2.worst_xi[0]), float(d2.worst_xi[1])],
                "indeterminate": bool(d2.indeterminate),
                "failures": [[[float(x[0]), float(x[1])], str(msg)]
                             for x, msg in d2.failures]},
            "d3": None if d3 is None else {
                "passes": bool(d3.passes),
                "theta": opt(d3.theta),
                "C": opt(d3.C),
                "xi0": opt(d3.xi0),
                "witness": None if d3.witness is None else
                           [[float(d3.witness[0][0]), float(d3.witness[0][1])],
                            float(d3.witness[1])]},
            "theta_prime": opt(self.theta_prime),
            "C_prime": opt(self.C_prime),
            "xi0": opt(self.xi0),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data: dict) -> "StabilityVerdict":
        d1 = data.get("d1")
        d2 = data.get("d2")
        d3 = data.get("d3")
        rep1 = None if d1 is None else D1Report(
            bool(d1["passes"]), int(d1["multiplicity"]),
            float(d1["margin"]), float(d1["cluster_radius"]))
        rep2 = None if d2 is None else D2Report(
            bool(d2["passes"]), float(d2["max_real"]),
            None if d2["worst_xi"] is None else
            (float(d2["worst_xi"][0]), float(d2["worst_xi"][1])),
            bool(d2["indeterminate"]),
            [((float(x[0]), float(x[1])), msg) for x, msg in d2["failures"]])
        rep3 = None if d3 is None else D3Report(
            bool(d3["passes"]),
            None if d3["theta"] is None else float(d3["theta"]),
            None if d3["C"] is None else float(d3["C"]),
            None if d3["xi0"] is None else float(d3["xi0"]),
            None if d3["witness"] is None else
            ((float(d3["witness"][0][0]), float(d3["witness"][0][1])),
             float(d3["witness"][1])))
        opt = lambda x: None if x is None else float(x)
        return cls(d1=rep1, d2=rep2, d3=rep3,
                   theta_prime=opt(data.get("theta_prime")),
                   C_prime=opt(data.get("C_prime")),
                   xi0=opt(data.get("xi0")),
                   meta=data.get("meta", {}),
                   version=data.get("version", "1"))


def check_D1_D2(sweep: SpectralSweep, cluster_radius: float = 1e-6
                ) -> StabilityVerdict:
    """Zero-cluster multiplicity at xi = 0 and spectral sign elsewhere."""
    failures = [(pt.xi, pt.message) for pt in sweep.points if pt.failed]
    indeterminate = bool(failures)
    zero = next((pt for pt in sweep.points if pt.xi == (0.0, 0.0)), None)
    if zero is None:
        raise ValueError("sweep does not contain the exponent xi = 0")
    expected = sweep.r + 2
    if zero.failed:
        d1 = D1Report(False, 0, float("nan"), cluster_radius)
    else:
        incluster = np.abs(zero.eigenvalues) <= cluster_radius
        rest = zero.eigenvalues[~incluster]
        margin = float(-np.max(rest.real)) if rest.size else float("nan")
        mult = int(np.sum(incluster))
        d1 = D1Report(mult == expected and rest.size > 0 and margin > 0.0,
                      mult, margin, cluster_radius)
    max_real = -np.inf
    worst = None
    for pt in sweep.points:
        if pt.failed or pt.xi == (0.0, 0.0) or pt.eigenvalues.size == 0:
            continue
        top = float(pt.eigenvalues.real[0])
        if top > max_real:
            max_real, worst = top, pt.xi
    d2 = D2Report(not indeterminate and worst is not None and max_real < 0.0,
                  max_real, worst, indeterminate, failures)
    return StabilityVerdict(d1=d1, d2=d2, d3=None,
                            meta={"model": sweep.name, "m": sweep.m,
                                  "sites": len(sweep.points)})


@dataclass
class BlockPoint:
    """Critical block at one exponent with its bases and diagnostics.

    basis and dual_basis hold the corrected bi-orthonormal pair (columns
    Q and Qt with weight * Qt^T Q = I); scaled_basis and scaled_dual carry
    the radius scaling that matches Delta, so the projected semigroup is
    (1/rho) scaled_basis exp(t Delta) (weight * scaled_dual^T .).
    """

    radius: float
    xi: tuple[float, float]
    D: npt.NDArray
    Delta: npt.NDArray
    basis: npt.NDArray | None = None
    dual_basis: npt.NDArray | None = None
    scaled_basis: npt.NDArray | None = None
    scaled_dual: npt.NDArray | None = None
    weight: float | None = None
    projector_defect: float = float("nan")
    projector_trace: float = float("nan")
    gram_cond: float = float("nan")
    isolated: bool = True
    cluster_eigs: npt.NDArray | None = None

    def projector(self) -> npt.NDArray:
        """Materialized rank-(r + 2) spectral projector."""
        return self.basis @ (self.weight * self.dual_basis.T)


@dataclass
class CriticalBlock:
    """Slow block continued along one ray of Floquet exponents."""

    omega: tuple[float, float]
    radii: list[float]
    points: list[BlockPoint]
    zero: BlockPoint
    nu: npt.NDArray
    contour_radius: float
    contour_nodes: int


@dataclass
class RayFan:
    """Critical blocks over a fan of ray directions."""

    blocks: list[CriticalBlock]
    aborted: list


def _contour_rule(rho_c: float, nodes: int):
    """Midpoint rule for the contour integral over the circle |z| = rho_c."""
    phi = 2.0 * np.pi * (np.arange(nodes) + 0.5) / nodes
    z = rho_c * np.exp(1j * phi)
    return z, z / nodes


def _apply_projector(symbol: BlochSymbol, z_nodes, weights, B, dual=False):
    out = np.zeros(B.shape, dtype=complex)
    for z, wz in zip(z_nodes, weights):
        if dual:
            out += wz * symbol.solve_resolvent_dual(z, B)
        else:
            out += wz * symbol.solve_resolvent(z, B)
    return out


def _quadrature_trace(symbol: BlochSymbol, z_nodes, weights) -> complex:
    lam = symbol.eigenvalues()
    return complex(sum(wz * np.sum(1.0 / (z - lam))
                       for z, wz in zip(z_nodes, weights)))


def _diagnose(symbol, B, rho_c, p, z_nodes, weights):
    """Projector quality at one exponent; raises when the cluster is lost."""
    trace = _quadrature_trace(symbol, z_nodes, weights)
    if abs(trace - p) > TRACE_DRIFT_LIMIT:
        raise GramBreakdown(
            f"contour captures trace {trace.real:.3f} instead of {p} "
            f"at xi = {symbol.xi}")
    again = _apply_projector(symbol, z_nodes, weights, B)
    num = np.linalg.norm(again - B, axis=0)
    den = np.maximum(np.linalg.norm(B, axis=0), 1e-300)
    lam = symbol.eigenvalues()
    inside = np.abs(lam) < rho_c
    isolated = bool(np.min(np.abs(np.abs(lam) - rho_c)) >= 0.1 * rho_c
                    and int(np.sum(inside)) == p)
    cluster = lam[inside]
    cluster = cluster[np.argsort(np.abs(cluster))]
    return float(np.max(num / den)), float(trace.real), isolated, cluster


def critical_block_along_ray(profile: WaveProfile,
                             family: WaveFamily | None = None,
                             omega=(1.0, 0.0), radii=None, *,
                             contour_nodes: int = 48,
                             dual_completion=None) -> CriticalBlock:
    """Continue the slow block along the ray xi = rho * omega.

    Primal seeds are the translation and mass-family derivatives at xi = 0;
    dual seeds are the translation fields (or dual_completion, (dim, 2))
    and one constant per conserved component.  The dual basis obtained from
    the Gram solve is the unique bi-orthonormal partner inside the slow
    subspace, so block matrices do not depend on the completion choice.
    """
    if family is None:
        family = wave_family(profile)
    spec = profile.spec
    m2 = spec.m ** 2
    w = 1.0 / m2
    dim = profile.n * m2
    r = profile.system.r
    p = r + 2
    nrm = float(np.hypot(omega[0], omega[1]))
    omega = (float(omega[0]) / nrm, float(omega[1]) / nrm)
    if radii is None:
        radii = np.geomspace(0.025, 0.5, 8)
    radii = sorted(float(x) for x in radii)
    seeds = np.ascontiguousarray(family.seeds.reshape(p, dim).T, dtype=float)
    duals = np.zeros((dim, p))
    comp = seeds[:, :2] if dual_completion is None else \
        np.asarray(dual_completion, dtype=float).reshape(dim, 2)
    duals[:, :2] = comp
    for j in range(r):
        duals[j * m2:(j + 1) * m2, 2 + j] = 1.0

    sym0 = assemble_symbol(profile, (0.0, 0.0))
    lam0 = sym0.eigenvalues()
    order = np.argsort(np.abs(lam0))
    rho_c = 0.5 * float(np.abs(lam0[order[p]]))
    if rho_c <= 0.0 or np.abs(lam0[order[p - 1]]) > 0.5 * rho_c:
        raise GramBreakdown("no isolated eigenvalue cluster at the origin")
    z_nodes, weights = _contour_rule(rho_c, contour_nodes)

    def station(sym):
        B = _apply_projector(sym, z_nodes, weights, seeds)
        Bt = _apply_projector(sym, z_nodes, weights, duals, dual=True)
        G = w * (Bt.T @ B)
        cond = float(np.linalg.cond(G))
        if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
            raise GramBreakdown(
                f"gram condition {cond:.3e} at xi = {sym.xi}")
        Qt = np.linalg.solve(G, Bt.T).T
        return B, Qt, cond

    def block_of(sym, B, Qt):
        A = np.asarray(sym.matrix, dtype=complex)
        return w * (Qt.T @ (A @ B))

    B0, Qt0, cond0 = station(sym0)
    D0 = block_of(sym0, B0, Qt0)
    defect0, trace0, isolated0, cluster0 = _diagnose(
        sym0, B0, rho_c, p, z_nodes, weights)

    # per-unit-radius ray derivative of the projected translation columns,
    # paired against the conserved dual rows at zero
    nu = np.zeros((r, 2), dtype=complex)
    if r > 0 and radii:
        h = radii[0]
        shots = {}
        for s in (h, -h, 0.5 * h, -0.5 * h):
            sym = assemble_symbol(profile, (s * omega[0], s * omega[1]))
            shots[s] = _apply_projector(sym, z_nodes, weights, seeds[:, :2])
        coarse = (shots[h] - shots[-h]) / (2.0 * h)
        fine = (shots[0.5 * h] - shots[-0.5 * h]) / h
        dQ = (4.0 * fine - coarse) / 3.0
        nu = w * (Qt0[:, 2:].T @ dQ)

    points = []
    for rho in radii:
        xi = (rho * omega[0], rho * omega[1])
        sym = assemble_symbol(profile, xi)
        B, Qt, cond = station(sym)
        Draw = block_of(sym, B, Qt)
        defect, trace, isolated, cluster = _diagnose(
            sym, B, rho_c, p, z_nodes, weights)
        MP = np.eye(p, dtype=complex)
        MP[2:, :2] = -rho * nu
        MT = np.eye(p, dtype=complex)
        MT[:2, 2:] = rho * nu.T
        P = B @ MP
        Pt = Qt @ MT
        D = MT.T @ Draw @ MP
        sc = np.concatenate([[rho, rho], np.ones(r)])
        Delta = D * (sc[:, None] / sc[None, :])
        qscale = np.concatenate([[1.0, 1.0], np.full(r, rho)])
        points.append(BlockPoint(
            radius=rho, xi=xi, D=D, Delta=Delta, basis=P, dual_basis=Pt,
            scaled_basis=P * qscale[None, :], scaled_dual=Pt * sc[None, :],
            weight=w, projector_defect=defect, projector_trace=trace,
            gram_cond=cond, isolated=isolated, cluster_eigs=cluster))

    zero = BlockPoint(
        radius=0.0, xi=(0.0, 0.0), D=D0, Delta=np.zeros_like(D0),
        basis=B0, dual_basis=Qt0, scaled_basis=B0, scaled_dual=Qt0,
        weight=w, projector_defect=defect0, projector_trace=trace0,
        gram_cond=cond0, isolated=isolated0, cluster_eigs=cluster0)
    return CriticalBlock(omega=omega, radii=radii, points=points, zero=zero,
                         nu=nu, contour_radius=rho_c,
                         contour_nodes=contour_nodes)


def ray_fan(profile: WaveProfile, family: WaveFamily | None = None,
            nrays: int = 16, nradii: int = 8, xi_max: float = 0.5,
            radii=None, contour_nodes: int = 48,
            dual_completion=None) -> RayFan:
    """Critical blocks along offset ray angles covering the half plane.

    Angles (k + 1/2) pi / nrays avoid the coordinate axes, where a packaged
    model can be structurally silent; conjugation symmetry supplies the
    opposite half plane.  Rays that lose the cluster are recorded, not
    raised.
    """
    if family is None:
        family = wave_family(profile)
    if radii is None:
        radii = np.geomspace(xi_max / 20.0, xi_max, nradii)
    blocks, aborted = [], []
    for j in range(nrays):
        ang = (j + 0.5) * np.pi / nrays
        omega = (float(np.cos(ang)), float(np.sin(ang)))
        try:
            blocks.append(critical_block_along_ray(
                profile, family, omega, radii, contour_nodes=contour_nodes,
                dual_completion=dual_completion))
        except GramBreakdown as exc:
            aborted.append((omega, str(exc)))
    return RayFan(blocks=blocks, aborted=aborted)


def pairing_families(block: CriticalBlock):
    """Cross pairings between each point and the zero point, both orders.

    Returns (radii, direct, mirror): direct[i] pairs the corrected dual
    rows at radius radii[i] with the zero translation columns, mirror[i]
    pairs the zero dual rows with the translation columns at radii[i].
    Both families must vanish quadratically in the radius.
    """
    w = block.zero.weight
    Q0 = block.zero.basis
    Qt0 = block.zero.dual_basis
    radii = np.array([pt.radius for pt in block.points])
    direct = np.stack([w * (pt.dual_basis[:, 2:].T @ Q0[:, :2])
                       for pt in block.points])
    mirror = np.stack([w * (Qt0[:, 2:].T @ pt.basis[:, :2])
                       for pt in block.points])
    return radii, direct, mirror


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x, ignoring zero entries."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    good = (x > 0) & (y > 0)
    lx, ly = np.log(x[good]), np.log(y[good])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    sol, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(sol[0])


def _log_expm_norm(M: npt.NDArray, t: float) -> float:
    """log of the 2-norm of exp(t M), stable for large t via squaring."""
    if t == 0.0:
        return 0.0
    nrm = float(np.linalg.norm(M, 2))
    if nrm == 0.0:
        return 0.0
    if t * nrm <= 30.0:
        return float(np.log(max(np.linalg.norm(sla.expm(t * M), 2), 1e-300)))
    k = max(int(np.ceil(np.log2(t * nrm / 8.0))), 1)
    E = sla.expm((t / 2.0 ** k) * M)
    s = float(np.linalg.norm(E, 2))
    ell = np.log(max(s, 1e-300))
    E = E / s
    for _ in range(k):
        E = E @ E
        s = float(np.linalg.norm(E, 2))
        if s == 0.0:
            return -np.inf
        ell = 2.0 * ell + np.log(s)
        E = E / s
    return float(ell)


def _decay_envelope(pts, rho, t_grid, theta_grid, shift, C_max, growth_tol,
                    scaled):
    """Largest grid rate theta with a certified bounded envelope.

    A rate is certified when every block's spectral abscissa beats
    theta * rho^2 (eventual decay) and the lattice envelope s =
    log |exp(t M)| + shift + theta t rho^2 neither exceeds log C_max nor
    keeps growing across its observation window t <= 10 / (theta rho^2)
    (transient captured).  Returns (theta, C, witness).
    """
    mats = [pt.Delta if scaled else pt.D for pt in pts]
    logn = np.array([[_log_expm_norm(M, t) for t in t_grid] for M in mats])
    absc = np.array([float(np.max(np.linalg.eigvals(M).real)) for M in mats])
    cap = float(np.min(-absc / rho ** 2))
    best = None
    best_C = None
    for theta in theta_grid:
        if theta > cap:
            break
        s = logn + shift[:, None] + theta * (rho ** 2)[:, None] * t_grid[None, :]
        window = 10.0 / (theta * rho ** 2)
        mask = t_grid[None, :] <= window[:, None] * (1.0 + 1e-12)
        smax = float(np.max(np.where(mask, s, -np.inf)))
        if smax > np.log(C_max):
            continue
        headmask = mask & (t_grid[None, :] <= 0.5 * window[:, None])
        tailmask = mask & ~headmask
        head = np.max(np.where(headmask, s, -np.inf), axis=1)
        tail = np.max(np.where(tailmask, s, -np.inf), axis=1)
        if float(np.max(tail - np.maximum(head, -1e300))) > growth_tol:
            continue
        best = float(theta)
        best_C = max(float(np.exp(min(smax, 700.0))), 1.0)
    if best is not None:
        return best, best_C, None
    theta0 = theta_grid[0]
    s = logn + shift[:, None] + theta0 * (rho ** 2)[:, None] * t_grid[None, :]
    window = 10.0 / (theta0 * rho ** 2)
    mask = t_grid[None, :] <= window[:, None] * (1.0 + 1e-12)
    i, j = np.unravel_index(np.argmax(np.where(mask, s, -np.inf)), s.shape)
    return None, None, (pts[i].xi, float(t_grid[j]))


def _isolation_radius(blocks) -> float:
    """Largest sampled radius below which every ray stays isolated."""
    status = {}
    for block in blocks:
        for pt in block.points:
            if pt.radius > 0.0:
                status.setdefault(pt.radius, True)
                status[pt.radius] = status[pt.radius] and pt.isolated
    xi0 = 0.0
    for rad in sorted(status):
        if not status[rad]:
            break
        xi0 = rad
    return xi0


def check_D3(fan: RayFan, t_grid=None, theta_grid=None, *,
             C_max: float = 100.0, growth_tol: float = 0.1
             ) -> StabilityVerdict:
    """Uniform diffusive decay of the scaled slow block over the fan.

    Certifies |exp(t Delta)| <= C exp(-theta t rho^2) on the sampled
    blocks and, through theta_prime and C_prime, the companion bound
    |exp(t D)| <= (C' / rho) exp(-theta' t rho^2) for the unscaled block.
    """
    pts = [pt for block in fan.blocks for pt in block.points
           if pt.radius > 0.0]
    if not pts:
        raise ValueError("ray fan holds no nonzero-radius points")
    rho = np.array([pt.radius for pt in pts])
    if theta_grid is None:
        theta_grid = np.geomspace(1e-5, 2.0, 256)
    theta_grid = np.sort(np.asarray(theta_grid, dtype=float))
    if t_grid is None:
        t_top = 10.0 / (theta_grid[0] * float(np.min(rho)) ** 2)
        t_grid = np.geomspace(1e-2, t_top, 160)
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    theta, C, witness = _decay_envelope(
        pts, rho, t_grid, theta_grid, np.zeros(len(pts)), C_max, growth_tol,
        scaled=True)
    theta_p, C_p, _ = _decay_envelope(
        pts, rho, t_grid, theta_grid, np.log(rho), C_max, growth_tol,
        scaled=False)
    xi0 = _isolation_radius(fan.blocks)
    d3 = D3Report(passes=theta is not None, theta=theta, C=C, xi0=xi0,
                  witness=witness)
    meta = {"rays": len(fan.blocks), "points": len(pts),
            "aborted": len(fan.aborted),
            "theta_grid": [float(theta_grid[0]), float(theta_grid[-1]),
                           int(theta_grid.size)],
            "t_grid": [float(t_grid[0]), float(t_grid[-1]),
                       int(t_grid.size)]}
    return StabilityVerdict(d1=None, d2=None, d3=d3, theta_prime=theta_p,
                            C_prime=C_p, xi0=xi0, meta=meta)


def assess_stability(profile: WaveProfile, family: WaveFamily | None = None,
                     *, grid: int = 8, k: int = 8,
                     cluster_radius: float = 1e-6, nrays: int = 16,
                     nradii: int = 8, xi_max: float = 0.5,
                     contour_nodes: int = 48, dual_completion=None,
                     theta_grid=None, t_grid=None, C_max: float = 100.0
                     ) -> StabilityVerdict:
    """Run the sweep gate and, if it passes, the ray-fan decay check."""
    sweep = eigen_sweep(profile, floquet_grid(grid), k=k)
    gate = check_D1_D2(sweep, cluster_radius=cluster_radius)
    meta = {"model": profile.system.name, "m": profile.spec.m, "grid": grid,
            "k": k, "nrays": nrays, "nradii": nradii, "xi_max": xi_max}
    if not (gate.d1.passes and gate.d2.passes):
        meta["gated"] = "d1" if not gate.d1.passes else "d2"
        return StabilityVerdict(d1=gate.d1, d2=gate.d2, d3=None, meta=meta)
    if family is None:
        family = wave_family(profile)
    fan = ray_fan(profile, family, nrays=nrays, nradii=nradii, xi_max=xi_max,
                  contour_nodes=contour_nodes, dual_completion=dual_completion)
    decay = check_D3(fan, t_grid=t_grid, theta_grid=theta_grid, C_max=C_max)
    meta.update(decay.meta)
    return StabilityVerdict(d1=gate.d1, d2=gate.d2, d3=decay.d3,
                            theta_prime=decay.theta_prime,
                            C_prime=decay.C_prime, xi0=decay.xi0, meta=meta)
