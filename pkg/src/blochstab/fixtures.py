"""Packaged example systems with closed-form reference waves.

Each fixture bundles a polynomial system, a wavevector matrix, a frame
speed, conserved-component means, and a closed-form profile that solves
the co-moving profile equation exactly at those means.  The rotating-roll
fixtures are built from lambda-omega reaction blocks, whose plane-wave
solutions and speeds are elementary; the constant fixtures exercise the
degenerate corners of the solver (undetermined speeds, trivial kernels).

Fixtures are also shipped as JSON model files so the command line can load
them by path; ``write_model_files`` regenerates those files from code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .fields import GridFn, GridSpec, make_grid
from .system import Poly, SystemDef

__all__ = [
    "ModelFixture",
    "crossroll",
    "conserved_crossroll",
    "balanced_crossroll",
    "BALANCED_BUILD",
    "scalar_heat",
    "constant_drift",
    "constant_unstable",
    "FIXTURE_BUILDERS",
    "load_fixture",
    "packaged_model_path",
    "write_model_files",
]


@dataclass
class ModelFixture:
    """A system plus the data needed to reproduce its reference wave."""

    name: str
    system: SystemDef
    wavevectors: np.ndarray
    speed: np.ndarray
    masses: np.ndarray
    params: dict[str, float]
    _reference: Callable[[GridSpec], np.ndarray] = field(repr=False, default=None)

    def grid(self, m: int) -> GridSpec:
        return make_grid(m, self.wavevectors)

    def reference_profile(self, m: int) -> GridFn:
        """Closed-form solution of the profile equation at the packaged means."""
        spec = self.grid(m)
        return GridFn(spec, self._reference(spec))

    def to_json(self) -> dict:
        return self.system.to_json() | {
            "name": self.name,
            "fixture": {
                "builder": self.name,
                "wavevectors": np.asarray(self.wavevectors).tolist(),
                "speed": np.asarray(self.speed).tolist(),
                "masses": np.asarray(self.masses).tolist(),
                "params": self.params,
            },
        }


def _mono(n: int, *pairs) -> tuple[int, ...]:
    e = [0] * n
    for k, p in pairs:
        e[k] += p
    return tuple(e)


def _lambda_omega_terms(n: int, i: int, j: int, gain: float, twist: float):
    """Term lists a*w - |w|^2 w rotated by the twist, in components i, j."""
    fi = [(gain, _mono(n, (i, 1))), (-1.0, _mono(n, (i, 3))),
          (-1.0, _mono(n, (i, 1), (j, 2))), (-twist, _mono(n, (j, 1)))]
    fj = [(gain, _mono(n, (j, 1))), (-1.0, _mono(n, (j, 3))),
          (-1.0, _mono(n, (i, 2), (j, 1))), (twist, _mono(n, (i, 1)))]
    return fi, fj


def _zeros(n: int, shape) -> np.ndarray:
    out = np.empty(shape, dtype=object)
    out[...] = Poly(n)
    return out.copy()


def crossroll(gain_one: float = 25.0, gain_two: float = 27.0,
              twist_one: float = 0.3, twist_two: float = -0.2,
              wavenumber: float = 0.4) -> ModelFixture:
    """Two decoupled rotating rolls along orthogonal directions.

    Components (w1, w2) carry a roll in the first coordinate and (w3, w4)
    one in the second; the twists force a nonzero frame speed in each
    direction.  No conservation laws, no fluxes.  Both rolls sit inside
    the sideband-stable range of their amplitude equation.
    """
    n = 4
    kappa = 2.0 * np.pi * wavenumber
    amp_one = np.sqrt(gain_one - kappa**2)
    amp_two = np.sqrt(gain_two - kappa**2)
    flux = _zeros(n, (2, n))
    f1, f2 = _lambda_omega_terms(n, 0, 1, gain_one, twist_one)
    f3, f4 = _lambda_omega_terms(n, 2, 3, gain_two, twist_two)
    reaction = np.array([Poly.from_terms(n, t) for t in (f1, f2, f3, f4)],
                        dtype=object)
    system = SystemDef(n, 0, flux, reaction, name="crossroll")

    def reference(spec: GridSpec) -> np.ndarray:
        y1, y2 = spec.nodes()
        t1, t2 = 2.0 * np.pi * y1, 2.0 * np.pi * y2
        return np.stack([amp_one * np.cos(t1), amp_one * np.sin(t1),
                         amp_two * np.cos(t2), amp_two * np.sin(t2)])

    return ModelFixture(
        name="crossroll",
        system=system,
        wavevectors=np.diag([wavenumber, wavenumber]),
        speed=np.array([-twist_one / kappa, -twist_two / kappa]),
        masses=np.zeros(0),
        params={"gain_one": gain_one, "gain_two": gain_two,
                "twist_one": twist_one, "twist_two": twist_two,
                "wavenumber": wavenumber},
        _reference=reference,
    )


def conserved_crossroll(gain_one: float = 25.0, gain_two: float = 27.0,
                        twist_one: float = 0.3, twist_two: float = -0.2,
                        wavenumber: float = 0.4,
                        mass_twist_one: float = 0.5, mass_twist_two: float = -0.4,
                        coupling_one: float = -0.05, coupling_two: float = 0.04) -> ModelFixture:
    """A conserved species riding on two orthogonal rotating rolls.

    Component u is conserved; components (w1, w2) and (w3, w4) carry the
    rolls of the plain crossroll.  The u flux measures the excess roll
    intensity, coupling_a (|pair|^2 - amp^2) in direction a, so it
    vanishes identically on the exact wave and u stays constant there.
    Each twist depends linearly on u, so the conserved mean tilts the
    rotation rates and the family speed responds in closed form,
    dc_a/dM = -mass_twist_a / kappa.

    The intensity flux feeds u only through the damped amplitude
    quadratures (a roll is pointwise orthogonal to its own phase mode),
    so the mass-to-phase feedback loop closes at second order in the
    Floquet frequency.  Choosing each coupling opposite in sign to the
    matching mass twist makes that loop dissipative: mass and phase lock
    into decaying oscillatory pairs whose rate is the mean of the two
    branch diffusions, and every nonzero Floquet eigenvalue stays
    strictly stable.
    """
    n = 5
    kappa = 2.0 * np.pi * wavenumber
    amp_one = np.sqrt(gain_one - kappa**2)
    amp_two = np.sqrt(gain_two - kappa**2)
    flux = _zeros(n, (2, n))
    flux[0, 0] = Poly.from_terms(
        n, [(coupling_one, _mono(n, (1, 2))), (coupling_one, _mono(n, (2, 2))),
            (-coupling_one * amp_one**2, _mono(n))])
    flux[1, 0] = Poly.from_terms(
        n, [(coupling_two, _mono(n, (3, 2))), (coupling_two, _mono(n, (4, 2))),
            (-coupling_two * amp_two**2, _mono(n))])
    f1, f2 = _lambda_omega_terms(n, 1, 2, gain_one, twist_one)
    f3, f4 = _lambda_omega_terms(n, 3, 4, gain_two, twist_two)
    f1.append((-mass_twist_one, _mono(n, (0, 1), (2, 1))))
    f2.append((mass_twist_one, _mono(n, (0, 1), (1, 1))))
    f3.append((-mass_twist_two, _mono(n, (0, 1), (4, 1))))
    f4.append((mass_twist_two, _mono(n, (0, 1), (3, 1))))
    reaction = _zeros(n, (n,))
    reaction[1:] = [Poly.from_terms(n, t) for t in (f1, f2, f3, f4)]
    system = SystemDef(n, 1, flux, reaction, name="conserved_crossroll")

    def reference(spec: GridSpec) -> np.ndarray:
        y1, y2 = spec.nodes()
        t1, t2 = 2.0 * np.pi * y1, 2.0 * np.pi * y2
        zero = np.zeros_like(t1)
        return np.stack([zero, amp_one * np.cos(t1), amp_one * np.sin(t1),
                         amp_two * np.cos(t2), amp_two * np.sin(t2)])

    return ModelFixture(
        name="conserved_crossroll",
        system=system,
        wavevectors=np.diag([wavenumber, wavenumber]),
        speed=np.array([-twist_one / kappa, -twist_two / kappa]),
        masses=np.zeros(1),
        params={"gain_one": gain_one, "gain_two": gain_two,
                "twist_one": twist_one, "twist_two": twist_two,
                "wavenumber": wavenumber,
                "mass_twist_one": mass_twist_one,
                "mass_twist_two": mass_twist_two,
                "coupling_one": coupling_one, "coupling_two": coupling_two},
        _reference=reference,
    )


def balanced_crossroll(**overrides) -> ModelFixture:
    """The conserved crossroll tuned for clean algebraic-decay windows.

    Two rules fix the parameters.  First, every slow-branch curvature
    scales with the square of the roll wavenumber, and 0.34 places the
    whole curvature band near 0.11: on a 64-cell cover the diffusive
    decay of the critical part is established by t = 10 and still far
    from rounding saturation at t = 200, so power-law fits on that window
    see a single clean regime.  Second, the mass twists and couplings are
    strong enough that the beat between the mass and phase branches
    completes well before t = 10; the oscillatory exchange between
    branches then averages out inside the fit window instead of rippling
    through the fitted slopes.  The large gains keep the amplitude modes
    fast, which holds the critical cluster isolated under the tightened
    projection contour that the smaller curvatures require.
    """
    params = dict(
        gain_one=150.0, gain_two=160.0, twist_one=0.3, twist_two=-0.2,
        wavenumber=0.34, mass_twist_one=1.58, mass_twist_two=-1.26,
        coupling_one=-0.176, coupling_two=0.141,
    )
    params.update(overrides)
    fx = conserved_crossroll(**params)
    return ModelFixture(
        name="balanced_crossroll",
        system=fx.system,
        wavevectors=fx.wavevectors,
        speed=fx.speed,
        masses=fx.masses,
        params=params,
        _reference=fx._reference,
    )


# bundle settings matched to balanced_crossroll: the profile grid, the
# cutoff radius, and the tightened contour that keeps the neighboring
# harmonic branches outside the critical cluster
BALANCED_BUILD = {"grid_m": 6, "ncells": 64, "xi0": 2.0, "contour_radius": 1.6}


def scalar_heat(level: float = 0.3) -> ModelFixture:
    """Pure diffusion of one scalar; the profile is a constant rest state."""
    system = SystemDef(1, 0, _zeros(1, (2, 1)), _zeros(1, (1,)),
                       name="scalar_heat")

    def reference(spec: GridSpec) -> np.ndarray:
        return np.full((1, spec.m, spec.m), level)

    return ModelFixture(
        name="scalar_heat",
        system=system,
        wavevectors=np.eye(2),
        speed=np.zeros(2),
        masses=np.zeros(0),
        params={"level": level},
        _reference=reference,
    )


def constant_drift(mass: float = 0.4) -> ModelFixture:
    """Constant state of a conserved component coupled to a relaxing one.

    The fluxes are linear, so the linearization about the constant state
    has an explicit per-mode symbol; the reaction pins w2 = w1 at rest.
    """
    n = 2
    flux = _zeros(n, (2, n))
    flux[0, 0] = Poly.from_terms(n, [(0.3, _mono(n, (1, 1)))])
    flux[1, 0] = Poly.from_terms(n, [(0.2, _mono(n, (0, 1)))])
    flux[0, 1] = Poly.from_terms(n, [(0.1, _mono(n, (0, 1)))])
    reaction = _zeros(n, (n,))
    reaction[1] = Poly.from_terms(n, [(1.0, _mono(n, (0, 1))), (-1.0, _mono(n, (1, 1)))])
    system = SystemDef(n, 1, flux, reaction, name="constant_drift")

    def reference(spec: GridSpec) -> np.ndarray:
        return np.full((n, spec.m, spec.m), mass)

    return ModelFixture(
        name="constant_drift",
        system=system,
        wavevectors=np.eye(2),
        speed=np.zeros(2),
        masses=np.array([mass]),
        params={"mass": mass},
        _reference=reference,
    )


def constant_unstable() -> ModelFixture:
    """Bistable scalar at its unstable rest state; fails every check."""
    reaction = np.array([Poly.from_terms(1, [(1.0, (1,)), (-1.0, (3,))])],
                        dtype=object)
    system = SystemDef(1, 0, _zeros(1, (2, 1)), reaction,
                       name="constant_unstable")

    def reference(spec: GridSpec) -> np.ndarray:
        return np.zeros((1, spec.m, spec.m))

    return ModelFixture(
        name="constant_unstable",
        system=system,
        wavevectors=np.eye(2),
        speed=np.zeros(2),
        masses=np.zeros(0),
        params={},
        _reference=reference,
    )


FIXTURE_BUILDERS: dict[str, Callable[..., ModelFixture]] = {
    "crossroll": crossroll,
    "conserved_crossroll": conserved_crossroll,
    "balanced_crossroll": balanced_crossroll,
    "scalar_heat": scalar_heat,
    "constant_drift": constant_drift,
    "constant_unstable": constant_unstable,
}


def packaged_model_path(name: str):
    return resources.files("blochstab").joinpath("models", f"{name}.json")


def load_fixture(source) -> ModelFixture:
    """Rebuild a fixture from a registry name or a shipped model file."""
    if isinstance(source, str) and source in FIXTURE_BUILDERS:
        return FIXTURE_BUILDERS[source]()
    data = json.loads(Path(source).read_text())
    meta = data.get("fixture")
    if meta is None or meta.get("builder") not in FIXTURE_BUILDERS:
        raise ValueError(f"{source} does not describe a packaged fixture")
    fixture = FIXTURE_BUILDERS[meta["builder"]](**meta.get("params", {}))
    if fixture.to_json() != data:
        raise ValueError(f"{source} disagrees with builder {meta['builder']!r}")
    return fixture


def write_model_files(directory=None) -> list[Path]:
    """Regenerate the shipped model JSON files from the builders."""
    if directory is None:
        directory = Path(__file__).parent / "models"
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, builder in FIXTURE_BUILDERS.items():
        path = directory / f"{name}.json"
        path.write_text(json.dumps(builder().to_json(), indent=1) + "\n")
        written.append(path)
    return written
