"""Polynomial reaction-diffusion-flux systems with conservation laws.

A system W_t = Lap W + Div G(W) + f(W) is described by the state dimension
n, the number r of conserved components (the first r entries of f vanish
identically), a 2 x n array of flux polynomials G and n reaction
polynomials f.  Polynomials are stored as explicit term lists so first and
second derivatives are generated exactly, without numerical or automatic
differentiation.

JSON layout: {"n": int, "r": int, "G": [[poly, ...], [poly, ...]],
"f": [poly, ...]} where poly is a list of {"c": float, "e": [int; n]}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Poly", "SystemDef", "load_system", "dump_system"]


@dataclass(frozen=True)
class Poly:
    """Multivariate polynomial as a tuple of (coefficient, exponents) terms."""

    nvars: int
    terms: tuple[tuple[float, tuple[int, ...]], ...] = ()

    @staticmethod
    def from_terms(nvars: int, terms) -> "Poly":
        merged: dict[tuple[int, ...], float] = {}
        for c, e in terms:
            e = tuple(int(x) for x in e)
            if len(e) != nvars:
                raise ValueError(f"exponent tuple {e} does not match nvars={nvars}")
            if any(x < 0 for x in e):
                raise ValueError(f"negative exponent in {e}")
            merged[e] = merged.get(e, 0.0) + float(c)
        kept = tuple(sorted((c, e) for e, c in merged.items() if c != 0.0))
        return Poly(nvars, kept)

    def __call__(self, W):
        """Evaluate on stacked component arrays W[k, ...]."""
        W = np.asarray(W)
        out = np.zeros(W.shape[1:], dtype=W.dtype)
        for c, e in self.terms:
            term = np.full(W.shape[1:], c, dtype=W.dtype)
            for k, ek in enumerate(e):
                if ek:
                    term = term * W[k] ** ek
            out += term
        return out

    def diff(self, k: int) -> "Poly":
        terms = []
        for c, e in self.terms:
            if e[k]:
                e2 = list(e)
                e2[k] -= 1
                terms.append((c * e[k], tuple(e2)))
        return Poly.from_terms(self.nvars, terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        return max((sum(e) for _, e in self.terms), default=0)

    def to_json(self):
        return [{"c": c, "e": list(e)} for c, e in self.terms]

    @staticmethod
    def from_json(nvars: int, data) -> "Poly":
        return Poly.from_terms(nvars, [(t["c"], tuple(t["e"])) for t in data])


def _poly_array(polys):
    return np.array(polys, dtype=object)


@dataclass
class SystemDef:
    """State dimension, conservation count, flux and reaction polynomials."""

    n: int
    r: int
    flux: np.ndarray      # (2, n) array of Poly
    reaction: np.ndarray  # (n,) array of Poly
    name: str = "system"
    dflux: np.ndarray = field(init=False, repr=False)      # (2, n, n)
    dreaction: np.ndarray = field(init=False, repr=False)  # (n, n)

    def __post_init__(self):
        if not 0 <= self.r <= self.n:
            raise ValueError(f"need 0 <= r <= n, got r={self.r}, n={self.n}")
        self.flux = _poly_array(self.flux).reshape(2, self.n)
        self.reaction = _poly_array(self.reaction).reshape(self.n)
        for j in range(self.r):
            if not self.reaction[j].is_zero:
                raise ValueError(f"conserved component {j} has a nonzero reaction term")
        self.dflux = _poly_array(
            [[[self.flux[a, j].diff(k) for k in range(self.n)] for j in range(self.n)] for a in range(2)]
        ).reshape(2, self.n, self.n)
        self.dreaction = _poly_array(
            [[self.reaction[j].diff(k) for k in range((self.n))] for j in range(self.n)]
        ).reshape(self.n, self.n)

    def d2flux(self, a: int, j: int, k: int, l: int) -> Poly:
        return self.dflux[a, j, k].diff(l)

    def d2reaction(self, j: int, k: int, l: int) -> Poly:
        return self.dreaction[j, k].diff(l)

    def max_degree(self) -> int:
        degs = [p.degree() for p in self.flux.ravel()] + [p.degree() for p in self.reaction]
        return max(degs, default=0)

    def flux_values(self, W):
        """G(W): array (2, n, ...) for stacked components W[k, ...]."""
        W = np.asarray(W)
        out = np.zeros((2, self.n) + W.shape[1:], dtype=W.dtype)
        for a in range(2):
            for j in range(self.n):
                if not self.flux[a, j].is_zero:
                    out[a, j] = self.flux[a, j](W)
        return out

    def reaction_values(self, W):
        W = np.asarray(W)
        out = np.zeros((self.n,) + W.shape[1:], dtype=W.dtype)
        for j in range(self.n):
            if not self.reaction[j].is_zero:
                out[j] = self.reaction[j](W)
        return out

    def flux_jacobian(self, W):
        """DG(W): array (2, n, n, ...), entry [a, j, k] = dG_aj/dW_k."""
        W = np.asarray(W)
        out = np.zeros((2, self.n, self.n) + W.shape[1:], dtype=W.dtype)
        for a in range(2):
            for j in range(self.n):
                for k in range(self.n):
                    if not self.dflux[a, j, k].is_zero:
                        out[a, j, k] = self.dflux[a, j, k](W)
        return out

    def reaction_jacobian(self, W):
        W = np.asarray(W)
        out = np.zeros((self.n, self.n) + W.shape[1:], dtype=W.dtype)
        for j in range(self.n):
            for k in range(self.n):
                if not self.dreaction[j, k].is_zero:
                    out[j, k] = self.dreaction[j, k](W)
        return out

    def to_json(self):
        return {
            "n": self.n,
            "r": self.r,
            "G": [[self.flux[a, j].to_json() for j in range(self.n)] for a in range(2)],
            "f": [self.reaction[j].to_json() for j in range(self.n)],
        }


def load_system(source) -> SystemDef:
    """Build a SystemDef from a JSON path, JSON text, or parsed dict.

    Rejects malformed polynomials and any nonzero reaction entry among the
    first r components.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source) and Path(source).exists():
        data = json.loads(Path(source).read_text())
        name = Path(source).stem
    elif isinstance(source, (str, bytes)):
        data = json.loads(source)
        name = data.get("name", "system")
    else:
        data = source
        name = data.get("name", "system")
    n, r = int(data["n"]), int(data["r"])
    G = data.get("G") or [[[] for _ in range(n)] for _ in range(2)]
    f = data.get("f") or [[] for _ in range(n)]
    if len(G) != 2 or any(len(row) != n for row in G):
        raise ValueError("flux table G must be 2 x n")
    if len(f) != n:
        raise ValueError("reaction table f must have n entries")
    flux = [[Poly.from_json(n, G[a][j]) for j in range(n)] for a in range(2)]
    reaction = [Poly.from_json(n, f[j]) for j in range(n)]
    return SystemDef(n, r, np.array(flux, dtype=object), np.array(reaction, dtype=object), name=name)


def dump_system(sysdef: SystemDef, path) -> None:
    Path(path).write_text(json.dumps(sysdef.to_json(), indent=1))
