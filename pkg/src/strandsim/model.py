"""Species and reaction-rule model shared by the engine and the scenario IO.

Rate unit conventions follow the flux conditions of the three radiation
boundary problems: m^3/s for 3D bimolecular, m^2/s for molecule-curve
binding (the 2D reduction), m/s for on-curve bimolecular, 1/s for
unimolecular and dissociation channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TransportSpec:
    """Deterministic on-curve motion toward the curve point nearest target.

    The per-step displacement is either ``step`` (fixed length) or, when a
    ``coefficient`` is given, sqrt(2 * coefficient * dt) / divisor evaluated
    at the actual propagation step dt.
    """

    target: np.ndarray
    step: float | None = None
    coefficient: float | None = None
    divisor: float = 40.0

    def step_of(self, dt):
        if self.step is not None:
            return self.step
        return math.sqrt(2.0 * self.coefficient * dt) / self.divisor


@dataclass
class Species:
    name: str
    D_free: float = 0.0
    D_bound: float = 0.0
    radius: float = 1e-9
    transport: TransportSpec | None = None

    def validate(self, errors, where):
        if self.D_free < 0.0 or self.D_bound < 0.0:
            errors.append(f"{where}: diffusion coefficients must be >= 0")
        if self.radius <= 0.0:
            errors.append(f"{where}: radius must be > 0")
        if self.transport is not None:
            if self.transport.step is None and self.transport.coefficient is None:
                errors.append(f"{where}: transport needs step or coefficient")


@dataclass
class BindToCurve:
    reactant: str
    product: str
    k_r: float


@dataclass
class UnbindFromCurve:
    reactant: str
    product: str
    k_d: float


@dataclass
class Bimolecular3D:
    a: str
    b: str
    product: str
    k_r: float


@dataclass
class Bimolecular1D:
    a: str
    b: str
    product: str
    k_r: float


@dataclass
class Unimolecular:
    reactant: str
    products: tuple
    rate: float


@dataclass
class OperatorSite:
    """Absorbing site pinned to a curve at a fixed arclength."""

    curve_id: int
    s: float
    radius: float
    absorbs: str
    product: str


class ReactionNetwork:
    """Indexed view over a rule list."""

    def __init__(self, rules=()):
        self.rules = list(rules)
        self._bind = {}
        self._unbind = {}
        self._uni = {}
        self._bi3d = {}
        self._bi1d = {}
        for r in self.rules:
            if isinstance(r, BindToCurve):
                self._bind[r.reactant] = r
            elif isinstance(r, UnbindFromCurve):
                self._unbind[r.reactant] = r
            elif isinstance(r, Unimolecular):
                self._uni.setdefault(r.reactant, []).append(r)
            elif isinstance(r, Bimolecular3D):
                self._bi3d[frozenset((r.a, r.b))] = r
            elif isinstance(r, Bimolecular1D):
                self._bi1d[frozenset((r.a, r.b))] = r
            else:
                raise TypeError(f"unknown rule type {type(r).__name__}")

    def bind_for(self, species):
        return self._bind.get(species)

    def unbind_for(self, species):
        return self._unbind.get(species)

    def uni_for(self, species):
        return self._uni.get(species, ())

    def bi3d_for(self, a, b):
        return self._bi3d.get(frozenset((a, b)))

    def bi1d_for(self, a, b):
        return self._bi1d.get(frozenset((a, b)))

    @property
    def has_bi3d(self):
        return bool(self._bi3d)

    def validate(self, species_names, errors):
        for r in self.rules:
            names = []
            if isinstance(r, (BindToCurve, UnbindFromCurve)):
                names = [r.reactant, r.product]
                rate = r.k_r if isinstance(r, BindToCurve) else r.k_d
            elif isinstance(r, Unimolecular):
                names = [r.reactant, *r.products]
                rate = r.rate
            else:
                names = [r.a, r.b, r.product]
                rate = r.k_r
            for n in names:
                if n not in species_names:
                    errors.append(f"reaction {r}: unknown species {n!r}")
            if rate < 0.0:
                errors.append(f"reaction {r}: negative rate")
