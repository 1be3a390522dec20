"""Field-Noyes model data: parameters, nonlinearity, initial data catalog.

The three-species system is split as du/dt = A u + f(u) with
A_i = a_i*Laplacian - b_i*I under Neumann conditions, where the linear shifts
are b_1 = 1/lambda, b_2 = 1, b_3 = rho/delta.  The shift moved into A_1 is
compensated inside f, hence the +2*u1 term of its first component.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import BlowUpError, ConfigurationError, FnrdError


@dataclass(frozen=True)
class ModelParams:
    """Diffusion and reaction constants (all strictly positive)."""

    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    lam: float = 0.1
    delta: float = 0.1
    rho: float = 0.25
    c: float = 1.0

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "lam", "delta", "rho", "c"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"parameter {name} must be positive")

    @property
    def b1(self) -> float:
        return 1.0 / self.lam

    @property
    def b2(self) -> float:
        return 1.0

    @property
    def b3(self) -> float:
        return self.rho / self.delta

    def diffusion(self, i: int) -> float:
        return (self.a1, self.a2, self.a3)[i - 1]

    def shift(self, i: int) -> float:
        return (self.b1, self.b2, self.b3)[i - 1]

    def as_dict(self) -> dict:
        return {n: getattr(self, n)
                for n in ("a1", "a2", "a3", "lam", "delta", "rho", "c")}


def eval_f(params: ModelParams, u1, u2, u3):
    """Pointwise nonlinearity (shift-compensated), vectorized over arrays.

    Returns the triple
        ( (rho*u3 - u1*u3 + 2*u1 - u1^2)/lambda, u1, (c*u2 - u1*u3)/delta ).
    """
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    u3 = np.asarray(u3, dtype=np.float64)
    if not (np.isfinite(u1).all() and np.isfinite(u2).all()
            and np.isfinite(u3).all()):
        raise BlowUpError("non-finite input to the nonlinearity")
    f1 = (params.rho * u3 - u1 * u3 + 2.0 * u1 - u1 * u1) / params.lam
    f2 = u1.copy()
    f3 = (params.c * u2 - u1 * u3) / params.delta
    return f1, f2, f3


# -- initial data -----------------------------------------------------------

def _datum_i(x1, x2):
    return 0.5 * np.sign(x2 - 0.5) + 0.5


def _datum_ii(x1, x2):
    r2 = x1 * x1 + x2 * x2
    return r2 ** (-0.125) - 0.8


def _datum_iii(x1, x2):
    return np.sqrt(x1) * x2


def _datum_iv(x1, x2):
    return np.abs(x2 - x1)


def _datum_smooth(x1, x2):
    # Neumann-compatible smooth field for smoke tests and saturation checks
    return np.cos(np.pi * x1) * np.cos(np.pi * x2) + 1.0


@dataclass(frozen=True)
class InitialDatum:
    """A scalar initial field used for all three species.

    gamma is the nominal fractional Sobolev regularity (None if unknown);
    singular_points lists locations where the field is unbounded and the
    projection quadrature must refine.
    """

    id: str
    field: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gamma: Optional[float] = None
    singular_points: tuple = ()


_CATALOG = {
    "i": InitialDatum("i", _datum_i, gamma=0.5),
    "ii": InitialDatum("ii", _datum_ii, gamma=0.75,
                       singular_points=((0.0, 0.0),)),
    "iii": InitialDatum("iii", _datum_iii, gamma=1.0),
    "iv": InitialDatum("iv", _datum_iv, gamma=1.5),
    "smooth": InitialDatum("smooth", _datum_smooth),
}

DATUM_IDS = ("i", "ii", "iii", "iv")


def get_datum(id: str) -> InitialDatum:
    """Look up a catalog datum, a constant field `const:<v>`, or a nodal file.

    A path to a .npy or whitespace text file yields a datum whose field is
    undefined (nodal values are used directly by the caller); its gamma is
    unknown.
    """
    if id in _CATALOG:
        return _CATALOG[id]
    if id.startswith("const:"):
        try:
            value = float(id.split(":", 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad constant datum {id!r}")
        return InitialDatum(id, lambda x1, x2, v=value: np.full_like(
            np.asarray(x1, dtype=float), v), gamma=None)
    p = Path(id)
    if p.suffix in (".npy", ".txt") and p.exists():
        vals = np.load(p) if p.suffix == ".npy" else np.loadtxt(p)
        datum = InitialDatum(id, None, gamma=None)
        object.__setattr__(datum, "nodal_values", np.asarray(vals, float))
        return datum
    raise ConfigurationError(f"unknown datum {id!r}")


def initial_datum(id: str, x) -> float:
    """Evaluate a catalog datum at a single point x in the closed unit square."""
    datum = get_datum(id)
    if datum.field is None:
        raise ConfigurationError(f"datum {id!r} has no pointwise field")
    x = tuple(float(c) for c in x)
    for sp in datum.singular_points:
        if all(abs(c - s) == 0.0 for c, s in zip(x, sp)):
            raise FnrdError(
                f"datum {id!r} is singular at {sp}; cannot evaluate there")
    return float(datum.field(x[0], x[1]))


@dataclass(frozen=True)
class RateRecord:
    """Theoretical convergence orders for one datum (epsilon -> 0 limits)."""

    gamma: float
    spatial_L2: float
    spatial_H1: float
    temporal: float
    first_step_L2: float
    first_step_H1: float


def expected_orders(id: str) -> RateRecord:
    """Theoretical orders as functions of the datum's nominal regularity."""
    datum = get_datum(id)
    if datum.gamma is None:
        raise ConfigurationError(
            f"datum {id!r} has no nominal regularity; orders are undefined")
    g = datum.gamma
    temporal = min(1.0 + g, 2.0)
    fs_l2 = max(-1.0, g - 2.0) / 2.0 + temporal
    return RateRecord(gamma=g, spatial_L2=2.0, spatial_H1=1.0,
                      temporal=temporal, first_step_L2=fs_l2,
                      first_step_H1=fs_l2 - 0.5)
