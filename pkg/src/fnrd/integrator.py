"""Two-stage exponential Runge-Kutta time stepping in modal space.

Each step applies, per species,

    inner stage   u_hat = E u_n + dt * phi1(dt A) F_n,         F_n = P_h f(u_n)
    update        u_new = E u_n + dt * [(phi1 - phi2)(dt A) F_n
                                         + phi2(dt A) F_hat],  F_hat = P_h f(u_hat)

with E = exp(dt A).  All operator actions are elementwise multipliers in the
modal basis; the projections enter through their load vectors only, since
to-modal(M^{-1} b) = Phi^T b, so no mass solves occur inside the loop.  The
multiplier vectors (exp, phi1, phi2 per distinct (a_i, b_i) pair) are cached
per (spectrum, dt).  A trajectory costs four dense GEMMs per step;
independent trajectories sharing the context and step size can be advanced
together (`integrate_many`), which widens the GEMMs instead of repeating
them.
"""

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import assembly, spectral
from .errors import BlowUpError, ConfigurationError
from .mesh import Mesh
from .model import ModelParams

DEFAULT_T_MAX = 100.0


@dataclass
class State:
    """Trajectory state: time stamp plus per-species P1 coefficients (n, 3)."""

    t: float
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape[1] != 3:
            raise ConfigurationError("state array must have shape (n, 3)")

    @classmethod
    def from_species(cls, t, u1, u2, u3) -> "State":
        return cls(t=t, u=np.stack([np.asarray(u1, dtype=np.float64),
                                    np.asarray(u2, dtype=np.float64),
                                    np.asarray(u3, dtype=np.float64)], axis=1))

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def u1(self) -> np.ndarray:
        return self.u[:, 0]

    @property
    def u2(self) -> np.ndarray:
        return self.u[:, 1]

    @property
    def u3(self) -> np.ndarray:
        return self.u[:, 2]

    def copy(self) -> "State":
        return State(t=self.t, u=self.u.copy())


@dataclass
class Context:
    """Shared read-only data for advancing trajectories on one mesh."""

    mesh: Mesh
    params: ModelParams
    M: assembly.SymSparseMatrix
    K: assembly.SymSparseMatrix
    spectrum: spectral.PencilSpectrum
    t_max: float = DEFAULT_T_MAX
    _multipliers: dict = field(default_factory=dict, repr=False)

    @property
    def species(self):
        return tuple(spectral.SpeciesOperator.from_params(self.params, i)
                     for i in (1, 2, 3))

    def multipliers(self, dt: float):
        """(E, phi1, phi1-phi2, phi2) multiplier stacks of shape (n, 3)."""
        key = float(dt)
        if key not in self._multipliers:
            theta = self.spectrum.theta
            cols = {}
            stacks = []
            for op in self.species:
                ab = (op.a, op.b)
                if ab not in cols:
                    z = -dt * op.mu(theta)
                    cols[ab] = (np.exp(z), spectral.phi_values(1, z),
                                spectral.phi_values(2, z))
                stacks.append(cols[ab])
            em = np.stack([s[0] for s in stacks], axis=1)
            p1 = np.stack([s[1] for s in stacks], axis=1)
            p2 = np.stack([s[2] for s in stacks], axis=1)
            self._multipliers[key] = (em, p1, p1 - p2, p2)
        return self._multipliers[key]


def build_context(mesh: Mesh, params: ModelParams = None,
                  cache_dir=None) -> Context:
    """Assemble matrices and the pencil spectrum for a mesh."""
    params = params or ModelParams()
    M = assembly.assemble_mass(mesh)
    K = assembly.assemble_stiffness(mesh)
    spectrum = spectral.get_spectrum(mesh, K, M, cache_dir=cache_dir)
    return Context(mesh=mesh, params=params, M=M, K=K, spectrum=spectrum)


Nonlinearity = Union[str, np.ndarray, Callable[[State], np.ndarray]]


def _supplied_coeffs(nonlinearity, state: State) -> np.ndarray:
    F = nonlinearity(state) if callable(nonlinearity) else nonlinearity
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = np.repeat(F[:, None], 3, axis=1)
    if F.shape != state.u.shape:
        raise ConfigurationError(
            f"supplied nonlinearity shape {F.shape} != state {state.u.shape}")
    return F


def _advance(ctx: Context, U0: np.ndarray, t0: float, dt: float,
             n_steps: int, nonlinearity: Nonlinearity,
             hooks: Optional[Mapping[int, Callable]] = None):
    """Advance a stacked batch U0 of shape (n, 3, B); invokes hook callbacks
    with (step, U, t) and returns the final (U, t)."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if n_steps < 1:
        raise ConfigurationError(f"n_steps must be >= 1, got {n_steps}")
    if dt * n_steps > ctx.t_max:
        raise ConfigurationError(
            f"dt*n_steps = {dt * n_steps} exceeds configured t_max {ctx.t_max}")
    if not np.isfinite(U0).all():
        raise BlowUpError("non-finite initial state", step=0)

    n, _, nb = U0.shape
    Phi = ctx.spectrum.Phi
    Mcsr = ctx.M.tocsr()
    em, p1, p12, p2 = (m[:, :, None] for m in ctx.multipliers(dt))
    mode = nonlinearity if isinstance(nonlinearity, str) else "supplied"
    if mode not in ("default", "zero", "supplied"):
        raise ConfigurationError(f"unknown nonlinearity mode {mode!r}")
    if mode == "supplied" and nb != 1:
        raise ConfigurationError("supplied nonlinearity supports single states")

    flat = U0.reshape(n, 3 * nb)
    c = (Phi.T @ (Mcsr @ flat)).reshape(n, 3, nb)
    U = U0
    # non-finite values are detected and raised below; keep numpy quiet while
    # they propagate through the step that produced them
    with np.errstate(over="ignore", invalid="ignore"):
        return _advance_loop(ctx, Phi, c, U, em, p1, p12, p2, mode,
                             nonlinearity, t0, dt, n_steps, hooks)


def _advance_loop(ctx, Phi, c, U, em, p1, p12, p2, mode, nonlinearity, t0,
                  dt, n_steps, hooks):
    n, _, nb = U.shape
    Mcsr = ctx.M.tocsr()
    for k in range(1, n_steps + 1):
        if mode == "zero":
            c = em * c
        else:
            if mode == "default":
                bF = assembly.nonlinearity_loads(ctx.mesh, ctx.params, U)
                cF = (Phi.T @ bF.reshape(n, 3 * nb)).reshape(n, 3, nb)
            else:
                F = _supplied_coeffs(nonlinearity, State(t0 + (k - 1) * dt,
                                                         U[:, :, 0]))
                cF = (Phi.T @ (Mcsr @ F))[:, :, None]
            chat = em * c + dt * (p1 * cF)
            Uhat = (Phi @ chat.reshape(n, 3 * nb)).reshape(n, 3, nb)
            if mode == "default":
                bG = assembly.nonlinearity_loads(ctx.mesh, ctx.params, Uhat)
                cG = (Phi.T @ bG.reshape(n, 3 * nb)).reshape(n, 3, nb)
            else:
                G = _supplied_coeffs(nonlinearity,
                                     State(t0 + k * dt, Uhat[:, :, 0]))
                cG = (Phi.T @ (Mcsr @ G))[:, :, None]
            c = em * c + dt * (p12 * cF + p2 * cG)
        U = (Phi @ c.reshape(n, 3 * nb)).reshape(n, 3, nb)
        if not np.isfinite(U).all():
            raise BlowUpError(
                f"non-finite state after step {k} (t = {t0 + k * dt})", step=k)
        if hooks and k in hooks:
            hooks[k](k, U, t0 + k * dt)
    return U, t0 + n_steps * dt


def erk2_step(ctx: Context, state: State, dt: float,
              nonlinearity: Nonlinearity = "default") -> State:
    """One exponential Runge-Kutta step (exactly two nonlinearity projections)."""
    U, t = _advance(ctx, state.u[:, :, None], state.t, dt, 1, nonlinearity)
    return State(t=t, u=U[:, :, 0])


def integrate(ctx: Context, state0: State, dt: float, n_steps: int,
              hooks: Optional[Mapping[int, Callable[[State], None]]] = None,
              nonlinearity: Nonlinearity = "default") -> State:
    """Advance one trajectory n_steps; hooks fire after their step index."""
    wrapped = None
    if hooks:
        wrapped = {k: (lambda step, U, t, cb=cb: cb(State(t=t, u=U[:, :, 0].copy())))
                   for k, cb in hooks.items()}
    U, t = _advance(ctx, state0.u[:, :, None], state0.t, dt, n_steps,
                    nonlinearity, wrapped)
    return State(t=t, u=U[:, :, 0])


def integrate_many(ctx: Context, states: Sequence[State], dt: float,
                   n_steps: int,
                   hooks: Optional[Mapping[int, Callable]] = None,
                   nonlinearity: Nonlinearity = "default") -> list:
    """Advance independent trajectories together (wider GEMMs, same results).

    All states must share the mesh and time stamp; hook callbacks receive the
    list of snapshot States.
    """
    t0 = states[0].t
    if any(s.t != t0 for s in states):
        raise ConfigurationError("batched states must share the time stamp")
    U0 = np.stack([s.u for s in states], axis=2)
    wrapped = None
    if hooks:
        def make(cb):
            return lambda step, U, t: cb(
                [State(t=t, u=U[:, :, b].copy()) for b in range(U.shape[2])])
        wrapped = {k: make(cb) for k, cb in hooks.items()}
    U, t = _advance(ctx, U0, t0, dt, n_steps, nonlinearity, wrapped)
    return [State(t=t, u=np.ascontiguousarray(U[:, :, b]))
            for b in range(U.shape[2])]
