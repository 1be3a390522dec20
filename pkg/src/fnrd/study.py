"""Convergence-study harness: reference solutions, error tables, regularity.

Three protocols are provided, each producing a ConvergenceTable:

* spatial  -- solve on coarse levels with the reference step size, prolong to
  the reference mesh, compare at the final time;
* temporal -- solve on the reference mesh with step T/N for a range of N;
* first-step -- a single step of size dt compared against the reference
  advanced to t1 = dt.

The reference solution (fine mesh, tiny fixed step) is cached on disk keyed by
a hash of the generating configuration; first-step references at intermediate
times are snapshots of the same trajectory, since a k-step prefix of a
fixed-step run equals a k-step run.
"""

import hashlib
import json
import math
import subprocess
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import assembly, spectral
from .errors import ConfigurationError, MeshMismatchError, NumericalError
from .integrator import Context, State, build_context, erk2_step, integrate, \
    integrate_many
from .mesh import build_mesh, prolong
from .model import DATUM_IDS, ModelParams, expected_orders, get_datum

FULL_REF_LEVEL = 6
FULL_REF_DT = 1.0 / 40960
QUICK_REF_LEVEL = 5
QUICK_REF_DT = 1.0 / 10240


@dataclass(frozen=True)
class StudyConfig:
    """Protocol parameters shared by the three studies."""

    datum: str = "iii"
    params: ModelParams = field(default_factory=ModelParams)
    T: float = 0.1
    ref_level: int = FULL_REF_LEVEL
    ref_dt: float = FULL_REF_DT
    spatial_levels: tuple = (2, 3, 4)
    temporal_step_counts: tuple = (32, 64, 128, 256)
    first_step_denoms: tuple = (128, 256, 512, 1024)
    nonlinearity: str = "default"
    quick: bool = False

    def __post_init__(self):
        get_datum(self.datum)
        if self.T <= 0:
            raise ConfigurationError("T must be positive")
        if not _divides(self.ref_dt, self.T):
            raise ConfigurationError("ref_dt must divide T")
        steps = self.ref_steps
        for n in self.temporal_step_counts:
            if steps % n:
                raise ConfigurationError(
                    f"temporal step count {n} must divide T/ref_dt = {steps}")
        for d in self.first_step_denoms:
            if steps % d:
                raise ConfigurationError(
                    f"first-step denominator {d} must divide T/ref_dt = {steps}")
        for lev in self.spatial_levels:
            if lev > self.ref_level:
                raise ConfigurationError(
                    f"study level {lev} exceeds reference level {self.ref_level}")

    @property
    def ref_steps(self) -> int:
        return int(round(self.T / self.ref_dt))

    def as_dict(self) -> dict:
        return {
            "datum": self.datum,
            "params": self.params.as_dict(),
            "T": self.T,
            "ref_level": self.ref_level,
            "ref_dt": self.ref_dt,
            "spatial_levels": list(self.spatial_levels),
            "temporal_step_counts": list(self.temporal_step_counts),
            "first_step_denoms": list(self.first_step_denoms),
            "nonlinearity": self.nonlinearity,
            "quick": self.quick,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        kw = dict(d)
        if "params" in kw and isinstance(kw["params"], dict):
            kw["params"] = ModelParams(**kw["params"])
        for k in ("spatial_levels", "temporal_step_counts",
                  "first_step_denoms"):
            if k in kw:
                kw[k] = tuple(kw[k])
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in kw.items() if k in known})


def default_config(datum: str = "iii", quick: bool = False,
                   **overrides) -> StudyConfig:
    """The full-protocol configuration, or the cheaper CI variant.

    Quick mode keeps the full protocol's margins against its shallower
    reference: the first-step rows shift down a factor 4 (the last default
    row would coincide with the reference step) and the finest spatial level
    stays two octaves below the reference mesh.
    """
    base = dict(datum=datum, quick=quick)
    if quick:
        base.update(ref_level=QUICK_REF_LEVEL, ref_dt=QUICK_REF_DT,
                    spatial_levels=(2, 3),
                    first_step_denoms=(32, 64, 128, 256))
    base.update(overrides)
    return StudyConfig.from_dict(base)


def _divides(small: float, big: float, tol: float = 1e-9) -> bool:
    ratio = big / small
    return abs(ratio - round(ratio)) <= tol * max(1.0, abs(ratio))


@dataclass(frozen=True)
class TableRow:
    resolution: str
    error_L2: float
    order_L2: Optional[float]
    error_H1: float
    order_H1: Optional[float]


@dataclass
class ConvergenceTable:
    rows: list
    meta: dict


def observed_order(e_coarse: float, e_fine: float) -> float:
    """log2 error ratio under a refinement factor of 2; NaN if undefined."""
    if not (e_coarse > 0 and e_fine > 0):
        return math.nan
    return math.log2(e_coarse / e_fine)


def _build_table(labels, errs_l2, errs_h1, meta) -> ConvergenceTable:
    rows = []
    for i, lab in enumerate(labels):
        o0 = observed_order(errs_l2[i - 1], errs_l2[i]) if i else None
        o1 = observed_order(errs_h1[i - 1], errs_h1[i]) if i else None
        rows.append(TableRow(lab, errs_l2[i], o0, errs_h1[i], o1))
    finite = [i for i, e in enumerate(errs_l2) if math.isfinite(e)]
    for name, errs in (("L2", errs_l2), ("H1", errs_h1)):
        vals = [errs[i] for i in finite]
        if any(vals[i + 1] >= vals[i] for i in range(len(vals) - 1)):
            meta["monotone_" + name] = False
            warnings.warn(
                f"{name} errors are not strictly decreasing; the reference "
                "may be contaminated")
        else:
            meta["monotone_" + name] = True
    return ConvergenceTable(rows=rows, meta=meta)


def _run_rows(labels, row_fn, meta):
    """Evaluate (error_L2, error_H1) per row; a numerical failure marks the
    row failed (NaN) and the remaining rows still run."""
    e0s, e1s = [], []
    for label, work in zip(labels, row_fn):
        try:
            e0, e1 = work()
        except NumericalError as exc:
            warnings.warn(f"row {label} failed: {exc}")
            meta.setdefault("failed_rows", []).append(label)
            e0 = e1 = math.nan
        e0s.append(e0)
        e1s.append(e1)
    return e0s, e1s


# -- shared contexts and initial states ---------------------------------------

_CTX_MEMO: dict = {}


def get_context(level: int, params: ModelParams, cache_dir=None,
                dim: int = 2) -> Context:
    """Process-wide memo of integrator contexts (spectra are expensive)."""
    key = (dim, level, params)
    ctx = _CTX_MEMO.get(key)
    if ctx is None:
        ctx = build_context(build_mesh(dim, level), params,
                            cache_dir=cache_dir)
        _CTX_MEMO[key] = ctx
    return ctx


@lru_cache(maxsize=None)
def _norm_matrices(dim: int, level: int):
    mesh = build_mesh(dim, level)
    return assembly.assemble_mass(mesh), assembly.assemble_stiffness(mesh)


@lru_cache(maxsize=None)
def _initial_coeffs(datum_id: str, dim: int, level: int) -> np.ndarray:
    mesh = build_mesh(dim, level)
    M, _ = _norm_matrices(dim, level)
    datum = get_datum(datum_id)
    if datum.field is None:
        vals = np.asarray(getattr(datum, "nodal_values"), dtype=np.float64)
        if vals.shape[0] != mesh.n_nodes:
            raise ConfigurationError(
                f"nodal datum has {vals.shape[0]} values, mesh needs "
                f"{mesh.n_nodes}")
        return vals
    if dim == 1:
        if datum.id in DATUM_IDS or datum.id == "smooth":
            raise ConfigurationError(
                f"datum {datum.id!r} is defined on the unit square; "
                "1D runs take const:<v> or nodal-file data")
        g = lambda x1: datum.field(x1, x1)
    else:
        g = datum.field
    x = assembly.l2_project(mesh, M, g,
                            degree=assembly.INITIAL_DATA_QUAD_DEGREE,
                            singular_points=datum.singular_points)
    x.setflags(write=False)
    return x


def make_initial_state(config: StudyConfig, level: int,
                       dim: int = 2) -> State:
    """P_h u0 with all three species set to the datum field."""
    v = _initial_coeffs(config.datum, dim, level)
    return State(t=0.0, u=np.stack([v, v, v], axis=1))


# -- error evaluation ----------------------------------------------------------

def compute_error(M, K, u_a: State, u_b: State, order: int) -> float:
    """Combined three-species Sobolev norm of the difference of two states."""
    if u_a.u.shape != u_b.u.shape:
        raise MeshMismatchError(
            f"state shapes differ: {u_a.u.shape} vs {u_b.u.shape}")
    return spectral.sobolev_norm(M, K, order, u_a.u - u_b.u)


# -- reference cache -----------------------------------------------------------

def config_hash(config: StudyConfig, t_end_steps: int) -> str:
    ident = {
        "schema": "fnrd-ref-1",
        "datum": config.datum,
        "params": {k: repr(v) for k, v in config.params.as_dict().items()},
        "ref_level": config.ref_level,
        "ref_dt": repr(config.ref_dt),
        "steps": t_end_steps,
        "nonlinearity": config.nonlinearity,
    }
    blob = json.dumps(ident, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _cache_entry(cache_dir, key: str):
    base = Path(cache_dir) / key
    return base / "state.bin", base / "meta.json"


def save_reference(cache_dir, config: StudyConfig, t_end_steps: int,
                   state: State) -> None:
    key = config_hash(config, t_end_steps)
    spath, mpath = _cache_entry(cache_dir, key)
    spath.parent.mkdir(parents=True, exist_ok=True)
    tmp = spath.with_suffix(".tmp")
    tmp.write_bytes(np.ascontiguousarray(state.u, dtype="<f8").tobytes())
    tmp.replace(spath)
    meta = {"hash": key, "t": state.t, "n": state.n, "steps": t_end_steps,
            "datum": config.datum, "ref_level": config.ref_level,
            "ref_dt": config.ref_dt, "nonlinearity": config.nonlinearity,
            "params": config.params.as_dict()}
    tmp = mpath.with_suffix(".tmp")
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(mpath)


def load_reference(cache_dir, config: StudyConfig,
                   t_end_steps: int) -> Optional[State]:
    key = config_hash(config, t_end_steps)
    spath, mpath = _cache_entry(cache_dir, key)
    if not (spath.exists() and mpath.exists()):
        return None
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        warnings.warn("corrupt reference cache sidecar; recomputing")
        return None
    if meta.get("hash") != key or meta.get("steps") != t_end_steps:
        warnings.warn("reference cache hash mismatch; recomputing")
        return None
    raw = np.frombuffer(spath.read_bytes(), dtype="<f8")
    n = meta.get("n", -1)
    if raw.size != 3 * n:
        warnings.warn("reference cache size mismatch; recomputing")
        return None
    u = raw.astype(np.float64).reshape(n, 3)
    return State(t=float(meta["t"]), u=u)


def compute_reference(config: StudyConfig, cache_dir=None,
                      t_end_steps: Optional[int] = None) -> State:
    """Reference state after t_end_steps reference steps (default: to T)."""
    steps = config.ref_steps if t_end_steps is None else int(t_end_steps)
    if steps < 1 or steps > config.ref_steps:
        raise ConfigurationError(f"t_end_steps {steps} out of range")
    if cache_dir is not None:
        cached = load_reference(cache_dir, config, steps)
        if cached is not None:
            return cached
    ctx = get_context(config.ref_level, config.params, cache_dir)
    state0 = make_initial_state(config, config.ref_level)
    final = integrate(ctx, state0, config.ref_dt, steps,
                      nonlinearity=config.nonlinearity)
    if cache_dir is not None:
        save_reference(cache_dir, config, steps, final)
    return final


def precompute_references(config: StudyConfig, datum_ids: Sequence[str],
                          cache_dir) -> None:
    """Fill the reference cache for several data in one batched run.

    The final-time state and every first-step snapshot are produced by a
    single fixed-step trajectory per datum; advancing all data together
    widens the per-step GEMMs instead of repeating them.
    """
    snap_steps = sorted({config.ref_steps // d
                         for d in config.first_step_denoms}
                        | {config.ref_steps})
    todo = []
    for datum in datum_ids:
        cfg = replace(config, datum=datum)
        missing = [s for s in snap_steps
                   if load_reference(cache_dir, cfg, s) is None]
        if missing:
            todo.append(cfg)
    if not todo:
        return
    ctx = get_context(config.ref_level, config.params, cache_dir)
    states = [make_initial_state(cfg, config.ref_level) for cfg in todo]

    def snap(snapshots):
        step = int(round(snapshots[0].t / config.ref_dt))
        for cfg, snap_state in zip(todo, snapshots):
            save_reference(cache_dir, cfg, step, snap_state)

    hooks = {s: snap for s in snap_steps if s < config.ref_steps}
    finals = integrate_many(ctx, states, config.ref_dt, config.ref_steps,
                            hooks=hooks, nonlinearity=config.nonlinearity)
    for cfg, final in zip(todo, finals):
        save_reference(cache_dir, cfg, config.ref_steps, final)


# -- studies --------------------------------------------------------------------

def _table_meta(config: StudyConfig, protocol: str) -> dict:
    meta = {
        "protocol": protocol,
        "datum": config.datum,
        "config": config.as_dict(),
        "build": _build_id(),
    }
    try:
        rec = expected_orders(config.datum)
        meta["theoretical_orders"] = {
            "gamma": rec.gamma,
            "spatial_L2": rec.spatial_L2,
            "spatial_H1": rec.spatial_H1,
            "temporal": rec.temporal,
            "first_step_L2": rec.first_step_L2,
            "first_step_H1": rec.first_step_H1,
        }
    except ConfigurationError:
        meta["theoretical_orders"] = None
    return meta


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True,
            timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    from . import __version__
    return f"fnrd-{__version__}"


def run_spatial_study(config: StudyConfig, cache_dir=None) -> ConvergenceTable:
    """Errors of coarse-level solves against the fine reference at T."""
    ref = compute_reference(config, cache_dir)
    ref_mesh = build_mesh(2, config.ref_level)
    M, K = _norm_matrices(2, config.ref_level)
    meta = _table_meta(config, "spatial")

    def row(level):
        def work():
            ctx = get_context(level, config.params, cache_dir)
            state0 = make_initial_state(config, level)
            final = integrate(ctx, state0, config.ref_dt, config.ref_steps,
                              nonlinearity=config.nonlinearity)
            lifted = State(t=final.t, u=prolong(ctx.mesh, ref_mesh, final.u))
            return (compute_error(M, K, ref, lifted, 0),
                    compute_error(M, K, ref, lifted, 1))
        return work

    labels = [f"1/{2 ** level}" for level in config.spatial_levels]
    e0s, e1s = _run_rows(labels, [row(l) for l in config.spatial_levels],
                         meta)
    return _build_table(labels, e0s, e1s, meta)


def run_temporal_study(config: StudyConfig, cache_dir=None) -> ConvergenceTable:
    """Errors of coarse-step solves on the reference mesh at T."""
    ref = compute_reference(config, cache_dir)
    ctx = get_context(config.ref_level, config.params, cache_dir)
    M, K = _norm_matrices(2, config.ref_level)
    state0 = make_initial_state(config, config.ref_level)
    meta = _table_meta(config, "temporal")

    def row(n_steps):
        def work():
            final = integrate(ctx, state0, config.T / n_steps, n_steps,
                              nonlinearity=config.nonlinearity)
            return (compute_error(M, K, ref, final, 0),
                    compute_error(M, K, ref, final, 1))
        return work

    labels = [str(n) for n in config.temporal_step_counts]
    e0s, e1s = _run_rows(labels,
                         [row(n) for n in config.temporal_step_counts], meta)
    return _build_table(labels, e0s, e1s, meta)


def run_first_step_study(config: StudyConfig,
                         cache_dir=None) -> ConvergenceTable:
    """Error after exactly one step of size dt against the reference at dt."""
    ctx = get_context(config.ref_level, config.params, cache_dir)
    M, K = _norm_matrices(2, config.ref_level)
    state0 = make_initial_state(config, config.ref_level)
    meta = _table_meta(config, "first-step")

    def row(denom):
        def work():
            ref = compute_reference(config, cache_dir,
                                    t_end_steps=config.ref_steps // denom)
            stepped = erk2_step(ctx, state0, config.T / denom,
                                nonlinearity=config.nonlinearity)
            return (compute_error(M, K, ref, stepped, 0),
                    compute_error(M, K, ref, stepped, 1))
        return work

    labels = [f"{config.T}/{denom}" for denom in config.first_step_denoms]
    e0s, e1s = _run_rows(labels,
                         [row(d) for d in config.first_step_denoms], meta)
    return _build_table(labels, e0s, e1s, meta)


def estimate_gamma(datum_id: str, levels: Sequence[int] = (3, 4, 5, 6),
                   s: Optional[float] = None, cache_dir=None,
                   params: Optional[ModelParams] = None) -> float:
    """Empirical regularity from the growth of fractional norms of P_h u0.

    ||(-A_h)^{s/2} P_h u0|| scales like h^{gamma - s} for data of regularity
    gamma < s, so a least-squares slope of log-norm against log-h recovers
    gamma as s + slope.  The unit operator (a = b = 1) supplies the norm.
    """
    levels = tuple(levels)
    if len(levels) < 3:
        raise ConfigurationError("need at least 3 levels to fit a slope")
    datum = get_datum(datum_id)
    if s is None:
        if datum.gamma is None:
            raise ConfigurationError(
                f"datum {datum_id!r} has no nominal regularity; pass s")
        s = 1.0 if datum.gamma <= 1.0 else 2.0
    # nominal regularities carry an implicit -epsilon, so s equal to the
    # nominal value still probes above the datum's true smoothness
    if datum.gamma is not None and s < datum.gamma:
        raise ConfigurationError(
            f"s = {s} must not be below the nominal regularity {datum.gamma}")
    params = params or ModelParams()
    hs, norms = [], []
    for level in levels:
        ctx = get_context(level, params, cache_dir)
        v = _initial_coeffs(datum_id, 2, level)
        norms.append(spectral.fractional_norm(
            ctx.spectrum, ctx.M, spectral.UNIT_OPERATOR, s, v))
        hs.append(ctx.mesh.h)
    slope = np.polyfit(np.log(hs), np.log(norms), 1)[0]
    return float(s + slope)
