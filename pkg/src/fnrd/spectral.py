"""Spectral engine: pencil eigendecomposition, phi-functions, operator actions.

One generalized eigendecomposition K Phi = M Phi diag(theta) with M-orthonormal
columns serves every species: the species operator -A_i has modal eigenvalues
mu_ij = a_i*theta_j + b_i, so semigroup actions e^{tA}, the phi-function
actions of the exponential integrator, fractional powers and fractional
Sobolev norms are all elementwise multiplier operations between a to-modal
transform (Phi^T M v) and a from-modal transform (Phi c).
"""

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, DecompositionError
from .mesh import Mesh
from .model import ModelParams

MAX_DENSE_DIM = 20000
KERNEL_CLAMP_REL = 1e-10
PHI_TAYLOR_CUTOFF = 0.1
_PHI_TAYLOR_TERMS = 12


@dataclass(frozen=True)
class PencilSpectrum:
    """Eigenpairs of the (stiffness, mass) pencil, ascending eigenvalues.

    Columns of Phi are M-orthonormal; theta[0] is the clamped-to-zero Neumann
    constant mode.
    """

    n: int
    theta: np.ndarray
    Phi: np.ndarray


@dataclass(frozen=True)
class SpeciesOperator:
    """Diffusion coefficient and linear shift of one species operator -A_i."""

    index: int
    a: float
    b: float

    @classmethod
    def from_params(cls, params: ModelParams, i: int) -> "SpeciesOperator":
        return cls(index=i, a=params.diffusion(i), b=params.shift(i))

    def mu(self, theta: np.ndarray) -> np.ndarray:
        return self.a * theta + self.b


UNIT_OPERATOR = SpeciesOperator(index=0, a=1.0, b=1.0)


def decompose(K, M) -> PencilSpectrum:
    """Dense symmetric generalized eigendecomposition of (K, M).

    Deterministic sign convention: the first component of each eigenvector
    whose magnitude exceeds 1e-12 of the column max is made positive.
    Eigenvalues below 1e-10 * max(theta) are clamped to exactly zero so the
    Neumann kernel maps to mu = b exactly.
    """
    if K.n != M.n:
        raise DecompositionError(f"dimension mismatch: {K.n} vs {M.n}")
    if K.n > MAX_DENSE_DIM:
        raise DecompositionError(
            f"n={K.n} exceeds dense backend limit {MAX_DENSE_DIM}")
    try:
        theta, Phi = sla.eigh(K.toarray(), M.toarray(), driver="gvd")
    except sla.LinAlgError as exc:  # pragma: no cover - LAPACK failure path
        raise DecompositionError(f"generalized eigensolver failed: {exc}")
    order = np.argsort(theta, kind="stable")
    theta = theta[order]
    Phi = np.ascontiguousarray(Phi[:, order])
    theta[theta < KERNEL_CLAMP_REL * theta[-1]] = 0.0
    colmax = np.abs(Phi).max(axis=0)
    for j in range(Phi.shape[1]):
        nz = np.nonzero(np.abs(Phi[:, j]) > 1e-12 * colmax[j])[0]
        if nz.size and Phi[nz[0], j] < 0:
            Phi[:, j] = -Phi[:, j]
    theta.setflags(write=False)
    Phi.setflags(write=False)
    return PencilSpectrum(n=K.n, theta=theta, Phi=Phi)


def modal_transform(spec: PencilSpectrum, M, v: np.ndarray,
                    direction: str) -> np.ndarray:
    """Map nodal coefficients to modal ones (Phi^T M v) or back (Phi c)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != spec.n:
        raise ConfigurationError(
            f"vector length {v.shape[0]} != spectrum dimension {spec.n}")
    if direction == "to-modal":
        return spec.Phi.T @ (M @ v)
    if direction == "from-modal":
        return spec.Phi @ v
    raise ConfigurationError(f"unknown direction {direction!r}")


# -- phi functions ------------------------------------------------------------

def _phi_taylor(k: int, z: np.ndarray) -> np.ndarray:
    import math
    acc = np.zeros_like(z)
    for m in range(_PHI_TAYLOR_TERMS - 1, 0, -1):
        acc = (acc + 1.0 / math.factorial(m + k)) * z
    return acc + 1.0 / math.factorial(k)


def phi_values(k: int, z: np.ndarray) -> np.ndarray:
    """phi_k on arrays of non-positive arguments, k in {0, 1, 2}.

    A 12-term Taylor branch below |z| <= 0.1 avoids the cancellation in the
    closed forms; above it expm1 keeps them stable for all z <= 0.
    """
    if k not in (0, 1, 2):
        raise ConfigurationError(f"phi order must be 0, 1 or 2, got {k}")
    z = np.asarray(z, dtype=np.float64)
    if k == 0:
        return np.exp(z)
    out = np.empty_like(z)
    small = np.abs(z) <= PHI_TAYLOR_CUTOFF
    if small.any():
        out[small] = _phi_taylor(k, z[small])
    big = ~small
    if big.any():
        zb = z[big]
        em = np.expm1(zb)
        out[big] = em / zb if k == 1 else (em - zb) / (zb * zb)
    return out


def phi_scalar(k: int, z: float) -> float:
    """Scalar phi_k(z) for z <= 0."""
    return float(phi_values(k, np.asarray([z]))[0])


# -- operator actions and norms ------------------------------------------------

_OPERATOR_FUNCTIONS = ("exp", "phi1", "phi2", "frac_power")


def operator_multipliers(spec: PencilSpectrum, op: SpeciesOperator, fn: str,
                         t: float = 0.0, s: float = None) -> np.ndarray:
    """Modal multiplier vector g(mu_j) for one species operator."""
    mu = op.mu(spec.theta)
    if fn == "exp":
        return np.exp(-t * mu)
    if fn == "phi1":
        return phi_values(1, -t * mu)
    if fn == "phi2":
        return phi_values(2, -t * mu)
    if fn == "frac_power":
        if s is None or not -2.0 <= s <= 2.0:
            raise ConfigurationError(f"fractional power s={s} outside [-2, 2]")
        return mu ** s
    raise ConfigurationError(
        f"fn must be one of {_OPERATOR_FUNCTIONS}, got {fn!r}")


def apply_operator_function(spec: PencilSpectrum, M, op: SpeciesOperator,
                            fn: str, t: float, v: np.ndarray,
                            s: float = None) -> np.ndarray:
    """Apply g(-A_h) to nodal coefficients through the modal basis.

    fn selects g: "exp" gives e^{tA}, "phi1"/"phi2" give phi_k(t A), and
    "frac_power" gives (-A)^s with t ignored.
    """
    if fn != "frac_power" and t < 0:
        raise ConfigurationError(f"t must be nonnegative, got {t}")
    c = modal_transform(spec, M, v, "to-modal")
    g = operator_multipliers(spec, op, fn, t, s)
    return spec.Phi @ (g * c.T).T if c.ndim > 1 else spec.Phi @ (g * c)


def fractional_norm(spec: PencilSpectrum, M, op: SpeciesOperator, s: float,
                    v: np.ndarray) -> float:
    """Discrete fractional Sobolev norm ||(-A_h)^{s/2} v|| via modal weights."""
    if not -2.0 <= s <= 2.0:
        raise ConfigurationError(f"fractional order s={s} outside [-2, 2]")
    c = modal_transform(spec, M, v, "to-modal")
    mu = op.mu(spec.theta)
    return float(np.sqrt(np.sum(mu ** s * c * c)))


def sobolev_norm(M, K, order: int, v: np.ndarray) -> float:
    """L2 (order 0) or full H1 (order 1) norm of nodal coefficients.

    v may be (n,) for a scalar field or (n, k) for a multi-species state, in
    which case the per-species norms combine Euclidean-ly.
    """
    if order not in (0, 1):
        raise ConfigurationError(f"norm order must be 0 or 1, got {order}")
    v = np.asarray(v, dtype=np.float64)
    w = M @ v
    if order == 1:
        w = w + K @ v
    return float(np.sqrt(np.sum(v * w)))


# -- disk cache ---------------------------------------------------------------

def spectrum_cache_paths(cache_dir: Path, dim: int, level: int):
    base = Path(cache_dir) / f"spectrum_d{dim}_l{level}"
    return base / "theta.bin", base / "phi.bin", base / "meta.json"


def save_spectrum(spec: PencilSpectrum, cache_dir, mesh: Mesh,
                  matrix_hash: str) -> None:
    tpath, ppath, mpath = spectrum_cache_paths(cache_dir, mesh.dim, mesh.level)
    tpath.parent.mkdir(parents=True, exist_ok=True)
    for path, arr in ((tpath, spec.theta), (ppath, spec.Phi)):
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        tmp.replace(path)
    meta = {"dim": mesh.dim, "level": mesh.level, "n": spec.n,
            "matrix_hash": matrix_hash}
    tmp = mpath.with_suffix(".tmp")
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(mpath)


def load_spectrum(cache_dir, mesh: Mesh, matrix_hash: str):
    """Load a cached spectrum; returns None on miss or hash mismatch."""
    tpath, ppath, mpath = spectrum_cache_paths(cache_dir, mesh.dim, mesh.level)
    if not (tpath.exists() and ppath.exists() and mpath.exists()):
        return None
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        warnings.warn("corrupt spectrum cache sidecar; recomputing")
        return None
    if meta.get("matrix_hash") != matrix_hash:
        warnings.warn("spectrum cache hash mismatch; recomputing")
        return None
    n = meta["n"]
    theta = np.frombuffer(tpath.read_bytes(), dtype="<f8")
    Phi = np.frombuffer(ppath.read_bytes(), dtype="<f8")
    if theta.size != n or Phi.size != n * n:
        warnings.warn("spectrum cache size mismatch; recomputing")
        return None
    theta = theta.astype(np.float64)
    Phi = Phi.astype(np.float64).reshape(n, n)
    theta.setflags(write=False)
    Phi.setflags(write=False)
    return PencilSpectrum(n=n, theta=theta, Phi=Phi)


def pencil_hash(K, M) -> str:
    h = hashlib.sha256()
    h.update(K.content_hash().encode())
    h.update(M.content_hash().encode())
    return h.hexdigest()


def get_spectrum(mesh: Mesh, K, M, cache_dir=None) -> PencilSpectrum:
    """Decompose the pencil, with optional transparent disk caching."""
    if cache_dir is None:
        return decompose(K, M)
    mhash = pencil_hash(K, M)
    spec = load_spectrum(Path(cache_dir), mesh, mhash)
    if spec is None:
        spec = decompose(K, M)
        save_spectrum(spec, Path(cache_dir), mesh, mhash)
    return spec
