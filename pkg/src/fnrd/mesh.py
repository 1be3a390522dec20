"""Structured, nested simplicial meshes of (0,1) and (0,1)^2.

Meshes live on dyadic levels: level k has grid spacing h = 2^-k.  In 2D each
grid square is split along the same lower-left to upper-right diagonal at
every level, which makes level k+1 an exact refinement of level k and lets
`prolong` reproduce piecewise-linear functions by pure nodal interpolation.

Nodes are ordered lexicographically by (x2, x1), i.e. row-major with the x2
row index varying slowest, so node (i, j) of a 2D level-k mesh has index
j*(2^k + 1) + i and coordinates (i*h, j*h).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, MeshMismatchError

MAX_LEVEL = 10


@dataclass(frozen=True)
class Mesh:
    """Immutable simplicial mesh of the unit interval or unit square.

    nodes has shape (n_nodes, dim); elements has shape (n_elements, dim+1)
    and holds node indices (segments in 1D, CCW triangles in 2D).
    """

    dim: int
    level: int
    h: float
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.dim == other.dim and self.level == other.level

    def __hash__(self):
        return hash((self.dim, self.level))


def build_mesh(dim: int, level: int) -> Mesh:
    """Build the structured mesh of (0,1)^dim at dyadic level `level`."""
    if dim not in (1, 2):
        raise ConfigurationError(f"dim must be 1 or 2, got {dim}")
    if not (1 <= level <= MAX_LEVEL):
        raise ConfigurationError(
            f"level must be in [1, {MAX_LEVEL}], got {level}")
    m = 2 ** level
    h = 1.0 / m
    if dim == 1:
        nodes = (np.arange(m + 1, dtype=np.float64) * h)[:, None]
        left = np.arange(m, dtype=np.int64)
        elements = np.stack([left, left + 1], axis=1)
    else:
        coords = np.arange(m + 1, dtype=np.float64) * h
        x1, x2 = np.meshgrid(coords, coords, indexing="xy")
        nodes = np.stack([x1.ravel(), x2.ravel()], axis=1)
        ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="xy")
        ll = (jj * (m + 1) + ii).ravel()
        lr = ll + 1
        ul = ll + (m + 1)
        ur = ul + 1
        # two CCW triangles per square, diagonal from lower-left to upper-right
        lower = np.stack([ll, lr, ur], axis=1)
        upper = np.stack([ll, ur, ul], axis=1)
        elements = np.concatenate(
            [np.stack([lower, upper], axis=1).reshape(-1, 3)], axis=0)
    nodes.setflags(write=False)
    elements.setflags(write=False)
    return Mesh(dim=dim, level=level, h=h, nodes=nodes, elements=elements)


def element_measures(mesh: Mesh) -> np.ndarray:
    """Signed measures of all elements (lengths in 1D, areas in 2D)."""
    pts = mesh.nodes[mesh.elements]
    if mesh.dim == 1:
        return pts[:, 1, 0] - pts[:, 0, 0]
    d1 = pts[:, 1] - pts[:, 0]
    d2 = pts[:, 2] - pts[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _prolong_once(dim: int, coarse_level: int, v: np.ndarray) -> np.ndarray:
    """Interpolate nodal values from level k to level k+1 (exact for P1)."""
    mc = 2 ** coarse_level
    mf = 2 * mc
    if dim == 1:
        out = np.empty((mf + 1,) + v.shape[1:], dtype=v.dtype)
        out[0::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        return out
    vc = v.reshape((mc + 1, mc + 1) + v.shape[1:])
    out = np.empty((mf + 1, mf + 1) + v.shape[1:], dtype=v.dtype)
    out[0::2, 0::2] = vc
    out[0::2, 1::2] = 0.5 * (vc[:, :-1] + vc[:, 1:])
    out[1::2, 0::2] = 0.5 * (vc[:-1, :] + vc[1:, :])
    # square centers sit on the coarse diagonal, so they average its endpoints
    out[1::2, 1::2] = 0.5 * (vc[:-1, :-1] + vc[1:, 1:])
    return out.reshape((-1,) + v.shape[1:])


def prolong(coarse: Mesh, fine: Mesh, v: np.ndarray) -> np.ndarray:
    """Re-express a coarse P1 function by its nodal values on a nested fine mesh.

    `v` holds nodal coefficients on `coarse`, one column per field if 2D.
    The represented piecewise-linear function is unchanged.
    """
    if coarse.dim != fine.dim:
        raise MeshMismatchError(
            f"cannot prolong between dim {coarse.dim} and dim {fine.dim}")
    if fine.level <= coarse.level:
        raise MeshMismatchError(
            f"fine level {fine.level} must exceed coarse level {coarse.level}")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != coarse.n_nodes:
        raise MeshMismatchError(
            f"coefficient length {v.shape[0]} != node count {coarse.n_nodes}")
    out = v
    for k in range(coarse.level, fine.level):
        out = _prolong_once(coarse.dim, k, out)
    return out


def dump_mesh(mesh: Mesh) -> str:
    """Plain-text node/element listing for debugging."""
    lines = [f"# mesh dim={mesh.dim} level={mesh.level} h={mesh.h!r}",
             f"# nodes {mesh.n_nodes}"]
    for p in mesh.nodes:
        lines.append(" ".join(repr(float(c)) for c in p))
    lines.append(f"# elements {mesh.n_elements}")
    for e in mesh.elements:
        lines.append(" ".join(str(int(i)) for i in e))
    return "\n".join(lines) + "\n"
