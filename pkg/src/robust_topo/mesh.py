"""Discrete structural models: truss ground structures and variable thickness sheets.

Both model kinds share one representation.  Element ``i`` contributes
``x[i] * K_i`` to the global stiffness matrix, where ``K_i`` is the element's
stiffness per unit design variable (bar volume for trusses, plate thickness
for sheets).  Only free degrees of freedom enter the global matrix; fixed DOFs
are marked ``-1`` in the DOF map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

FIXED = -1
PIVOT_RTOL = 1e-12


class ModelError(ValueError):
    """Raised when a structural model cannot be constructed."""


class SingularStiffnessError(np.linalg.LinAlgError):
    """Raised when K(x) is singular or numerically indefinite."""


@dataclass(frozen=True)
class Node:
    id: int
    coords: tuple[float, float]
    dof_ids: tuple[int, ...]  # FIXED for constrained directions


@dataclass(frozen=True)
class Element:
    kind: str  # "truss_bar" or "quad4_sheet"
    node_ids: tuple[int, ...]
    unit_stiffness: np.ndarray = field(repr=False)


def bar_unit_stiffness(p: np.ndarray, q: np.ndarray, young: float = 1.0) -> np.ndarray:
    """4x4 stiffness of a bar between ``p`` and ``q`` per unit bar volume.

    With volume ``x = A*l`` the axial stiffness ``E*A/l`` becomes ``E*x/l**2``.
    """
    d = np.asarray(q, float) - np.asarray(p, float)
    length = float(np.hypot(*d))
    if length == 0.0:
        raise ModelError("zero-length bar")
    c, s = d / length
    gamma = np.array([-c, -s, c, s])
    return (young / length**2) * np.outer(gamma, gamma)


def plane_strain_matrix(young: float, poisson: float) -> np.ndarray:
    f = young / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return f * np.array(
        [
            [1.0 - poisson, poisson, 0.0],
            [poisson, 1.0 - poisson, 0.0],
            [0.0, 0.0, 0.5 - poisson],
        ]
    )


_GAUSS = (-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0))


def quad4_unit_stiffness(xy: np.ndarray, young: float = 1.0, poisson: float = 0.0) -> np.ndarray:
    """8x8 bilinear quad stiffness for unit thickness, 2x2 Gauss quadrature.

    ``xy`` holds the four corner coordinates in counterclockwise order.  DOFs
    are ordered ``(u1, v1, u2, v2, ...)``.
    """
    xy = np.asarray(xy, float)
    D = plane_strain_matrix(young, poisson)
    ke = np.zeros((8, 8))
    xi_n = np.array([-1.0, 1.0, 1.0, -1.0])
    eta_n = np.array([-1.0, -1.0, 1.0, 1.0])
    for xi in _GAUSS:
        for eta in _GAUSS:
            dN = 0.25 * np.vstack((xi_n * (1.0 + eta_n * eta), eta_n * (1.0 + xi_n * xi)))
            J = dN @ xy
            detJ = np.linalg.det(J)
            if detJ <= 0.0:
                raise ModelError("degenerate or clockwise quadrilateral element")
            dNx = np.linalg.solve(J, dN)
            B = np.zeros((3, 8))
            B[0, 0::2] = dNx[0]
            B[1, 1::2] = dNx[1]
            B[2, 0::2] = dNx[1]
            B[2, 1::2] = dNx[0]
            ke += B.T @ D @ B * detJ
    return 0.5 * (ke + ke.T)


class StructuralModel:
    """Immutable assembled-on-demand structural model.

    Parameters
    ----------
    coords : (N, 2) array of node coordinates
    fixed : (N, 2) boolean array, True where a DOF is constrained
    elements : element connectivity, one tuple of node ids per element
    unit_stiffness : (m, k, k) element matrices per unit design variable
    kind : "truss" or "sheet"
    """

    def __init__(
        self,
        coords,
        fixed,
        elements,
        unit_stiffness,
        kind: str,
        meta: dict | None = None,
        check_support: bool = True,
    ):
        self.coords = np.asarray(coords, float)
        self.coords.setflags(write=False)
        fixed = np.asarray(fixed, bool)
        self.kind = kind
        self.meta = dict(meta or {})
        self.spatial_dim = 2
        self.connectivity = np.asarray(elements, int)
        self.unit_stiffness = np.asarray(unit_stiffness, float)
        self.unit_stiffness.setflags(write=False)

        dof_map = np.full(fixed.shape, FIXED, dtype=int)
        free = ~fixed
        dof_map[free] = np.arange(int(free.sum()))
        self.dof_map = dof_map
        self.dof_map.setflags(write=False)
        self.n = int(free.sum())
        self.m = len(self.connectivity)
        if int(fixed.sum()) < 2:
            raise ModelError("insufficient supports")
        if self.n == 0 or self.m == 0:
            raise ModelError("model needs at least one free DOF and one element")

        # element DOF table, FIXED entries are dropped at scatter time
        self.edofs = dof_map[self.connectivity].reshape(self.m, -1)
        self._build_pattern()
        if check_support:
            try:
                self.factorize(np.ones(self.m))
            except SingularStiffnessError as exc:
                raise ModelError("structure is not adequately supported") from exc

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def nodes(self) -> list[Node]:
        return [Node(i, tuple(self.coords[i]), tuple(int(d) for d in self.dof_map[i])) for i in range(self.n_nodes)]

    @property
    def elements(self) -> list[Element]:
        tag = "truss_bar" if self.kind == "truss" else "quad4_sheet"
        return [
            Element(tag, tuple(int(a) for a in self.connectivity[i]), self.unit_stiffness[i])
            for i in range(self.m)
        ]

    def _build_pattern(self):
        k = self.edofs.shape[1]
        rows = np.repeat(self.edofs, k, axis=1).ravel()
        cols = np.tile(self.edofs, (1, k)).ravel()
        elem = np.repeat(np.arange(self.m), k * k)
        vals = self.unit_stiffness.reshape(self.m, -1).ravel()
        keep = (rows != FIXED) & (cols != FIXED)
        rows, cols, elem, vals = rows[keep], cols[keep], elem[keep], vals[keep]
        # Sparse linear map x -> CSR data of K(x).
        key = rows * self.n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self._indices = (uniq // self.n, uniq % self.n)
        self._data_map = sp.csr_matrix((vals, (inv, elem)), shape=(len(uniq), self.m))

    def node_dofs(self, node: int) -> np.ndarray:
        return self.dof_map[node]

    def dof_node(self) -> np.ndarray:
        """Node id owning each free DOF."""
        owner = np.empty(self.n, dtype=int)
        for node, dofs in enumerate(self.dof_map):
            for d in dofs:
                if d != FIXED:
                    owner[d] = node
        return owner

    def assemble(self, x) -> sp.csc_matrix:
        x = np.asarray(x, float)
        if x.shape != (self.m,):
            raise ValueError(f"design has shape {x.shape}, expected ({self.m},)")
        data = self._data_map @ x
        return sp.csc_matrix((data, self._indices), shape=(self.n, self.n))

    def factorize(self, x) -> "Factorization":
        return Factorization(self.assemble(x))

    def element_energies(self, u: np.ndarray) -> np.ndarray:
        """``u_e^T K_e u_e`` for every element, i.e. minus the compliance sensitivity."""
        ue = np.append(u, 0.0)[self.edofs]  # FIXED == -1 picks the trailing zero
        return np.einsum("ij,ijk,ik->i", ue, self.unit_stiffness, ue)


class Factorization:
    """Sparse LU of an SPD stiffness matrix with diagonal pivoting.

    With diagonal pivots the LU factors coincide with an LDL^T factorization,
    so a tiny or negative pivot signals a singular or indefinite matrix.
    """

    def __init__(self, K: sp.spmatrix):
        K = sp.csc_matrix(K)
        self.K = K
        diag = K.diagonal()
        dmax = float(diag.max()) if diag.size else 0.0
        if dmax <= 0.0:
            raise SingularStiffnessError("singular stiffness")
        try:
            self._lu = spla.splu(
                K,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # exactly singular
            raise SingularStiffnessError("singular stiffness") from exc
        piv = self._lu.U.diagonal()
        if np.min(piv) <= PIVOT_RTOL * dmax:
            raise SingularStiffnessError("singular stiffness")

    def solve(self, f: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(f, float))


def solve_equilibrium(model: StructuralModel, x, f) -> tuple[np.ndarray, float]:
    """Return displacements ``u`` with ``K(x) u = f`` and the compliance ``f.u``."""
    f = np.asarray(f, float)
    if f.shape != (model.n,):
        raise ValueError(f"load has shape {f.shape}, expected ({model.n},)")
    u = model.factorize(x).solve(f)
    return u, float(f @ u)


# ---------------------------------------------------------------------------
# generators


NodePredicate = Callable[[int, int, float, float], bool]


def _fixed_array(n_nodes: int, grid: Iterable[tuple[int, int, float, float]], fixed_nodes) -> np.ndarray:
    fixed = np.zeros((n_nodes, 2), bool)
    for node, (i, j, xx, yy) in enumerate(grid):
        if callable(fixed_nodes):
            hit = fixed_nodes(i, j, xx, yy)
        else:
            hit = (i, j) in fixed_nodes
        # either a truth value for both DOFs or a per-direction (x, y) mask
        fixed[node] |= np.broadcast_to(np.asarray(hit, bool), (2,))
    return fixed


def _collinear_overlaps(coords: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Mask of bars that pass through some third node of the grid."""
    keep = np.ones(len(pairs), bool)
    for k, (a, b) in enumerate(pairs):
        d = coords[b] - coords[a]
        r = coords - coords[a]
        cross = d[0] * r[:, 1] - d[1] * r[:, 0]
        t = (r @ d) / (d @ d)
        inside = (np.abs(cross) <= 1e-9 * (d @ d)) & (t > 1e-9) & (t < 1 - 1e-9)
        if inside.any():
            keep[k] = False
    return keep


def build_ground_structure(
    grid_nx: int,
    grid_ny: int,
    spacing: float = 1.0,
    fixed_nodes: NodePredicate | Iterable[tuple[int, int]] = (),
    *,
    young: float = 1.0,
    remove_overlaps: bool = False,
    spacing_y: float | None = None,
    check_support: bool = True,
) -> StructuralModel:
    """Full ground structure on a ``grid_nx`` by ``grid_ny`` node grid.

    Node ``(i, j)`` sits at ``(i*spacing, j*spacing_y)`` and gets id
    ``i*grid_ny + j``.  Every unordered node pair is a potential bar; with
    ``remove_overlaps`` a bar that passes through an intermediate grid node is
    dropped.  ``fixed_nodes`` is either a predicate ``(i, j, x, y) -> bool`` or
    a collection of ``(i, j)`` grid indices; fixed nodes lose both DOFs.
    """
    if grid_nx < 1 or grid_ny < 1 or grid_nx * grid_ny < 2:
        raise ModelError("ground structure needs at least two nodes")
    sy = spacing if spacing_y is None else spacing_y
    grid = [(i, j, i * spacing, j * sy) for i in range(grid_nx) for j in range(grid_ny)]
    coords = np.array([(g[2], g[3]) for g in grid])
    fixed = _fixed_array(len(grid), grid, fixed_nodes)
    if fixed.sum() < 2:
        raise ModelError("insufficient supports")
    pairs = list(combinations(range(len(grid)), 2))
    if remove_overlaps:
        mask = _collinear_overlaps(coords, pairs)
        pairs = [p for p, k in zip(pairs, mask) if k]
    ke = np.array([bar_unit_stiffness(coords[a], coords[b], young) for a, b in pairs])
    meta = {"grid": (grid_nx, grid_ny), "spacing": (spacing, sy), "young": young, "remove_overlaps": remove_overlaps}
    return StructuralModel(coords, fixed, pairs, ke, kind="truss", meta=meta, check_support=check_support)


def count_ground_structure_bars(grid_nx: int, grid_ny: int, remove_overlaps: bool) -> int:
    coords = np.array([(i, j) for i in range(grid_nx) for j in range(grid_ny)], float)
    pairs = list(combinations(range(len(coords)), 2))
    if not remove_overlaps:
        return len(pairs)
    return int(_collinear_overlaps(coords, pairs).sum())


def build_truss(coords, bars, fixed, young: float = 1.0, check_support: bool = True) -> StructuralModel:
    """Truss from explicit node coordinates and bar list."""
    coords = np.asarray(coords, float)
    ke = np.array([bar_unit_stiffness(coords[a], coords[b], young) for a, b in bars])
    return StructuralModel(coords, fixed, bars, ke, kind="truss", meta={"young": young}, check_support=check_support)


EDGES = ("left", "right", "bottom", "top")


def build_sheet_mesh(
    nx: int,
    ny: int,
    width: float,
    height: float,
    poisson_ratio: float = 0.0,
    fixed_edge: str | Iterable[str] = "left",
    *,
    young: float = 1.0,
    fixed_nodes: NodePredicate | Iterable[tuple[int, int]] = (),
) -> StructuralModel:
    """Rectangular sheet of ``nx`` by ``ny`` bilinear quads, thickness as design.

    Node ``(i, j)``, ``0 <= i <= nx``, ``0 <= j <= ny`` has id ``i*(ny+1) + j``.
    ``fixed_nodes`` adds supports on top of ``fixed_edge`` (same forms as in
    :func:`build_ground_structure`).
    """
    if nx < 1 or ny < 1:
        raise ModelError("sheet needs nx, ny >= 1")
    if not 0.0 <= poisson_ratio < 0.5:
        raise ModelError("poisson ratio must lie in [0, 0.5)")
    if width <= 0.0 or height <= 0.0:
        raise ModelError("degenerate (zero-area) elements")
    edges = {fixed_edge} if isinstance(fixed_edge, str) else set(fixed_edge)
    unknown = edges - set(EDGES)
    if unknown:
        raise ModelError(f"unknown edge selector {sorted(unknown)}")
    hx, hy = width / nx, height / ny
    nid = lambda i, j: i * (ny + 1) + j  # noqa: E731
    coords = np.array([(i * hx, j * hy) for i in range(nx + 1) for j in range(ny + 1)])
    fixed = np.zeros((len(coords), 2), bool)
    for i in range(nx + 1):
        for j in range(ny + 1):
            on = (
                ("left" in edges and i == 0)
                or ("right" in edges and i == nx)
                or ("bottom" in edges and j == 0)
                or ("top" in edges and j == ny)
            )
            fixed[nid(i, j)] = on
    grid = [(i, j, i * hx, j * hy) for i in range(nx + 1) for j in range(ny + 1)]
    fixed |= _fixed_array(len(coords), grid, fixed_nodes)
    conn = [(nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)) for i in range(nx) for j in range(ny)]
    # all elements are congruent rectangles
    ke0 = quad4_unit_stiffness(np.array([[0, 0], [hx, 0], [hx, hy], [0, hy]], float), young, poisson_ratio)
    ke = np.broadcast_to(ke0, (len(conn), 8, 8)).copy()
    meta = {
        "mesh": (nx, ny),
        "size": (width, height),
        "poisson_ratio": poisson_ratio,
        "young": young,
        "fixed_edge": sorted(edges),
    }
    return StructuralModel(coords, fixed, conn, ke, kind="sheet", meta=meta)
