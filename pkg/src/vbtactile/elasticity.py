"""Hexahedral FEM model of the fingertip and the marker compliance matrix H.

Units: mm, N, N/mm^2 inside; Young's modulus is configured in kPa.

The conversion matrix uses block layout: entry ``a * N + i`` of a force or
displacement vector is the component along axis ``a`` (x, y, z) of marker ``i``.
Markers are numbered row-major over the grid (row along y, column along x).
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from vbtactile.errors import DegenerateElement, DimensionMismatch, SingularSystem

__all__ = [
    "FingertipGeometry",
    "Material",
    "HexMesh",
    "ConversionMatrix",
    "build_mesh",
    "structured_hex_mesh",
    "hex8_stiffness",
    "assemble_stiffness",
    "condense_H",
    "solve_nodal_loads",
    "forward_displacements",
    "build_conversion_matrix",
    "to_blocks",
    "from_blocks",
]

log = logging.getLogger(__name__)

_XI = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float
)
_GAUSS = _XI / math.sqrt(3.0)


def _shape_derivatives(points):
    """dN/dxi for the trilinear hexahedron, shape (n_points, 8, 3)."""
    out = np.empty((len(points), 8, 3))
    for g, (x, y, z) in enumerate(points):
        a = 1 + _XI[:, 0] * x
        b = 1 + _XI[:, 1] * y
        c = 1 + _XI[:, 2] * z
        out[g, :, 0] = _XI[:, 0] * b * c / 8.0
        out[g, :, 1] = _XI[:, 1] * a * c / 8.0
        out[g, :, 2] = _XI[:, 2] * a * b / 8.0
    return out


_DN = _shape_derivatives(_GAUSS)


@dataclass(frozen=True)
class FingertipGeometry:
    """Spherical-cap elastic body carrying a rectangular marker grid.

    ``length`` is the side of the square footprint meshed around the grid;
    ``radius = inf`` gives a flat slab.  ``subdivisions`` elements span one
    marker spacing; ``layers`` defaults to the count giving cube-like
    elements through the thickness.
    """

    rows: int = 20
    cols: int = 20
    spacing: float = 1.27
    thickness: float = 8.0
    radius: float = 45.0
    length: float | None = None
    subdivisions: int = 3
    layers: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("marker grid needs at least one row and column")
        if not self.spacing > 0 or not self.thickness > 0:
            raise ValueError("spacing and thickness must be positive")
        if self.subdivisions < 1:
            raise ValueError("subdivisions must be >= 1")
        extent = max(self.rows, self.cols) - 1
        if self.length is None:
            object.__setattr__(self, "length", (extent + 2) * self.spacing)
        if self.length < extent * self.spacing - 1e-9:
            raise ValueError("footprint length is smaller than the marker grid")
        if self.radius < self.length / math.sqrt(2.0):
            raise ValueError(
                f"radius {self.radius} mm is below length/sqrt(2) = "
                f"{self.length / math.sqrt(2.0):.3f} mm; the cap would exceed a hemisphere"
            )

    @property
    def n_markers(self) -> int:
        return self.rows * self.cols

    @property
    def element_edge(self) -> float:
        return self.spacing / self.subdivisions

    def sag(self, x, y):
        """Drop of the outer surface below its apex at (x, y)."""
        if math.isinf(self.radius):
            return np.zeros(np.broadcast(x, y).shape)
        R = self.radius
        return R - np.sqrt(R * R - np.asarray(x) ** 2 - np.asarray(y) ** 2)

    def surface_z(self, x, y):
        return self.thickness - self.sag(x, y)

    def marker_xy(self):
        c = (np.arange(self.cols) - (self.cols - 1) / 2.0) * self.spacing
        r = (np.arange(self.rows) - (self.rows - 1) / 2.0) * self.spacing
        X, Y = np.meshgrid(c, r)
        return np.column_stack([X.ravel(), Y.ravel()])

    def marker_positions(self):
        xy = self.marker_xy()
        return np.column_stack([xy, self.surface_z(xy[:, 0], xy[:, 1])])

    def outward_normals(self, points=None):
        """Rest-shape outward unit normals at ``points`` (default: markers)."""
        p = self.marker_positions() if points is None else np.atleast_2d(points)
        if math.isinf(self.radius):
            return np.tile([0.0, 0.0, 1.0], (len(p), 1))
        center = np.array([0.0, 0.0, self.thickness - self.radius])
        v = p - center
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def digest(self) -> str:
        key = repr((self.rows, self.cols, self.spacing, self.thickness, self.radius,
                    self.length, self.subdivisions, self.layers))
        return hashlib.sha1(key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Material:
    youngs_kpa: float = 250.0
    poisson: float = 0.48

    def __post_init__(self):
        if not self.youngs_kpa > 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        if self.poisson >= 0.49:
            warnings.warn(
                f"Poisson ratio {self.poisson} is nearly incompressible; hexahedra over-stiffen "
                "(volumetric locking), use <= 0.48", stacklevel=2,
            )

    @property
    def youngs(self) -> float:
        """Young's modulus in N/mm^2."""
        return self.youngs_kpa * 1e-3

    def elasticity_matrix(self):
        E, nu = self.youngs, self.poisson
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = E / (2 * (1 + nu))
        C = np.zeros((6, 6))
        C[:3, :3] = lam
        C[np.arange(3), np.arange(3)] += 2 * mu
        C[np.arange(3, 6), np.arange(3, 6)] = mu
        return C


@dataclass(frozen=True)
class HexMesh:
    nodes: np.ndarray  # (n_nodes, 3)
    elements: np.ndarray  # (n_elements, 8)
    marker_nodes: np.ndarray  # (N,)
    base_nodes: np.ndarray
    shape: tuple = ()  # (nx, ny, nz) element counts for structured meshes
    geometry: FingertipGeometry | None = field(default=None, compare=False)

    @property
    def n_dofs(self) -> int:
        return 3 * len(self.nodes)


def _jacobian_dets(coords):
    J = np.einsum("gna,enb->egab", _DN, coords)
    return np.linalg.det(J)


def build_mesh(geom: FingertipGeometry) -> HexMesh:
    """Structured hexahedral mesh between the flat base and the outer cap.

    Markers land on every ``subdivisions``-th node of the outer surface.

    Raises
    ------
    DegenerateElement
        A generated element has a non-positive Jacobian at a Gauss point.
    """
    e = geom.element_edge
    extent_x = (geom.cols - 1) * geom.spacing
    extent_y = (geom.rows - 1) * geom.spacing
    mx = int(math.floor((geom.length - extent_x) / 2.0 / e + 1e-9))
    my = int(math.floor((geom.length - extent_y) / 2.0 / e + 1e-9))
    nx = (geom.cols - 1) * geom.subdivisions + 2 * mx
    ny = (geom.rows - 1) * geom.subdivisions + 2 * my
    nz = geom.layers if geom.layers is not None else max(1, int(round(geom.thickness / e)))
    if nx < 1 or ny < 1:
        raise DegenerateElement("marker grid and margin produce no elements")
    xs = (np.arange(nx + 1) - nx / 2.0) * e
    ys = (np.arange(ny + 1) - ny / 2.0) * e
    top = geom.surface_z(*np.meshgrid(xs, ys))  # (ny+1, nx+1)
    if not np.all(np.isfinite(top)) or np.any(top <= 0.0):
        raise DegenerateElement("outer surface meets the base inside the footprint")
    frac = np.arange(nz + 1) / nz
    Z = frac[:, None, None] * top[None]
    X = np.broadcast_to(xs[None, None, :], Z.shape)
    Y = np.broadcast_to(ys[None, :, None], Z.shape)
    rr, cc = np.meshgrid(np.arange(geom.rows), np.arange(geom.cols), indexing="ij")
    marker_ij = np.column_stack([mx + cc.ravel() * geom.subdivisions,
                                 my + rr.ravel() * geom.subdivisions])
    return structured_hex_mesh(X, Y, Z, marker_ij, geom)


def structured_hex_mesh(X, Y, Z, marker_ij, geometry=None) -> HexMesh:
    """Hexahedral mesh from a logically structured node grid.

    Parameters
    ----------
    X, Y, Z : array_like, shape (nz + 1, ny + 1, nx + 1)
        Node coordinates indexed ``[k, j, i]``; layer ``k = 0`` is the
        clamped base and ``k = nz`` the outer surface.
    marker_ij : array_like, shape (N, 2)
        Surface ``(i, j)`` grid indices of the markers, in marker order.

    Raises
    ------
    DegenerateElement
        An element has a non-positive Jacobian at a Gauss point.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 3 or min(Z.shape) < 2:
        raise DegenerateElement("need at least one element along every axis")
    nz, ny, nx = (n - 1 for n in Z.shape)
    X = np.broadcast_to(np.asarray(X, dtype=float), Z.shape)
    Y = np.broadcast_to(np.asarray(Y, dtype=float), Z.shape)
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def nid(i, j, k):
        return (k * (ny + 1) + j) * (nx + 1) + i

    I, Jj, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, Jj, K = I.ravel(), Jj.ravel(), K.ravel()
    elements = np.column_stack([
        nid(I, Jj, K), nid(I + 1, Jj, K), nid(I + 1, Jj + 1, K), nid(I, Jj + 1, K),
        nid(I, Jj, K + 1), nid(I + 1, Jj, K + 1), nid(I + 1, Jj + 1, K + 1), nid(I, Jj + 1, K + 1),
    ])
    dets = _jacobian_dets(nodes[elements])
    if np.any(dets <= 0.0):
        bad = int(np.argmin(dets.min(axis=1)))
        raise DegenerateElement(f"element {bad} has non-positive Jacobian {dets.min():.3e}")

    mij = np.asarray(marker_ij, dtype=np.int64).reshape(-1, 2)
    marker_nodes = nid(mij[:, 0], mij[:, 1], nz)
    jj, ii = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    base_nodes = nid(ii.ravel(), jj.ravel(), 0)
    return HexMesh(nodes, elements, marker_nodes.astype(np.int64), base_nodes.astype(np.int64),
                   (nx, ny, nz), geometry)


def _b_generic(dNdx):
    """Strain-displacement matrices (..., 6, 3m) from physical derivatives (..., m, 3).

    Strain order: xx, yy, zz, xy, yz, zx (engineering shear).
    """
    shape = dNdx.shape[:-2]
    m = dNdx.shape[-2]
    B = np.zeros(shape + (6, 3 * m))
    dx, dy, dz = dNdx[..., 0], dNdx[..., 1], dNdx[..., 2]
    B[..., 0, 0::3] = dx
    B[..., 1, 1::3] = dy
    B[..., 2, 2::3] = dz
    B[..., 3, 0::3] = dy
    B[..., 3, 1::3] = dx
    B[..., 4, 1::3] = dz
    B[..., 4, 2::3] = dy
    B[..., 5, 0::3] = dz
    B[..., 5, 2::3] = dx
    return B


# derivatives of the bubble modes 1 - xi^2, 1 - eta^2, 1 - zeta^2
_DP = np.einsum("ga,ab->gab", -2.0 * _GAUSS, np.eye(3))


def hex8_stiffness(coords, material: Material, incompatible=True):
    """Element stiffness matrices, 2x2x2 Gauss rule.

    Parameters
    ----------
    coords : array_like, shape (n_elements, 8, 3) or (8, 3)
    incompatible : bool
        Enrich the displacement field with the three internal bubble modes
        per axis (Taylor's patch-test-passing form) and condense them out.
        This removes the shear and volumetric locking of the plain trilinear
        element at Poisson ratios near 0.5.  ``False`` gives the plain
        element.

    Returns
    -------
    ndarray, shape (n_elements, 24, 24) or (24, 24)
        DOF order is node-major: ``3 * local_node + axis``.
    """
    X = np.asarray(coords, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    J = np.einsum("gna,enb->egab", _DN, X)
    detJ = np.linalg.det(J)
    invJ = np.linalg.inv(J)
    dNdx = np.einsum("egba,gna->egnb", invJ, _DN)
    B = _b_generic(dNdx)
    C = material.elasticity_matrix()
    Ke = np.einsum("egki,kl,eglj,eg->eij", B, C, B, detJ, optimize=True)
    if incompatible:
        J0 = np.einsum("na,enb->eab", _shape_derivatives(np.zeros((1, 3)))[0], X)
        detJ0 = np.linalg.det(J0)
        invJ0 = np.linalg.inv(J0)
        dPdx = np.einsum("eba,gma,eg->egmb", invJ0, _DP, detJ0[:, None] / detJ)
        G = _b_generic(dPdx)
        Kua = np.einsum("egki,kl,eglj,eg->eij", B, C, G, detJ, optimize=True)
        Kaa = np.einsum("egki,kl,eglj,eg->eij", G, C, G, detJ, optimize=True)
        Ke = Ke - Kua @ np.linalg.solve(Kaa, np.swapaxes(Kua, 1, 2))
        Ke = 0.5 * (Ke + np.swapaxes(Ke, 1, 2))
    return Ke[0] if single else Ke


def assemble_stiffness(mesh: HexMesh, material: Material, chunk=4096):
    """Global sparse stiffness (CSR, N/mm) before any boundary condition."""
    n = mesh.n_dofs
    dof = (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(len(mesh.elements), 24)
    K = sp.csr_matrix((n, n))
    for start in range(0, len(mesh.elements), chunk):
        sl = slice(start, start + chunk)
        Ke = hex8_stiffness(mesh.nodes[mesh.elements[sl]], material)
        d = dof[sl]
        rows = np.repeat(d, 24, axis=1).ravel()
        cols = np.tile(d, (1, 24)).ravel()
        K = K + sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return K


def to_blocks(v_nodes):
    """(N, 3) per-marker vectors -> block-layout vector of length 3N."""
    return np.asarray(v_nodes, dtype=float).T.reshape(-1)


def from_blocks(v):
    """Block-layout vector of length 3N -> (N, 3)."""
    v = np.asarray(v, dtype=float)
    return v.reshape(3, -1).T


@dataclass(frozen=True)
class ConversionMatrix:
    """Marker compliance ``D = H F`` in block layout (mm per N)."""

    H: np.ndarray
    rows: int
    cols: int
    layout: str = "xyz-blocks"
    geometry: FingertipGeometry | None = field(default=None, compare=False)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        n = 3 * self.rows * self.cols
        if H.shape != (n, n):
            raise DimensionMismatch(f"H has shape {H.shape}, expected {(n, n)}")
        object.__setattr__(self, "H", H)

    @property
    def n_markers(self) -> int:
        return self.rows * self.cols

    def symmetry_residual(self) -> float:
        return float(np.linalg.norm(self.H - self.H.T) / np.linalg.norm(self.H))


class BlockCholesky:
    """Cholesky factor of a banded SPD matrix stored as dense diagonal blocks.

    Any partition into blocks at least as wide as the bandwidth is block
    tridiagonal, so factor and solves reduce to dense BLAS-3 kernels.
    """

    def __init__(self, A, block=None):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        coo = A.tocoo()
        band = int(np.max(np.abs(coo.col - coo.row))) if coo.nnz else 0
        b = max(block or 0, band, 1)
        self.n = n
        self.bounds = [(s, min(n, s + b)) for s in range(0, n, b)]
        self.diag = []
        self.sub = []  # sub[k] = L[k+1, k]
        prev = None
        for k, (s, e) in enumerate(self.bounds):
            D = A[s:e, s:e].toarray()
            if prev is not None:
                D -= prev @ prev.T
            try:
                Lkk = sla.cholesky(D, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SingularSystem("matrix is not positive definite") from exc
            self.diag.append(Lkk)
            if k + 1 < len(self.bounds):
                s2, e2 = self.bounds[k + 1]
                E = A[s2:e2, s:e].toarray()
                prev = sla.solve_triangular(Lkk, E.T, lower=True, check_finite=False).T
                self.sub.append(prev)

    def forward(self, rhs):
        Y = np.array(rhs, dtype=float)
        prev = None
        for k, (s, e) in enumerate(self.bounds):
            blk = Y[s:e]
            if prev is not None:
                blk -= self.sub[k - 1] @ prev
            Y[s:e] = sla.solve_triangular(self.diag[k], blk, lower=True, check_finite=False)
            prev = Y[s:e]
        return Y

    def backward(self, Y):
        X = np.array(Y, dtype=float)
        nxt = None
        for k in range(len(self.bounds) - 1, -1, -1):
            s, e = self.bounds[k]
            blk = X[s:e]
            if nxt is not None:
                blk -= self.sub[k].T @ nxt
            X[s:e] = sla.solve_triangular(self.diag[k], blk, lower=True, trans="T", check_finite=False)
            nxt = X[s:e]
        return X

    def solve(self, rhs):
        return self.backward(self.forward(rhs))


def _banded_node_order(mesh: HexMesh):
    """Node permutation placing the longest grid direction outermost."""
    n = len(mesh.nodes)
    if not mesh.shape:
        return np.arange(n)
    nx, ny, nz = mesh.shape
    idx = np.arange(n)
    ijk = [idx % (nx + 1), (idx // (nx + 1)) % (ny + 1), idx // ((nx + 1) * (ny + 1))]
    sizes = [nx + 1, ny + 1, nz + 1]
    axes = sorted(range(3), key=lambda a: sizes[a])  # fastest first
    key = np.zeros(n, dtype=np.int64)
    for a in reversed(axes):
        key = key * sizes[a] + ijk[a]
    return np.argsort(key, kind="stable")


class _Condensed:
    """Base-clamped stiffness, factored in a bandwidth-reducing DOF order."""

    def __init__(self, stiffness, mesh: HexMesh):
        if len(mesh.base_nodes) == 0:
            raise SingularSystem("no base nodes fixed; rigid-body modes remain")
        n = mesh.n_dofs
        fixed = np.zeros(n, dtype=bool)
        fixed[(3 * mesh.base_nodes[:, None] + np.arange(3)).ravel()] = True
        order = (3 * _banded_node_order(mesh)[:, None] + np.arange(3)).ravel()
        self.free = order[~fixed[order]]
        self.index = np.full(n, -1)
        self.index[self.free] = np.arange(len(self.free))
        Kff = sp.csr_matrix(stiffness)[self.free][:, self.free]
        self.factor = BlockCholesky(Kff)
        self.n = n

    def solve(self, rhs_full):
        rhs = np.asarray(rhs_full, dtype=float)
        u = np.zeros(rhs.shape)
        sol = self.factor.solve(rhs[self.free])
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("non-finite displacements; rigid-body modes remain")
        u[self.free] = sol
        return u


def _marker_dofs(mesh: HexMesh):
    """Global DOF indices in block layout order (axis-major, marker-minor)."""
    return (3 * mesh.marker_nodes[None, :] + np.arange(3)[:, None]).ravel()


def condense_H(stiffness, mesh: HexMesh, chunk_bytes=256 * 2**20) -> ConversionMatrix:
    """Marker-restricted compliance with the base clamped.

    Column ``a * N + i`` is the block-layout marker displacement caused by a
    unit point force on marker ``i`` along axis ``a``.
    """
    solver = _Condensed(stiffness, mesh)
    mdofs = _marker_dofs(mesh)
    m = len(mdofs)
    free_m = solver.index[mdofs]
    if np.any(free_m < 0):
        raise SingularSystem("a marker node is clamped")
    nf = len(solver.free)
    step = max(1, int(chunk_bytes // (8 * nf)))
    H = np.empty((m, m))
    for start in range(0, m, step):
        cols = np.arange(start, min(m, start + step))
        rhs = np.zeros((nf, len(cols)))
        rhs[free_m[cols], np.arange(len(cols))] = 1.0
        U = solver.factor.solve(rhs)
        H[:, cols] = U[free_m]
    if not np.all(np.isfinite(H)):
        raise SingularSystem("non-finite compliance; rigid-body modes remain")
    geom = mesh.geometry
    rows, cols_ = (geom.rows, geom.cols) if geom is not None else (1, m // 3)
    return ConversionMatrix(H, rows, cols_, geometry=geom)


def solve_nodal_loads(stiffness, mesh: HexMesh, marker_forces):
    """Full FEM solve for block-layout marker point forces.

    Returns the (n_nodes, 3) nodal displacement field.
    """
    f = np.asarray(marker_forces, dtype=float)
    mdofs = _marker_dofs(mesh)
    if f.shape != (len(mdofs),):
        raise DimensionMismatch(f"force vector has length {f.size}, expected {len(mdofs)}")
    rhs = np.zeros(mesh.n_dofs)
    np.add.at(rhs, mdofs, f)
    u = _Condensed(stiffness, mesh).solve(rhs)
    return u.reshape(-1, 3)


def forward_displacements(H: ConversionMatrix, F):
    """``D = H F`` in block layout."""
    F = np.asarray(F, dtype=float)
    if F.shape[0] != H.H.shape[1]:
        raise DimensionMismatch(f"force vector has length {F.shape[0]}, expected {H.H.shape[1]}")
    return H.H @ F


def build_conversion_matrix(geom: FingertipGeometry, material: Material | None = None):
    """Mesh, assemble and condense in one call; returns ``(H, mesh, stiffness)``."""
    material = material or Material()
    mesh = build_mesh(geom)
    log.info("mesh %s elements, %d nodes", mesh.shape, len(mesh.nodes))
    K = assemble_stiffness(mesh, material)
    return condense_H(K, mesh), mesh, K
