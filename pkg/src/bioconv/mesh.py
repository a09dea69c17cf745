"""Uniform triangulations of the unit square with boundary classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIDES = ("bottom", "right", "top", "left")


@dataclass(frozen=True)
class Mesh:
    """Triangulation of [0,1]^2 into 2*n^2 right triangles.

    Nodes are ordered row-major from (0,0); each grid cell is split along
    its lower-left to upper-right diagonal, giving counterclockwise
    triangles in lexicographic cell order.
    """

    n: int
    nodes: np.ndarray  # (n_nodes, 2)
    triangles: np.ndarray  # (n_triangles, 3), CCW
    boundary_edges: tuple  # of (node_a, node_b, side)
    h: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "h", math.sqrt(2.0) / self.n)
        self.nodes.setflags(write=False)
        self.triangles.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def build_unit_square_mesh(n: int) -> Mesh:
    """Build the uniform n-by-n mesh of the unit square."""
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")

    side = np.linspace(0.0, 1.0, n + 1)
    xg, yg = np.meshgrid(side, side)  # row-major: node id = iy*(n+1) + ix
    nodes = np.column_stack([xg.ravel(), yg.ravel()])

    tris = []
    for iy in range(n):
        for ix in range(n):
            a = iy * (n + 1) + ix
            b = a + 1
            c = a + n + 2
            d = a + n + 1
            # diagonal a-c, both triangles counterclockwise
            tris.append((a, b, c))
            tris.append((a, c, d))
    triangles = np.asarray(tris, dtype=np.int64)

    edges = []
    for i in range(n):
        edges.append((i, i + 1, "bottom"))
    for i in range(n):
        edges.append((i * (n + 1) + n, (i + 1) * (n + 1) + n, "right"))
    top0 = n * (n + 1)
    for i in range(n):
        edges.append((top0 + i, top0 + i + 1, "top"))
    for i in range(n):
        edges.append((i * (n + 1), (i + 1) * (n + 1), "left"))

    return Mesh(n=n, nodes=nodes, triangles=triangles, boundary_edges=tuple(edges))


def boundary_node_ids(mesh: Mesh) -> np.ndarray:
    """Node indices lying on the boundary of the unit square."""
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    on = (x == 0.0) | (x == 1.0) | (y == 0.0) | (y == 1.0)
    return np.nonzero(on)[0]


def locate_boundary_dofs(mesh: Mesh, space_kind: str) -> set:
    """DOF indices whose basis function is nonzero on the boundary.

    Bubble DOFs vanish on element boundaries and are never returned.
    """
    bnodes = boundary_node_ids(mesh)
    if space_kind in ("p1", "p1-zero-mean", "pressure"):
        return set(int(i) for i in bnodes)
    if space_kind == "mini-vector":
        out = set()
        for i in bnodes:
            out.add(int(2 * i))
            out.add(int(2 * i + 1))
        return out
    raise ValueError(f"unknown space kind {space_kind!r}")


def signed_areas(mesh: Mesh) -> np.ndarray:
    """Signed area of every triangle (positive for CCW orientation)."""
    p = mesh.nodes[mesh.triangles]  # (nt, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def edge_count(mesh: Mesh) -> int:
    """Number of unique edges in the triangulation."""
    t = mesh.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0).shape[0]
