"""Surface extraction from weighted SDF grids.

The extractor is a dual-marching variant: every grid edge crossing the
zero level contributes a crossing point, each surface cell condenses its
crossings into one dual vertex, and every crossing edge interior to the
grid emits a quad over the four surrounding dual vertices. Two weight
families steer the geometry: per-cell corner weights bias where an edge
crossing sits (with unit weights it is the plain linear zero crossing),
and per-cell edge weights bias the dual vertex inside its cell (unit
weights give the centroid). Per-node deformation vectors, bounded by half
a cell, move the grid nodes themselves before any interpolation.

Everything is expressed in differentiable tensor arithmetic, so gradients
reach SDF values, deformations and both weight families. With zero
deformation and unit weights the surface tracks a standard marching-cubes
extraction to within a cell diagonal; a quadratic regularizer anchored at
exactly that neutral configuration is provided for training.

Faces wind so normals point from the inside sign toward the outside sign;
cells are visited in lexicographic index order, which fixes vertex and
face order for byte-stable exports.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .recon.triplane import SIGN_CONVENTIONS

CELL_CORNERS = (
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
)
CELL_EDGES = (
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
)


@dataclass
class SdfGrid:
    """Node SDF values plus the extraction controls.

    values:       (R, R, R) signed distances at the grid nodes.
    deformations: (R, R, R, 3) node offsets in world units, |d| <= cell/2.
    alpha:        (R-1, R-1, R-1, 8) per-cell corner weights, positive.
    beta:         (R-1, R-1, R-1, 12) per-cell edge weights, positive.
    origin/cell:  world position of node (0,0,0) and node spacing.
    sign_convention: which numeric sign means inside.
    """

    values: torch.Tensor
    deformations: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    origin: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    cell: float = 2.0 / 31.0
    sign_convention: str = "positive_inside"

    def __post_init__(self) -> None:
        r = self.values.shape[0]
        if r < 2 or self.values.shape != (r, r, r):
            raise ValueError(f"values must be cubic with R >= 2, got {tuple(self.values.shape)}")
        if self.deformations.shape != (r, r, r, 3):
            raise ValueError("deformations must be (R, R, R, 3)")
        n = r - 1
        if self.alpha.shape != (n, n, n, 8) or self.beta.shape != (n, n, n, 12):
            raise ValueError("weights must be per cell: alpha (..., 8), beta (..., 12)")
        if self.sign_convention not in SIGN_CONVENTIONS:
            raise ValueError(f"unknown sign convention {self.sign_convention!r}")
        if not self.cell > 0.0:
            raise ValueError("cell size must be positive")
        for t in (self.values, self.deformations, self.alpha, self.beta):
            if not bool(torch.isfinite(t).all()):
                raise ValueError("non-finite entries in sdf grid")
        if float(self.deformations.detach().abs().max()) > 0.5 * self.cell + 1e-9:
            raise ValueError("deformations exceed half a grid cell")
        if float(self.alpha.detach().min()) <= 0.0 or float(self.beta.detach().min()) <= 0.0:
            raise ValueError("extraction weights must stay positive")

    @property
    def resolution(self) -> int:
        return int(self.values.shape[0])

    @staticmethod
    def neutral(
        values: torch.Tensor,
        origin: tuple[float, float, float] = (-1.0, -1.0, -1.0),
        cell: Optional[float] = None,
        sign_convention: str = "positive_inside",
    ) -> "SdfGrid":
        """Grid with zero deformation and unit weights around given values."""
        r = values.shape[0]
        if cell is None:
            cell = 2.0 / (r - 1)
        n = r - 1
        return SdfGrid(
            values=values,
            deformations=torch.zeros(r, r, r, 3, dtype=values.dtype),
            alpha=torch.ones(n, n, n, 8, dtype=values.dtype),
            beta=torch.ones(n, n, n, 12, dtype=values.dtype),
            origin=origin,
            cell=float(cell),
            sign_convention=sign_convention,
        )


@dataclass
class MeshStats:
    vertex_count: int
    face_count: int
    edge_count: int
    euler_characteristic: int
    watertight: bool
    defects: tuple[str, ...]
    volume: float
    area: float


class MeshResult:
    """Extracted triangle mesh. Stats are derived from the geometry on
    every access rather than stored, so they can never go stale."""

    def __init__(self, vertices: torch.Tensor, faces: torch.Tensor, colors: torch.Tensor):
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3 or faces.dtype != torch.long:
            raise ValueError("faces must be (F, 3) integer indices")
        if colors.shape != vertices.shape:
            raise ValueError("colors must be one RGB triple per vertex")
        if faces.numel() and (int(faces.min()) < 0 or int(faces.max()) >= vertices.shape[0]):
            raise ValueError("face index out of range")
        self.vertices = vertices
        self.faces = faces
        self.colors = colors

    @property
    def stats(self) -> MeshStats:
        return mesh_stats(self.vertices, self.faces)


def mesh_stats(vertices: torch.Tensor, faces: torch.Tensor) -> MeshStats:
    """Closedness, Euler characteristic, signed volume and surface area.

    Watertightness means every undirected edge is shared by exactly two
    faces with opposite directions. Volume is the divergence-theorem sum
    over signed tetrahedra, positive for outward-wound closed surfaces.
    Problems are reported in defects, never raised.
    """
    v = vertices.detach().to(torch.float64)
    f = faces.detach().cpu().numpy()
    nf = int(f.shape[0])
    if nf == 0:
        return MeshStats(
            vertex_count=int(vertices.shape[0]),
            face_count=0,
            edge_count=0,
            euler_characteristic=int(vertices.shape[0]),
            watertight=True,
            defects=(),
            volume=0.0,
            area=0.0,
        )
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    defects: list[str] = []
    _, dir_counts = np.unique(directed, axis=0, return_counts=True)
    if int(dir_counts.max()) > 1:
        defects.append("directed edge repeated (inconsistent winding or doubled face)")
    undirected = np.sort(directed, axis=1)
    uniq, counts = np.unique(undirected, axis=0, return_counts=True)
    n_boundary = int((counts == 1).sum())
    n_over = int((counts > 2).sum())
    if n_boundary:
        defects.append(f"{n_boundary} boundary edges")
    if n_over:
        defects.append(f"{n_over} edges shared by more than two faces")
    watertight = not defects

    tv = v[faces.detach()]
    cross = torch.linalg.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    area = float(cross.norm(dim=-1).sum() * 0.5)
    volume = float((tv[:, 0] * torch.linalg.cross(tv[:, 1], tv[:, 2])).sum(-1).sum() / 6.0)

    return MeshStats(
        vertex_count=int(vertices.shape[0]),
        face_count=nf,
        edge_count=int(uniq.shape[0]),
        euler_characteristic=int(vertices.shape[0]) - int(uniq.shape[0]) + nf,
        watertight=watertight,
        defects=tuple(defects),
        volume=volume,
        area=area,
    )


def flexi_regularizer(grid: SdfGrid) -> torch.Tensor:
    """Quadratic pull toward the neutral extraction: zero deformation and
    unit weights. Deformations are measured in half-cell units, so the
    value is resolution-independent; it is zero exactly at neutral and the
    deformation share grows fourfold when deformations double."""
    half = 0.5 * grid.cell
    d_term = ((grid.deformations / half) ** 2).mean()
    a_term = ((grid.alpha - 1.0) ** 2).mean()
    b_term = ((grid.beta - 1.0) ** 2).mean()
    return d_term + a_term + b_term


def _node_positions(grid: SdfGrid) -> torch.Tensor:
    r = grid.resolution
    dtype = grid.values.dtype
    idx = torch.arange(r, dtype=dtype)
    gi, gj, gk = torch.meshgrid(idx, idx, idx, indexing="ij")
    base = torch.stack([gi, gj, gk], dim=-1) * grid.cell
    base = base + torch.tensor(grid.origin, dtype=dtype)
    half = 0.5 * grid.cell
    return base + grid.deformations.clamp(-half, half)


def extract_mesh(
    grid: SdfGrid, color_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
) -> MeshResult:
    """Extract the zero level set of the grid as a triangle mesh.

    Args:
        grid: SDF values with deformations and extraction weights.
        color_fn: optional callback mapping (V, 3) vertex positions to
            (V, 3) colors in [0, 1]; vertices default to mid gray.

    Returns:
        MeshResult with outward-wound faces (normals point toward the
        outside sign of the grid's convention). Degenerate triangles with
        area at or below 1e-12 are dropped, and only referenced dual
        vertices are kept.
    """
    r = grid.resolution
    n = r - 1
    dtype = grid.values.dtype
    vals = grid.values.reshape(-1)
    if grid.sign_convention == "positive_inside":
        inside = grid.values > 0
    else:
        inside = grid.values < 0
    inside_flat = inside.reshape(-1)
    pos = _node_positions(grid).reshape(-1, 3)

    def node_id(i, j, k):
        return (i * r + j) * r + k

    ci, cj, ck = torch.meshgrid(
        torch.arange(n), torch.arange(n), torch.arange(n), indexing="ij"
    )
    ci, cj, ck = ci.reshape(-1), cj.reshape(-1), ck.reshape(-1)
    corner_ids = torch.stack(
        [node_id(ci + dx, cj + dy, ck + dz) for dx, dy, dz in CELL_CORNERS], dim=-1
    )  # (Nc, 8) in lexicographic cell order

    occ8 = inside_flat[corner_ids]
    n_in = occ8.sum(dim=-1)
    surf = (n_in > 0) & (n_in < 8)
    n_surf = int(surf.sum())
    empty = MeshResult(
        torch.zeros(0, 3, dtype=dtype),
        torch.zeros(0, 3, dtype=torch.long),
        torch.zeros(0, 3, dtype=dtype),
    )
    if n_surf == 0:
        return empty

    dual_of_cell = torch.full((n * n * n,), -1, dtype=torch.long)
    dual_of_cell[surf] = torch.arange(n_surf)

    cids = corner_ids[surf]
    s8 = vals[cids]
    p8 = pos[cids]
    o8 = occ8[surf]
    a8 = grid.alpha.reshape(-1, 8)[surf]
    b12 = grid.beta.reshape(-1, 12)[surf]

    e0 = torch.tensor([e[0] for e in CELL_EDGES])
    e1 = torch.tensor([e[1] for e in CELL_EDGES])
    sa, sb = s8[:, e0], s8[:, e1]
    crossing = o8[:, e0] != o8[:, e1]
    wa = a8[:, e0] * sa
    wb = a8[:, e1] * sb
    denom = wb - wa
    safe = torch.where(crossing, denom, torch.ones_like(denom))
    t = (-wa) / safe
    xa = p8[:, e0, :]
    xb = p8[:, e1, :]
    u = xa + t.unsqueeze(-1) * (xb - xa)  # (Ns, 12, 3)

    bw = b12 * crossing.to(dtype)
    dual = (bw.unsqueeze(-1) * u).sum(dim=1) / bw.sum(dim=1).clamp_min(1e-30).unsqueeze(-1)

    # one quad per interior crossing edge, cells ordered counterclockwise
    # around the edge axis; winding flips with the inside corner
    inside_grid = inside
    face_quads: list[torch.Tensor] = []
    flip_flags: list[torch.Tensor] = []
    axes_unit = torch.eye(3, dtype=torch.long)
    for a in range(3):
        b_ax, c_ax = (a + 1) % 3, (a + 2) % 3
        lo_idx = [torch.arange(r) for _ in range(3)]
        lo_idx[a] = torch.arange(n)
        lo_idx[b_ax] = torch.arange(1, r - 1)
        lo_idx[c_ax] = torch.arange(1, r - 1)
        if any(len(x) == 0 for x in lo_idx):
            continue
        gi, gj, gk = torch.meshgrid(lo_idx[0], lo_idx[1], lo_idx[2], indexing="ij")
        li = torch.stack([gi.reshape(-1), gj.reshape(-1), gk.reshape(-1)], dim=-1)
        hi = li + axes_unit[a]
        lo_in = inside_grid[li[:, 0], li[:, 1], li[:, 2]]
        hi_in = inside_grid[hi[:, 0], hi[:, 1], hi[:, 2]]
        hit = lo_in != hi_in
        if not bool(hit.any()):
            continue
        li = li[hit]
        lo_in = lo_in[hit]
        quad_cells = []
        for ob, oc in ((-1, -1), (0, -1), (0, 0), (-1, 0)):
            cellidx = li.clone()
            cellidx[:, b_ax] += ob
            cellidx[:, c_ax] += oc
            flat = (cellidx[:, 0] * n + cellidx[:, 1]) * n + cellidx[:, 2]
            quad_cells.append(dual_of_cell[flat])
        quad = torch.stack(quad_cells, dim=-1)  # (E, 4)
        face_quads.append(quad)
        flip_flags.append(~lo_in)

    if not face_quads:
        return empty

    quads = torch.cat(face_quads, dim=0)
    flips = torch.cat(flip_flags, dim=0)
    quads = torch.where(flips.unsqueeze(-1), quads.flip(-1), quads)
    tris = torch.cat(
        [quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], dim=0
    )
    # interleave so both halves of a quad stay adjacent in face order
    ne = quads.shape[0]
    order = torch.arange(2 * ne).reshape(2, ne).T.reshape(-1)
    tris = tris[order]

    tv = dual[tris]
    area2 = torch.linalg.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0]).norm(dim=-1)
    keep = area2 > 2e-12  # twice the area threshold
    tris = tris[keep]
    if tris.numel() == 0:
        return empty

    used = torch.unique(tris)
    remap = torch.full((n_surf,), -1, dtype=torch.long)
    remap[used] = torch.arange(used.shape[0])
    vertices = dual[used]
    faces = remap[tris]

    if color_fn is not None:
        colors = color_fn(vertices)
        if colors.shape != vertices.shape:
            raise ValueError("color_fn must return one RGB triple per vertex")
    else:
        colors = torch.full_like(vertices, 0.7)
    return MeshResult(vertices, faces, colors)


def grid_from_field(
    field,
    resolution: int,
    bbox: tuple[float, float] = (-1.0, 1.0),
    chunk: int = 1 << 15,
) -> SdfGrid:
    """Sample a field's SDF, deformation and weight heads on a node grid.

    The field's per-point scalar weight lands on the grid as tied cell
    weights: each cell corner takes its node's weight, each cell edge the
    mean of its two corners. Deformations are re-clamped to half of this
    grid's cell in case the field was tuned for another resolution.
    """
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    lo, hi = bbox
    cell = (hi - lo) / (resolution - 1)
    axis = torch.linspace(lo, hi, resolution)
    gi, gj, gk = torch.meshgrid(axis, axis, axis, indexing="ij")
    pts = torch.stack([gi, gj, gk], dim=-1).reshape(-1, 3)

    sdf_parts, def_parts, w_parts = [], [], []
    for s in range(0, pts.shape[0], chunk):
        fs = field.full(pts[s : s + chunk])
        sdf_parts.append(fs.sdf)
        def_parts.append(fs.deformation)
        w_parts.append(fs.weight)
    r = resolution
    values = torch.cat(sdf_parts).reshape(r, r, r)
    half = 0.5 * cell
    deform = torch.cat(def_parts).reshape(r, r, r, 3).clamp(-half, half)
    w = torch.cat(w_parts).reshape(r, r, r)

    n = r - 1
    ci, cj, ck = torch.meshgrid(
        torch.arange(n), torch.arange(n), torch.arange(n), indexing="ij"
    )
    alpha = torch.stack(
        [w[ci + dx, cj + dy, ck + dz] for dx, dy, dz in CELL_CORNERS], dim=-1
    )
    beta = 0.5 * (alpha[..., [e[0] for e in CELL_EDGES]] + alpha[..., [e[1] for e in CELL_EDGES]])
    return SdfGrid(
        values=values,
        deformations=deform,
        alpha=alpha,
        beta=beta,
        origin=(lo, lo, lo),
        cell=cell,
        sign_convention="positive_inside",
    )


def write_obj(mesh: MeshResult, path: str) -> None:
    """Wavefront OBJ with per-vertex colors appended to each position line
    (x y z r g b); fixed 8-decimal formatting, no comments, so equal
    meshes give equal files."""
    v = mesh.vertices.detach().cpu().numpy()
    c = mesh.colors.detach().cpu().numpy()
    f = mesh.faces.detach().cpu().numpy()
    lines = []
    for i in range(v.shape[0]):
        lines.append(
            "v %.8f %.8f %.8f %.8f %.8f %.8f"
            % (v[i, 0], v[i, 1], v[i, 2], c[i, 0], c[i, 1], c[i, 2])
        )
    for i in range(f.shape[0]):
        lines.append("f %d %d %d" % (f[i, 0] + 1, f[i, 1] + 1, f[i, 2] + 1))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _pad4(data: bytes, filler: bytes = b"\x00") -> bytes:
    rem = len(data) % 4
    return data if rem == 0 else data + filler * (4 - rem)


def write_glb(mesh: MeshResult, path: str) -> None:
    """Minimal binary glTF: one mesh, positions + vertex colors + indices.
    Layout and JSON key order are fixed, so equal meshes give equal bytes."""
    v = mesh.vertices.detach().cpu().numpy().astype("<f4")
    c = mesh.colors.detach().cpu().numpy().astype("<f4")
    f = mesh.faces.detach().cpu().numpy().astype("<u4").reshape(-1)

    idx_bytes = _pad4(f.tobytes())
    pos_bytes = _pad4(v.tobytes())
    col_bytes = _pad4(c.tobytes())
    bin_chunk = idx_bytes + pos_bytes + col_bytes

    if v.shape[0]:
        vmin = [float(x) for x in v.min(axis=0)]
        vmax = [float(x) for x in v.max(axis=0)]
    else:
        vmin = [0.0, 0.0, 0.0]
        vmax = [0.0, 0.0, 0.0]

    gltf = {
        "accessors": [
            {
                "bufferView": 0,
                "componentType": 5125,
                "count": int(f.shape[0]),
                "type": "SCALAR",
            },
            {
                "bufferView": 1,
                "componentType": 5126,
                "count": int(v.shape[0]),
                "max": vmax,
                "min": vmin,
                "type": "VEC3",
            },
            {
                "bufferView": 2,
                "componentType": 5126,
                "count": int(c.shape[0]),
                "type": "VEC3",
            },
        ],
        "asset": {"generator": "style3d", "version": "2.0"},
        "bufferViews": [
            {"buffer": 0, "byteLength": len(idx_bytes), "byteOffset": 0},
            {"buffer": 0, "byteLength": len(pos_bytes), "byteOffset": len(idx_bytes)},
            {
                "buffer": 0,
                "byteLength": len(col_bytes),
                "byteOffset": len(idx_bytes) + len(pos_bytes),
            },
        ],
        "buffers": [{"byteLength": len(bin_chunk)}],
        "meshes": [
            {
                "primitives": [
                    {
                        "attributes": {"COLOR_0": 2, "POSITION": 1},
                        "indices": 0,
                        "mode": 4,
                    }
                ]
            }
        ],
        "nodes": [{"mesh": 0}],
        "scene": 0,
        "scenes": [{"nodes": [0]}],
    }
    json_chunk = _pad4(
        json.dumps(gltf, sort_keys=True, separators=(",", ":")).encode("utf-8"), b" "
    )
    total = 12 + 8 + len(json_chunk) + 8 + len(bin_chunk)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", 0x46546C67, 2, total))
        fh.write(struct.pack("<II", len(json_chunk), 0x4E4F534A))
        fh.write(json_chunk)
        fh.write(struct.pack("<II", len(bin_chunk), 0x004E4942))
        fh.write(bin_chunk)
