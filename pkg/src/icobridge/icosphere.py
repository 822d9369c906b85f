"""Icosphere meshes by recursive subdivision.

A level-L mesh has 10*4**L + 2 unit vertices, 20*4**L faces and 30*4**L
edges. Construction is bit-deterministic: the base icosahedron uses the
standard (0, +-1, +-phi) cyclic coordinates, and each subdivision appends
edge midpoints in sorted-edge-key order, so a level-(L-1) mesh is an exact
prefix (indices and coordinates) of the level-L mesh. All spherical layers
(convolution, pooling, upsampling) consume the index structures built here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_LEVEL = 8

_PHI = (1.0 + np.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class IcosphereMesh:
    """Immutable icosphere. Arrays are write-protected and safe to share."""

    level: int
    vertices: np.ndarray        # (V, 3) float64 unit vectors
    faces: np.ndarray           # (F, 3) int64, counterclockwise from outside
    neighbor_rings: tuple       # per vertex: (5,) or (6,) int64, ccw cycle
    ring7: np.ndarray           # (V, 7) int64 padded rings [v, n1..n6]
    parent_pair: np.ndarray     # (V, 2) int64 edge endpoints, -1 for the base 12

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    @property
    def edge_count(self) -> int:
        return 30 * 4 ** self.level


def _base_icosahedron() -> tuple[np.ndarray, np.ndarray]:
    v = []
    for a in (-1.0, 1.0):
        for b in (-_PHI, _PHI):
            v.append((0.0, a, b))
    for a in (-1.0, 1.0):
        for b in (-_PHI, _PHI):
            v.append((b, 0.0, a))
    for a in (-1.0, 1.0):
        for b in (-_PHI, _PHI):
            v.append((a, b, 0.0))
    verts = np.array(v, dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    # Edges of the unnormalized solid have squared length 4; recover faces as
    # mutually adjacent triples, oriented so the outward normal points away
    # from the origin.
    d2 = np.sum((np.array(v)[:, None, :] - np.array(v)[None, :, :]) ** 2, axis=-1)
    adj = np.abs(d2 - 4.0) < 1e-9
    faces = []
    for i in range(12):
        for j in range(i + 1, 12):
            if not adj[i, j]:
                continue
            for k in range(j + 1, 12):
                if adj[i, k] and adj[j, k]:
                    tri = (i, j, k) if np.linalg.det(verts[[i, j, k]]) > 0 else (i, k, j)
                    faces.append(tri)
    return verts, np.array(faces, dtype=np.int64)


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split each face into four; midpoints are appended after the existing
    vertices in sorted-edge-key order, which yields the prefix property."""
    nv = vertices.shape[0]
    nf = faces.shape[0]
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)

    mids = vertices[uniq[:, 0]] + vertices[uniq[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_vertices = np.vstack([vertices, mids])

    m01 = inverse[:nf] + nv
    m12 = inverse[nf:2 * nf] + nv
    m20 = inverse[2 * nf:] + nv
    f0, f1, f2 = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.empty((4 * nf, 3), dtype=np.int64)
    new_faces[0::4] = np.stack([f0, m01, m20], axis=1)
    new_faces[1::4] = np.stack([m01, f1, m12], axis=1)
    new_faces[2::4] = np.stack([m20, m12, f2], axis=1)
    new_faces[3::4] = np.stack([m01, m12, m20], axis=1)
    return new_vertices, new_faces, uniq


def _build_rings(vertex_count: int, faces: np.ndarray) -> list[np.ndarray]:
    # For a ccw face (a, b, c), the neighbor after b when rotating ccw
    # around a is c; chaining these successors walks each ring in order.
    succ: list[dict] = [dict() for _ in range(vertex_count)]
    for a, b, c in faces:
        succ[a][b] = c
        succ[b][c] = a
        succ[c][a] = b
    rings = []
    for v in range(vertex_count):
        s = succ[v]
        start = min(s)
        ring = [start]
        nxt = s[start]
        while nxt != start:
            ring.append(nxt)
            nxt = s[nxt]
        rings.append(np.array(ring, dtype=np.int64))
    return rings


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _assemble(level: int, vertices: np.ndarray, faces: np.ndarray,
              parent_pair: np.ndarray) -> IcosphereMesh:
    rings = _build_rings(vertices.shape[0], faces)
    ring7 = np.empty((vertices.shape[0], 7), dtype=np.int64)
    for v, ring in enumerate(rings):
        ring7[v, 0] = v
        ring7[v, 1:1 + ring.size] = ring
        if ring.size == 5:
            ring7[v, 6] = ring[0]
    return IcosphereMesh(
        level=level,
        vertices=_freeze(vertices),
        faces=_freeze(faces),
        neighbor_rings=tuple(_freeze(r) for r in rings),
        ring7=_freeze(ring7),
        parent_pair=_freeze(parent_pair),
    )


@lru_cache(maxsize=None)
def _stack(level: int) -> tuple:
    if level == 0:
        vertices, faces = _base_icosahedron()
        parent = np.full((12, 2), -1, dtype=np.int64)
        return (_assemble(0, vertices, faces, parent),)
    lower = _stack(level - 1)
    prev = lower[-1]
    vertices, faces, new_parents = _subdivide(np.array(prev.vertices), np.array(prev.faces))
    parent = np.vstack([prev.parent_pair, new_parents])
    return lower + (_assemble(level, vertices, faces, parent),)


def build_icosphere(level: int) -> IcosphereMesh:
    """Level-`level` icosphere; cached, deterministic, immutable."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level must be in [0, {MAX_LEVEL}], got {level}")
    return _stack(level)[-1]


def mesh_stack(level: int) -> tuple[IcosphereMesh, ...]:
    """Meshes for levels 0..level inclusive (shared cached objects)."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level must be in [0, {MAX_LEVEL}], got {level}")
    return _stack(level)


def neighbor_ring(mesh: IcosphereMesh, v: int) -> np.ndarray:
    """Padded 7-slot ring [v, n1..n6]; pentagons repeat n1 in the last slot."""
    if not 0 <= v < mesh.vertex_count:
        raise IndexError(f"vertex {v} out of range for level-{mesh.level} mesh")
    return mesh.ring7[v]


def restriction_map(fine: IcosphereMesh, coarse: IcosphereMesh) -> list[np.ndarray]:
    """Per coarse vertex c: indices {c} + fine-mesh neighbors of c."""
    if fine.level != coarse.level + 1:
        raise ValueError(f"expected fine.level == coarse.level + 1, got {fine.level} and {coarse.level}")
    out = []
    for c in range(coarse.vertex_count):
        ring = fine.neighbor_rings[c]
        out.append(np.concatenate([[c], ring]).astype(np.int64))
    return out


def pooling_indices(fine: IcosphereMesh, coarse: IcosphereMesh) -> tuple[np.ndarray, np.ndarray]:
    """Padded gather indices and mean weights realizing restriction_map.

    Returns (idx, w), both (Vc, 7); pooled = sum(x[idx] * w, axis=1).
    Pentagonal rows put weight 0 on the pad slot.
    """
    sets = restriction_map(fine, coarse)
    vc = coarse.vertex_count
    idx = np.zeros((vc, 7), dtype=np.int64)
    w = np.zeros((vc, 7), dtype=np.float64)
    for c, members in enumerate(sets):
        idx[c, :members.size] = members
        idx[c, members.size:] = c
        w[c, :members.size] = 1.0 / members.size
    return idx, w


def upsample_indices(coarse: IcosphereMesh, fine: IcosphereMesh) -> np.ndarray:
    """(Vf, 2) sources; upsampled = mean of both source values.

    Prefix vertices list themselves twice (identity copy); midpoint vertices
    list their parent edge endpoints (linear interpolation).
    """
    if fine.level != coarse.level + 1:
        raise ValueError(f"expected fine.level == coarse.level + 1, got {fine.level} and {coarse.level}")
    vf = fine.vertex_count
    vc = coarse.vertex_count
    src = np.empty((vf, 2), dtype=np.int64)
    src[:vc, 0] = np.arange(vc)
    src[:vc, 1] = np.arange(vc)
    src[vc:] = fine.parent_pair[vc:]
    return src


def export_obj(mesh: IcosphereMesh, path) -> None:
    """ASCII OBJ export (v/f lines, 1-based indices)."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# icosphere level {mesh.level}: "
                 f"{mesh.vertex_count} vertices, {mesh.face_count} faces\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
