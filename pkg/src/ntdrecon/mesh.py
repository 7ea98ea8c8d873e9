"""Tetrahedral meshes with a tagged inclusion, boundary patches and normals."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DomainError,
    EmptyInclusionError,
    InclusionNotInteriorError,
    NonflatAssumptionError,
    SearchFailedError,
)
from .tensors import ALPHA_MIN, DELTA_MIN, ProbeFrame

OUTSIDE_D = 0
INSIDE_D = 1

NONFLAT_ANGLE = 1e-3
P2_DELTA_RATIO = 0.02

# faces of a tet (i, j, k) opposite to vertex l, listed as (i, j, k, l)
_TET_FACES = np.array([[1, 2, 3, 0], [0, 3, 2, 1], [0, 1, 3, 2], [0, 2, 1, 3]])


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    d = p[:, 1:] - p[:, :1]
    return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0


def _orient(vertices, tets):
    tets = np.array(tets, dtype=np.int64, copy=True)
    neg = _signed_volumes(vertices, tets) < 0
    tets[neg, 0], tets[neg, 1] = tets[neg, 1], tets[neg, 0].copy()
    return tets


def _boundary_faces(vertices, tets):
    """Faces belonging to exactly one tet, oriented outward.

    Returns (faces, owner_tet, unit_normals).
    """
    m = len(tets)
    faces = tets[:, _TET_FACES[:, :3]].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    once = counts[inv] == 1
    faces = faces[once]
    owner = np.repeat(np.arange(m), 4)[once]
    p = vertices[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    cen_f = p.mean(axis=1)
    cen_t = vertices[tets[owner]].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, cen_f - cen_t) < 0
    faces[flip, 1], faces[flip, 2] = faces[flip, 2], faces[flip, 1].copy()
    n[flip] *= -1
    n /= np.linalg.norm(n, axis=1)[:, None]
    order = np.lexsort(np.sort(faces, axis=1).T[::-1])
    return faces[order], owner[order], n[order]


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Immutable tetrahedral mesh of the domain.

    ``region`` tags each tet OUTSIDE_D / INSIDE_D; boundary facets carry a
    patch tag and an outward unit normal.  ``parent_vertex`` is set on
    sub-meshes and maps their vertices back to the parent mesh.
    """

    vertices: np.ndarray
    tets: np.ndarray
    region: np.ndarray
    facets: np.ndarray
    facet_patch: np.ndarray
    facet_normals: np.ndarray
    parent_vertex: np.ndarray | None = None
    parent_tet: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, vertices, tets, region=None, patch_of=None, **kw):
        """Build a mesh, orienting tets and extracting outward boundary facets.

        ``patch_of`` maps (facet_vertices, normals, centroids) to patch tags;
        all facets get patch 1 when it is omitted.
        """
        vertices = np.ascontiguousarray(vertices, dtype=float)
        tets = _orient(vertices, tets)
        if region is None:
            region = np.zeros(len(tets), dtype=np.int8)
        facets, _, normals = _boundary_faces(vertices, tets)
        if patch_of is None:
            patch = np.ones(len(facets), dtype=np.int64)
        else:
            patch = np.asarray(
                patch_of(facets, normals, vertices[facets].mean(axis=1)), dtype=np.int64
            )
        return cls(vertices, tets, np.asarray(region, dtype=np.int8), facets, patch, normals, **kw)

    # -- geometry -------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @cached_property
    def volumes(self):
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def tet_centroids(self):
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def facet_areas(self):
        p = self.vertices[self.facets]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def facet_centroids(self):
        return self.vertices[self.facets].mean(axis=1)

    @cached_property
    def boundary_vertices(self):
        return np.unique(self.facets)

    @cached_property
    def facet_owner(self):
        _, owner, _ = _boundary_faces(self.vertices, self.tets)
        return owner

    @cached_property
    def boundary_spacing(self):
        """Mean boundary edge length."""
        f = self.facets
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    @cached_property
    def max_tet_diameter(self):
        p = self.vertices[self.tets]
        d = [np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in itertools.combinations(range(4), 2)]
        return float(np.max(d))

    def total_volume(self):
        return float(self.volumes.sum())

    def has_inclusion(self):
        return bool(np.any(self.region == INSIDE_D))

    def patches(self):
        return sorted(int(p) for p in np.unique(self.facet_patch))

    def closure_defect(self):
        """|sum of area * normal| over the boundary (zero for a closed surface)."""
        return float(np.linalg.norm((self.facet_areas[:, None] * self.facet_normals).sum(axis=0)))

    def with_region(self, region):
        return TetMesh(
            self.vertices, self.tets, np.asarray(region, dtype=np.int8), self.facets,
            self.facet_patch, self.facet_normals, self.parent_vertex, self.parent_tet,
            dict(self.meta),
        )

    def validate(self):
        if np.any(self.volumes <= 0):
            raise DomainError("mesh has non-positive tet volumes")
        if np.any(np.abs(np.linalg.norm(self.facet_normals, axis=1) - 1) > 1e-12):
            raise DomainError("facet normals are not unit length")
        return self

    @cached_property
    def _locator_tree(self):
        return cKDTree(self.facet_centroids)

    @cached_property
    def _facet_radius(self):
        d = self.vertices[self.facets] - self.facet_centroids[:, None, :]
        return float(np.linalg.norm(d, axis=2).max())

    def locate_on_surface(self, origin, direction):
        """Intersect the line ``origin + t * direction`` with the boundary.

        Returns (point, facet index, barycentric weights) of the intersection
        with the smallest |t|.
        """
        origin = np.asarray(origin, dtype=float)
        direction = np.asarray(direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        off = self.facet_centroids - origin
        dist = np.linalg.norm(np.cross(off, direction), axis=1)
        idx = np.flatnonzero(dist <= 1.01 * self._facet_radius)
        p = self.vertices[self.facets[idx]]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        h = np.cross(direction, e2)
        det = np.einsum("ij,ij->i", e1, h)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = origin - p[:, 0]
        u = inv * np.einsum("ij,ij->i", s, h)
        qv = np.cross(s, e1)
        v = inv * (qv @ direction)
        t = inv * np.einsum("ij,ij->i", e2, qv)
        tol = 1e-10
        hit = ok & (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol)
        if not np.any(hit):
            raise SearchFailedError("line does not meet the boundary near the requested point")
        j = np.flatnonzero(hit)[np.argmin(np.abs(t[hit]))]
        bary = np.array([1 - u[j] - v[j], u[j], v[j]])
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum()
        return origin + t[j] * direction, int(idx[j]), bary

    def to_json_dict(self):
        return {
            "format": "ntdrecon-tetmesh",
            "version": 1,
            "vertices": self.vertices.tolist(),
            "tets": self.tets.tolist(),
            "region": self.region.tolist(),
            "facets": self.facets.tolist(),
            "facet_patch": self.facet_patch.tolist(),
            "facet_normals": self.facet_normals.tolist(),
        }


# -- construction ------------------------------------------------------

def _kuhn_tets(n, flip_octants=False):
    """Vertex grid indices and 6-tet Kuhn split of an n^3 cell grid.

    With ``flip_octants`` the split diagonal of each cell points away from
    the grid centre; faces stay conforming because shared faces see the same
    diagonal projection from both sides.
    """
    idx = np.arange((n + 1) ** 3).reshape(n + 1, n + 1, n + 1)
    cells = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), -1).reshape(-1, 3)
    tets = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, dtype=int)]
        for ax in perm:
            step = path[-1].copy()
            step[ax] = 1
            path.append(step)
        tets.append(np.array(path))
    tets = np.array(tets)  # (6, 4, 3) corner offsets
    out = []
    for t in tets:
        if flip_octants:
            # reflect the corner offsets per axis in lower-half cells
            lower = (cells < n // 2)[:, None, :]
            off = np.where(lower, 1 - t[None], t[None])
        else:
            off = np.broadcast_to(t[None], (len(cells), 4, 3))
        c = cells[:, None, :] + off
        out.append(idx[c[..., 0], c[..., 1], c[..., 2]])
    return idx, np.concatenate(out)


def _box_patch(extent):
    lo = np.zeros(3)
    hi = np.asarray(extent, dtype=float)

    def patch_of(facets, normals, centroids):
        tag = np.zeros(len(facets), dtype=np.int64)
        ax = np.argmax(np.abs(normals), axis=1)
        sign = np.sign(normals[np.arange(len(normals)), ax])
        tag = 1 + 2 * ax + (sign > 0)
        return tag

    return patch_of


def build_box_mesh(extent=(1.0, 1.0, 1.0), n=4):
    """Structured mesh of [0, a] x [0, b] x [0, c], six tets per cell.

    Boundary patches: 1/2 for the -x/+x faces, 3/4 for y, 5/6 for z.
    """
    if int(n) != n or n < 2:
        raise DomainError(f"box mesh needs n >= 2, got {n}")
    n = int(n)
    extent = np.asarray(extent, dtype=float)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise DomainError("extent must be three positive reals")
    g = np.linspace(0.0, 1.0, n + 1)
    x, y, z = np.meshgrid(g * extent[0], g * extent[1], g * extent[2], indexing="ij")
    verts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    _, tets = _kuhn_tets(n)
    mesh = TetMesh.from_arrays(verts, tets, patch_of=_box_patch(extent))
    mesh.meta.update({"kind": "box", "extent": extent.tolist(), "n": n})
    return mesh


def build_ball_mesh(radius=1.0, refinement=3, center=(0.0, 0.0, 0.0), n=None):
    """Ball mesh from a Kuhn-split cube [-1, 1]^3 pushed radially onto the ball.

    Each point x of the cube maps to ``x * |x|_inf / |x|_2``, so every cube
    shell |x|_inf = s lands exactly on the sphere of radius s.  The cube has
    ``2**refinement`` cells per axis unless ``n`` (even) is given.
    """
    if refinement < 1:
        raise DomainError("refinement must be >= 1")
    if n is None:
        n = 2 ** int(refinement)
    if n % 2:
        raise DomainError("cells per axis must be even")
    g = np.linspace(-1.0, 1.0, n + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    cube = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    inf = np.abs(cube).max(axis=1)
    two = np.linalg.norm(cube, axis=1)
    scale = np.divide(inf, two, out=np.zeros_like(inf), where=two > 0)
    verts = cube * scale[:, None]
    # shells of the cube map to exact spheres; renormalise to kill rounding
    shell = inf > 0
    verts[shell] *= (inf[shell] / np.linalg.norm(verts[shell], axis=1))[:, None]
    verts = radius * verts + np.asarray(center, dtype=float)
    _, tets = _kuhn_tets(n, flip_octants=True)
    mesh = TetMesh.from_arrays(verts, tets)
    mesh.meta.update({"kind": "ball", "radius": float(radius), "n": int(n),
                      "center": list(map(float, center))})
    return mesh


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "semi_axes", np.asarray(self.semi_axes, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        if self.semi_axes.shape != (3,) or np.any(self.semi_axes <= 0):
            raise DomainError("semi-axes must be three positive reals")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-12:
            raise DomainError("rotation is not orthogonal")

    @classmethod
    def sphere(cls, center, radius):
        return cls(center, (radius, radius, radius))

    def contains(self, pts):
        local = (np.asarray(pts) - self.center) @ self.rotation
        return np.sum((local / self.semi_axes) ** 2, axis=1) < 1.0

    def to_meta(self):
        return {"kind": "ellipsoid", "center": self.center.tolist(),
                "semi_axes": self.semi_axes.tolist(), "rotation": self.rotation.tolist()}

    def normal_at(self, pts):
        """Outward unit normal of the level set through each point."""
        local = (np.asarray(pts) - self.center) @ self.rotation
        grad = (local / self.semi_axes**2) @ self.rotation.T
        return grad / np.linalg.norm(grad, axis=1)[:, None]


@dataclass(frozen=True)
class AxisBox:
    """Axis-aligned box inclusion [lo, hi]; its faces are flat."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.lo.shape != (3,) or self.hi.shape != (3,) or np.any(self.hi <= self.lo):
            raise DomainError("box needs lo < hi in every coordinate")

    def contains(self, pts):
        pts = np.asarray(pts)
        return np.all((pts > self.lo) & (pts < self.hi), axis=1)

    def to_meta(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


def tag_inclusion(mesh, shape):
    """Tag tets whose centroid lies inside ``shape`` as INSIDE_D."""
    inside = shape.contains(mesh.tet_centroids)
    if not np.any(inside):
        raise EmptyInclusionError("inclusion contains no tet centroid")
    on_boundary = np.zeros(mesh.n_vertices, dtype=bool)
    on_boundary[mesh.boundary_vertices] = True
    if np.any(on_boundary[mesh.tets[inside]]):
        raise InclusionNotInteriorError("inclusion reaches the outer boundary layer")
    out = mesh.with_region(np.where(inside, INSIDE_D, OUTSIDE_D))
    out.meta["inclusion"] = shape.to_meta()
    return out


FEATURE_ANGLE = math.radians(30.0)


def smooth_patches(facets, normals, feature_angle=FEATURE_ANGLE):
    """Patch tags for the smooth pieces of a surface.

    Facets sharing an edge belong to the same patch unless their normals
    differ by more than ``feature_angle``; tags are numbered from 1 in
    facet order.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    nf = len(facets)
    e = np.concatenate([facets[:, [0, 1]], facets[:, [1, 2]], facets[:, [2, 0]]])
    e = np.sort(e, axis=1)
    owner = np.tile(np.arange(nf), 3)
    order = np.lexsort(e.T[::-1])
    e, owner = e[order], owner[order]
    i = np.flatnonzero(np.all(e[1:] == e[:-1], axis=1))
    a, b = owner[i], owner[i + 1]
    smooth = np.einsum("ij,ij->i", normals[a], normals[b]) > math.cos(feature_angle)
    graph = coo_matrix((np.ones(int(smooth.sum())), (a[smooth], b[smooth])), shape=(nf, nf))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(np.argsort(first))] = np.arange(1, len(first) + 1)
    return rank[labels]


def extract_inclusion_mesh(mesh):
    """Standalone mesh of the INSIDE_D tets; its boundary is the inclusion surface.

    The surface is split into smooth patches at sharp feature edges.
    """
    sel = np.flatnonzero(mesh.region == INSIDE_D)
    if sel.size == 0:
        raise EmptyInclusionError("mesh has no inclusion")
    used = np.unique(mesh.tets[sel])
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[used] = np.arange(len(used))
    sub = TetMesh.from_arrays(
        mesh.vertices[used], remap[mesh.tets[sel]],
        patch_of=lambda f, n, c: smooth_patches(f, n), parent_vertex=used, parent_tet=sel,
    )
    sub.meta.update({"kind": "inclusion", "parent": mesh.meta.get("kind")})
    return sub


# -- local refinement --------------------------------------------------

_EDGE_PAIRS = np.array(list(itertools.combinations(range(4), 2)))


def sphere_projection(center, radius):
    """Projector onto a sphere, for curved surfaces under refinement."""
    center = np.asarray(center, dtype=float)

    def project(x):
        d = x - center
        return center + radius * d / np.linalg.norm(d)

    return project


def _level(shape, pts):
    local = (np.asarray(pts) - shape.center) @ shape.rotation
    return np.sqrt(np.sum((local / shape.semi_axes) ** 2, axis=1))


def ellipsoid_projection(shape):
    """Radial projector onto an Ellipsoid (exact for spheres)."""
    rot = np.asarray(shape.rotation, dtype=float)
    c = np.asarray(shape.center, dtype=float)
    ax = np.asarray(shape.semi_axes, dtype=float)

    def project(x):
        y = rot.T @ (x - c)
        return c + rot @ (y / math.sqrt(np.sum((y / ax) ** 2)))

    return project


def _interface_faces(tets, region):
    faces = tets[:, _TET_FACES[:, :3]].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    owner = np.repeat(np.arange(len(tets)), 4)
    order = np.lexsort(key.T[::-1])
    key, owner = key[order], owner[order]
    same = np.all(key[1:] == key[:-1], axis=1)
    i = np.flatnonzero(same)
    cross = region[owner[i]] != region[owner[i + 1]]
    return key[i[cross]]


def refine_near(mesh, points, h_min, grading=0.2, max_rounds=60,
                boundary_projection=None, interface_projection=None):
    """Conforming a priori refinement around ``points``.

    Tets are bisected until their longest edge is at most
    max(h_min, grading * distance to the nearest point).  Bisection always
    splits the longest edge (ties broken by vertex indices), with closure
    so that no hanging nodes remain.  New midpoints on the outer boundary or
    on the inclusion interface are moved by the given projectors; by default
    a ball mesh projects onto its sphere and a tagged inclusion onto its
    ellipsoid when the tagged interface already conforms to it.  Region tags are inherited.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if h_min <= 0 or grading <= 0:
        raise DomainError("h_min and grading must be positive")
    if boundary_projection is None and mesh.meta.get("kind") == "ball":
        boundary_projection = sphere_projection(mesh.meta["center"], mesh.meta["radius"])
    inc = mesh.meta.get("inclusion")
    if interface_projection is None and inc and inc.get("kind") == "ellipsoid":
        shape = Ellipsoid(inc["center"], inc["semi_axes"], inc["rotation"])
        iv = np.unique(_interface_faces(mesh.tets, mesh.region))
        # only a conforming interface is kept on the ellipsoid
        if iv.size and np.allclose(_level(shape, mesh.vertices[iv]), 1.0, atol=1e-9):
            interface_projection = ellipsoid_projection(shape)
    verts = mesh.vertices.copy()
    nv = len(verts)
    tets = mesh.tets.copy()
    region = mesh.region.copy()
    surface = {}
    for f in np.sort(mesh.facets, axis=1):
        surface[tuple(f)] = 1
    if interface_projection is not None:
        for f in _interface_faces(tets, region):
            surface[tuple(f)] = 2
    surf_edge = {}
    for f, sid in surface.items():
        for a, b in ((f[0], f[1]), (f[0], f[2]), (f[1], f[2])):
            surf_edge[(a, b)] = sid
    proj = {1: boundary_projection, 2: interface_projection}
    midpoint = {}
    tree = cKDTree(pts)
    big = np.int64(1) << 32

    def edge_data(t, v):
        a = np.minimum(t[:, _EDGE_PAIRS[:, 0]], t[:, _EDGE_PAIRS[:, 1]])
        b = np.maximum(t[:, _EDGE_PAIRS[:, 0]], t[:, _EDGE_PAIRS[:, 1]])
        length = np.linalg.norm(v[a] - v[b], axis=2)
        key = a * big + b
        lmax = length.max(axis=1, keepdims=True)
        k = np.where(length == lmax, key, -1).argmax(axis=1)
        return key, key[np.arange(len(t)), k], lmax[:, 0]

    keys, longest, lmax = edge_data(tets, verts[:nv])
    for _ in range(max_rounds):
        dist, _ = tree.query(verts[:nv][tets].mean(axis=1))
        want = lmax > np.maximum(h_min, grading * dist)
        if not np.any(want):
            break
        marked = set(longest[want].tolist())
        hit = np.isin(keys, np.fromiter(marked, dtype=np.int64)).any(axis=1)
        while np.any(hit):
            # closure: a tet with any marked edge must split its longest one
            grow = set(longest[hit].tolist()) - marked
            while grow:
                marked |= grow
                hit |= np.isin(keys, np.fromiter(grow, dtype=np.int64)).any(axis=1)
                grow = set(longest[hit].tolist()) - marked
            split = np.flatnonzero(hit)
            new_tets, new_reg = [], []
            for ti in split:
                t = tets[ti]
                ek = int(longest[ti])
                a, b = divmod(ek, int(big))
                m = midpoint.get(ek)
                if m is None:
                    x = 0.5 * (verts[a] + verts[b])
                    sid = surf_edge.get((a, b))
                    if sid is not None and proj[sid] is not None:
                        x = proj[sid](x)
                    if nv == len(verts):
                        verts = np.concatenate([verts, np.empty_like(verts)])
                    m = nv
                    verts[m] = x
                    nv += 1
                    midpoint[ek] = m
                    if sid is not None:
                        del surf_edge[(a, b)]
                        surf_edge[(min(a, m), max(a, m))] = sid
                        surf_edge[(min(b, m), max(b, m))] = sid
                others = [int(w) for w in t if w != a and w != b]
                for c in others:
                    f = tuple(sorted((a, b, c)))
                    sid = surface.pop(f, None)
                    if sid is not None:
                        surface[tuple(sorted((a, m, c)))] = sid
                        surface[tuple(sorted((m, b, c)))] = sid
                        surf_edge[(min(m, c), max(m, c))] = sid
                new_tets += [np.where(t == b, m, t), np.where(t == a, m, t)]
                new_reg += [region[ti], region[ti]]
            keep = ~hit
            new_tets = np.array(new_tets, dtype=np.int64)
            nk, nl, nlm = edge_data(new_tets, verts[:nv])
            # untouched tets carry no marked edge; only children can
            new_hit = np.isin(nk, np.fromiter(marked, dtype=np.int64)).any(axis=1)
            tets = np.concatenate([tets[keep], new_tets])
            region = np.concatenate([region[keep], np.array(new_reg, dtype=region.dtype)])
            keys = np.concatenate([keys[keep], nk])
            longest = np.concatenate([longest[keep], nl])
            lmax = np.concatenate([lmax[keep], nlm])
            hit = np.concatenate([np.zeros(int(keep.sum()), dtype=bool), new_hit])
    else:
        raise DomainError("local refinement did not reach the requested spacing")
    v = verts[:nv].copy()
    old_tree, old_patch = mesh._locator_tree, mesh.facet_patch

    def patch_of(facets, normals, centroids):
        return old_patch[old_tree.query(centroids)[1]]

    out = TetMesh.from_arrays(v, tets, region, patch_of=patch_of)
    out.meta.update(mesh.meta)
    out.meta["refined_near"] = pts.tolist()
    return out.validate()


# -- probe frames ------------------------------------------------------

def local_frame(normal):
    """Rotation whose rows are (e1, e2, e3) with e3 = -normal.

    e1 is Gram-Schmidt of the global axis least aligned with the normal.
    """
    e3 = -np.asarray(normal, dtype=float)
    e3 = e3 / np.linalg.norm(e3)
    axis = np.eye(3)[int(np.argmin(np.abs(e3)))]
    e1 = axis - (axis @ e3) * e3
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e3, e1)
    return np.array([e1, e2, e3])


def patch_is_nonflat(normals, tol=NONFLAT_ANGLE):
    """True iff the largest angle between two normals exceeds ``tol``."""
    normals = np.asarray(normals, dtype=float)
    c = np.clip(normals @ normals[0], -1.0, 1.0)
    spread = float(np.max(np.arccos(c)))
    if spread > tol:
        return True
    if spread <= tol / 2:
        return False
    uniq = np.unique(np.round(normals, 14), axis=0)
    c = np.clip(uniq @ uniq.T, -1.0, 1.0)
    return bool(np.max(np.arccos(c)) > tol)


def _patch_rim_vertices(mesh, patch):
    mine = mesh.facet_patch == patch
    inner = set(np.unique(mesh.facets[mine]).tolist())
    other = set(np.unique(mesh.facets[~mine]).tolist())
    return np.array(sorted(inner & other), dtype=np.int64)


def select_probe_frame(
    mesh,
    patch,
    seed_point,
    search_radius=0.5,
    alpha_min=ALPHA_MIN,
    delta_min=DELTA_MIN,
    p2_delta_ratio=P2_DELTA_RATIO,
    rim_margin=None,
    targets=None,
    target_radius=None,
):
    """Pick P1 nearest the seed and tilted-normal points P2, P3 around it.

    ``patch=None`` uses the patch of the facet nearest the seed.
    Slopes are read from facet normals in the local frame at P1 (where the
    normal at P1 is -e3): alpha = -n2/n3, delta = -n1/n3 at P2 (with delta
    nearly zero there), and delta, beta at P3.  Among admissible facets the
    one with the largest slope is taken.  With ``targets`` (approximate
    P2, P3 locations, e.g. from a coarser mesh) the candidates for P2 and P3
    are the admissible facets within ``target_radius`` nearest to them.
    """
    seed = np.asarray(seed_point, dtype=float)
    if patch is None:
        patch = int(mesh.facet_patch[mesh._locator_tree.query(seed)[1]])
    mine = np.flatnonzero(mesh.facet_patch == patch)
    if mine.size == 0:
        raise DomainError(f"no facets in patch {patch}")
    normals = mesh.facet_normals[mine]
    if not patch_is_nonflat(normals):
        raise NonflatAssumptionError(f"patch {patch} is flat", stage="frame")
    cen = mesh.facet_centroids[mine]
    i1 = int(np.argmin(np.linalg.norm(cen - seed, axis=1)))
    p1 = cen[i1]
    rim = _patch_rim_vertices(mesh, patch)
    margin = search_radius if rim_margin is None else rim_margin
    if rim.size and np.min(np.linalg.norm(mesh.vertices[rim] - p1, axis=1)) < margin:
        raise SearchFailedError("P1 lies within one search radius of the patch rim", stage="frame")
    rot = local_frame(normals[i1])
    dist = np.linalg.norm(cen - p1, axis=1)
    nl = normals @ rot.T
    near = (dist <= search_radius) & (nl[:, 2] < -1e-3)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = -nl[:, 1] / nl[:, 2]
        delta = -nl[:, 0] / nl[:, 2]
    if targets is not None:
        t2, t3 = (np.asarray(t, dtype=float) for t in targets)
        rad = search_radius / 10 if target_radius is None else target_radius
        tilted = nl[:, 2] < -1e-3
        near2 = tilted & (np.linalg.norm(cen - t2, axis=1) <= rad)
        near3 = tilted & (np.linalg.norm(cen - t3, axis=1) <= rad)
    else:
        near2 = near3 = near
    ok2 = near2 & (np.abs(alpha) >= alpha_min) & (np.abs(delta) <= p2_delta_ratio * np.abs(alpha))
    if not np.any(ok2):
        raise SearchFailedError("no admissible P2 within the search radius", stage="frame")
    if targets is not None:
        i2 = int(np.flatnonzero(ok2)[np.argmin(np.linalg.norm(cen[ok2] - t2, axis=1))])
    else:
        i2 = int(np.flatnonzero(ok2)[np.argmax(np.abs(alpha[ok2]))])
    ok3 = near3 & (np.abs(delta) >= delta_min)
    if not np.any(ok3):
        raise SearchFailedError("no admissible P3 within the search radius", stage="frame")
    if targets is not None:
        i3 = int(np.flatnonzero(ok3)[np.argmin(np.linalg.norm(cen[ok3] - t3, axis=1))])
    else:
        i3 = int(np.flatnonzero(ok3)[np.argmax(np.abs(delta[ok3]) - np.abs(alpha[ok3]))])
    return ProbeFrame(
        p1=p1,
        p2=cen[i2],
        p3=cen[i3],
        alpha=float(alpha[i2]),
        beta=float(alpha[i3]),
        delta=float(delta[i3]),
        normals=(normals[i1], normals[i2], normals[i3]),
        rotation=rot,
        facets=(int(mine[i1]), int(mine[i2]), int(mine[i3])),
        delta_at_p2=float(delta[i2]),
        alpha_min=alpha_min,
        delta_min=delta_min,
    )


# -- import / export ---------------------------------------------------

def save_json(mesh, path):
    with open(path, "w") as fh:
        json.dump(mesh.to_json_dict(), fh)


def load_json(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != "ntdrecon-tetmesh":
        raise DomainError("not an ntdrecon mesh document")
    return TetMesh(
        np.array(d["vertices"], dtype=float),
        np.array(d["tets"], dtype=np.int64),
        np.array(d["region"], dtype=np.int8),
        np.array(d["facets"], dtype=np.int64),
        np.array(d["facet_patch"], dtype=np.int64),
        np.array(d["facet_normals"], dtype=float),
    )


def read_gmsh(path, inclusion_tags=(2,)):
    """Read a Gmsh MSH 2.2 ASCII file (4-node tets, 3-node triangles).

    Tets whose physical tag is in ``inclusion_tags`` become INSIDE_D.
    Triangle physical tags become boundary patch tags; boundary facets not
    listed in the file get patch 0.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    pos = {ln: i for i, ln in enumerate(lines) if ln.startswith("$")}
    if "$MeshFormat" not in pos:
        raise DomainError("missing $MeshFormat section")
    version = lines[pos["$MeshFormat"] + 1].split()
    if not version[0].startswith("2") or version[1] != "0":
        raise DomainError(f"unsupported MSH format {version}")
    i = pos["$Nodes"] + 1
    nn = int(lines[i])
    tags = np.empty(nn, dtype=np.int64)
    coords = np.empty((nn, 3))
    for k in range(nn):
        parts = lines[i + 1 + k].split()
        tags[k] = int(parts[0])
        coords[k] = [float(v) for v in parts[1:4]]
    node_index = {int(t): k for k, t in enumerate(tags)}
    i = pos["$Elements"] + 1
    ne = int(lines[i])
    tets, tet_phys, tris, tri_phys = [], [], [], []
    for k in range(ne):
        parts = [int(v) for v in lines[i + 1 + k].split()]
        etype, ntags = parts[1], parts[2]
        phys = parts[3] if ntags > 0 else 0
        nodes = [node_index[v] for v in parts[3 + ntags:]]
        if etype == 4:
            tets.append(nodes)
            tet_phys.append(phys)
        elif etype == 2:
            tris.append(nodes)
            tri_phys.append(phys)
    if not tets:
        raise DomainError("no tetrahedra in mesh file")
    region = np.where(np.isin(tet_phys, list(inclusion_tags)), INSIDE_D, OUTSIDE_D)
    lookup = {tuple(sorted(t)): p for t, p in zip(tris, tri_phys)}

    def patch_of(facets, normals, centroids):
        return [lookup.get(tuple(sorted(f)), 0) for f in facets.tolist()]

    mesh = TetMesh.from_arrays(coords, np.array(tets), region=region, patch_of=patch_of)
    mesh.meta.update({"kind": "gmsh", "source": str(path)})
    return mesh


def write_gmsh(mesh, path, outside_tag=1, inside_tag=2):
    """Write MSH 2.2 ASCII; coordinates are printed with round-trip precision."""
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    out += [f"{k + 1} {x!r} {y!r} {z!r}" for k, (x, y, z) in enumerate(mesh.vertices.tolist())]
    out += ["$EndNodes", "$Elements", str(len(mesh.facets) + len(mesh.tets))]
    eid = 1
    for f, p in zip(mesh.facets.tolist(), mesh.facet_patch.tolist()):
        out.append(f"{eid} 2 2 {p} {p} {f[0] + 1} {f[1] + 1} {f[2] + 1}")
        eid += 1
    for t, r in zip(mesh.tets.tolist(), mesh.region.tolist()):
        tag = inside_tag if r == INSIDE_D else outside_tag
        out.append(f"{eid} 4 2 {tag} {tag} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}")
        eid += 1
    out.append("$EndElements")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
