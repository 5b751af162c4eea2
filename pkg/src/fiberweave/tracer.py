"""Two-scale fiber rendering: BVH over capsule primitives, periodic patch
instancing, and the full / approximate renderers.

Coordinate conventions
----------------------
The macro scene lives in centimetres. Fiber geometry lives in *patch cells*
(one weave cell = one warp-weft crossing); a single uniform scale
``cell_cm`` converts between the two, so directions and therefore scattering
angles are preserved exactly. The fabric plane is ``z = 0`` in patch space
with the weave repeating with period ``patch.extent`` in x and y.

Sampling determinism: every pixel sample derives its random stream from
``(seed, pixel_index, sample_index)`` only, and pixels accumulate their own
samples sequentially, so rendered images are bitwise identical for any
thread count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .bsdf import BsdfParams, compile_appearance
from .fibers import Patch
from .weave import CaptureConfig, ConfigError, FabricConfig

_LEAF_SIZE = 4
_LUMA = np.array([0.2126, 0.7152, 0.0722])


# ---------------------------------------------------------------------------
# primitive arrays and BVH
# ---------------------------------------------------------------------------

def patch_primitives(patch: Patch):
    """Capsule arrays (p0, p1, radius, curve, axis) from a fiber patch."""
    v = patch.vertices
    last_rows = patch.curve_first[1:] - 1
    keep = np.ones(patch.n_vertices, dtype=bool)
    keep[last_rows] = False
    a_idx = np.nonzero(keep)[0]
    p0 = v[a_idx]
    p1 = v[a_idx + 1]
    counts = np.diff(patch.curve_first) - 1
    curve = np.repeat(np.arange(patch.n_curves, dtype=np.int32),
                      counts).astype(np.int32)
    radius = patch.curve_radius[curve]
    axis = patch.curve_axis[curve].astype(np.uint8)
    return p0, p1, radius, curve, axis


@dataclass(frozen=True)
class Bvh:
    """Flattened median-split BVH over (possibly ghost-extended) capsules."""

    node_bounds: np.ndarray   # (N, 6) [xmin ymin zmin xmax ymax zmax]
    node_left: np.ndarray     # (N,) int32, < 0 for leaves
    node_right: np.ndarray    # (N,) int32
    node_start: np.ndarray    # (N,) int32 into perm (leaves)
    node_count: np.ndarray    # (N,) int32
    perm: np.ndarray          # (P,) int32 primitive order
    p0: np.ndarray            # (P, 3)
    p1: np.ndarray            # (P, 3)
    radius: np.ndarray        # (P,)
    curve: np.ndarray         # (P,) int32
    axis: np.ndarray          # (P,) uint8
    src: np.ndarray           # (P,) int32 index of the un-shifted primitive
    shift: np.ndarray         # (P, 2) int32 tile shift applied to the copy
    extent: tuple[float, float]
    z_range: tuple[float, float]

    @property
    def n_prims(self) -> int:
        return self.p0.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.node_bounds.shape[0]

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, f).nbytes for f in (
            "node_bounds", "node_left", "node_right", "node_start",
            "node_count", "perm", "p0", "p1", "radius", "curve", "axis",
            "src", "shift"))


def _prim_bounds(p0, p1, radius):
    r = radius[:, None]
    lo = np.minimum(p0, p1) - r
    hi = np.maximum(p0, p1) + r
    return lo, hi


def _ghost_extend(p0, p1, radius, curve, axis, extent):
    """Append shifted copies of primitives that overhang tile borders.

    A copy shifted by (i, j) patch extents is kept when its bounding box
    still overlaps the core tile box [0, ex] x [0, ey]; during traversal a
    tile's BVH then contains every primitive of the infinite tiling that
    intersects that tile.
    """
    ex, ey = extent
    lo, hi = _prim_bounds(p0, p1, radius)
    n = p0.shape[0]
    parts_p0 = [p0]
    parts_p1 = [p1]
    parts_r = [radius]
    parts_c = [curve]
    parts_a = [axis]
    parts_src = [np.arange(n, dtype=np.int32)]
    parts_shift = [np.zeros((n, 2), dtype=np.int32)]
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            if i == 0 and j == 0:
                continue
            dx = i * ex
            dy = j * ey
            inside = ((lo[:, 0] + dx <= ex) & (hi[:, 0] + dx >= 0.0) &
                      (lo[:, 1] + dy <= ey) & (hi[:, 1] + dy >= 0.0))
            if not inside.any():
                continue
            sel = np.nonzero(inside)[0]
            off = np.array([dx, dy, 0.0])
            parts_p0.append(p0[sel] + off)
            parts_p1.append(p1[sel] + off)
            parts_r.append(radius[sel])
            parts_c.append(curve[sel])
            parts_a.append(axis[sel])
            parts_src.append(sel.astype(np.int32))
            sh = np.empty((sel.size, 2), dtype=np.int32)
            sh[:, 0] = i
            sh[:, 1] = j
            parts_shift.append(sh)
    return (np.vstack(parts_p0), np.vstack(parts_p1),
            np.concatenate(parts_r), np.concatenate(parts_c),
            np.concatenate(parts_a), np.concatenate(parts_src),
            np.vstack(parts_shift))


def _build_tree(lo, hi):
    """Median-split tree over primitive boxes; returns flat node arrays."""
    n = lo.shape[0]
    cent = 0.5 * (lo + hi)
    perm = np.arange(n, dtype=np.int32)
    bounds = []
    left = []
    right = []
    start = []
    count = []

    def alloc():
        bounds.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(bounds) - 1

    stack = [(alloc(), 0, n)]
    while stack:
        node, a, b = stack.pop()
        idx = perm[a:b]
        blo = lo[idx].min(axis=0)
        bhi = hi[idx].max(axis=0)
        bounds[node] = np.concatenate([blo, bhi])
        if b - a <= _LEAF_SIZE:
            start[node] = a
            count[node] = b - a
            continue
        c = cent[idx]
        ax = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, ax], kind="stable")
        perm[a:b] = idx[order]
        mid = (a + b) // 2
        lchild = alloc()
        rchild = alloc()
        left[node] = lchild
        right[node] = rchild
        stack.append((lchild, a, mid))
        stack.append((rchild, mid, b))
    return (np.array(bounds), np.array(left, dtype=np.int32),
            np.array(right, dtype=np.int32),
            np.array(start, dtype=np.int32),
            np.array(count, dtype=np.int32), perm)


def build_bvh(patch: Patch, *, tiled: bool = True) -> Bvh:
    """Build the acceleration structure for a patch.

    With ``tiled=True`` (the default) primitives overhanging the patch
    borders are duplicated into neighbouring tiles so the periodic
    traversal sees a seamless infinite weave.
    """
    if patch.n_capsules == 0:
        raise ValueError("cannot build a BVH over an empty patch")
    p0, p1, radius, curve, axis = patch_primitives(patch)
    ex, ey = patch.extent
    if tiled:
        p0, p1, radius, curve, axis, src, shift = _ghost_extend(
            p0, p1, radius, curve, axis, (ex, ey))
    else:
        src = np.arange(p0.shape[0], dtype=np.int32)
        shift = np.zeros((p0.shape[0], 2), dtype=np.int32)
    p0 = np.ascontiguousarray(p0, dtype=np.float64)
    p1 = np.ascontiguousarray(p1, dtype=np.float64)
    radius = np.ascontiguousarray(radius, dtype=np.float64)
    lo, hi = _prim_bounds(p0, p1, radius)
    nb, nl, nr, ns, nc, perm = _build_tree(lo, hi)
    zlo = float(lo[:, 2].min()) - 1e-9
    zhi = float(hi[:, 2].max()) + 1e-9
    return Bvh(node_bounds=np.ascontiguousarray(nb),
               node_left=nl, node_right=nr, node_start=ns, node_count=nc,
               perm=perm, p0=p0, p1=p1, radius=radius,
               curve=np.ascontiguousarray(curve, dtype=np.int32),
               axis=np.ascontiguousarray(axis, dtype=np.uint8),
               src=src, shift=shift,
               extent=(float(ex), float(ey)), z_range=(zlo, zhi))


# ---------------------------------------------------------------------------
# macro scene and capture transforms
# ---------------------------------------------------------------------------

def _orthonormal_frame(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    hint = np.array([0.0, 1.0, 0.0])
    if abs(float(n @ hint)) > 0.999:
        hint = np.array([1.0, 0.0, 0.0])
    t = np.cross(hint, n)
    t = t / np.linalg.norm(t)
    b = np.cross(n, t)
    return t, b, n


@dataclass(frozen=True)
class MacroScene:
    """Carrier surface for the fiber patch: infinite plane or triangle mesh.

    ``cell_cm`` is the physical size of one weave cell; it converts world
    centimetres to patch cells (uniformly, so angles are preserved).
    """

    kind: str                     # "plane" | "mesh"
    cell_cm: float
    origin: np.ndarray            # plane point (cm)
    frame: np.ndarray             # (3, 3) rows = tangent, bitangent, normal
    extent_cm: tuple[float, float]
    vertices: np.ndarray | None = None   # (V, 3) cm
    faces: np.ndarray | None = None      # (F, 3) int
    uv: np.ndarray | None = None         # (F, 3, 2) patch-cell units

    @staticmethod
    def plane_from(capture: CaptureConfig, fabric) -> "MacroScene":
        """Microscope rig: the fabric plane from a capture configuration."""
        cx, cy = fabric.cell_size_cm
        if abs(cx - cy) > 1e-9 * max(cx, cy):
            warnings.warn(
                "anisotropic weave cells (%.4g x %.4g cm); rendering uses "
                "their mean, which slightly stretches the pattern"
                % (cx, cy), stacklevel=2)
        t, b, n = _orthonormal_frame(capture.plane_normal)
        return MacroScene(
            kind="plane",
            cell_cm=0.5 * (cx + cy),
            origin=np.asarray(capture.plane_origin, dtype=np.float64),
            frame=np.vstack([t, b, n]),
            extent_cm=tuple(capture.plane_extent_cm),
        )

    @staticmethod
    def mesh_from(vertices, faces, uv, cell_cm: float) -> "MacroScene":
        """Draped fabric: triangle mesh with per-corner patch-cell UVs."""
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        uv = np.ascontiguousarray(uv, dtype=np.float64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if uv.shape != (faces.shape[0], 3, 2):
            raise ValueError("uv must be (F, 3, 2) matching faces")
        lo = vertices.min(axis=0)
        hi = vertices.max(axis=0)
        return MacroScene(
            kind="mesh", cell_cm=float(cell_cm),
            origin=lo, frame=np.eye(3),
            extent_cm=(float(hi[0] - lo[0]), float(hi[1] - lo[1])),
            vertices=vertices, faces=faces, uv=uv)

    def to_cells(self, p) -> np.ndarray:
        """World point (cm) -> patch-cell coordinates (plane scenes)."""
        p = np.asarray(p, dtype=np.float64)
        return (self.frame @ (p - self.origin)) / self.cell_cm

    def dir_to_cells(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return self.frame @ d


def scene_for(cfg: FabricConfig) -> MacroScene:
    """The default microscope-rig scene for a fabric configuration."""
    return MacroScene.plane_from(cfg.capture, cfg.fabric)


@dataclass(frozen=True)
class MicroHit:
    """A fiber intersection in patch space."""

    position: np.ndarray      # (3,) patch cells, scene (untiled) coords
    tangent: np.ndarray       # (3,) unit fiber direction
    h: float                  # signed offset across the fiber in [-1, 1]
    axis: int                 # 0 = weft, 1 = warp
    t: float                  # ray parameter (cells)
    prim: int                 # primitive index into the (ghosted) arrays
    tile: tuple[int, int]     # tile the hit was found in

    def __post_init__(self):
        if not (self.t > 0.0):
            raise ValueError("hit distance must be positive")
        if abs(self.h) > 1.0 + 1e-12:
            raise ValueError("fiber offset |h| must be <= 1")


@dataclass(frozen=True)
class TransformedLight:
    """Point light expressed in patch-cell coordinates."""

    position: np.ndarray      # (3,) cells
    intensity: np.ndarray     # (3,) radiant intensity / cell^2

    @staticmethod
    def from_capture(capture: CaptureConfig, scene: MacroScene):
        pos = scene.to_cells(capture.light_position)
        inten = (np.asarray(capture.light_intensity, dtype=np.float64)
                 / scene.cell_cm ** 2)
        return TransformedLight(position=pos, intensity=inten)


@dataclass(frozen=True)
class CompiledAppearance:
    """Per-axis scattering tables in the layout the kernels consume."""

    sigma: np.ndarray    # (2, 3) absorption per unit length
    eta: np.ndarray      # (2,)
    variance: np.ndarray  # (2, 4) longitudinal lobe variances
    az_scale: np.ndarray  # (2,) azimuthal logistic scale
    k_d: np.ndarray      # (2, 3) diffuse albedo
    w_d: float


def compile_scene_appearance(appearance) -> CompiledAppearance:
    rows = [compile_appearance(appearance.weft),
            compile_appearance(appearance.warp)]
    return CompiledAppearance(
        sigma=np.ascontiguousarray([r.sigma_a for r in rows]),
        eta=np.ascontiguousarray([r.eta for r in rows]),
        variance=np.ascontiguousarray([r.v for r in rows]),
        az_scale=np.ascontiguousarray([r.s for r in rows]),
        k_d=np.ascontiguousarray([appearance.weft.k_d,
                                  appearance.warp.k_d]),
        w_d=float(appearance.shared.w_d),
    )


def _bvh_args(bvh: Bvh):
    return (bvh.node_bounds, bvh.node_left, bvh.node_right,
            bvh.node_start, bvh.node_count, bvh.perm,
            bvh.p0, bvh.p1, bvh.radius, bvh.curve)


def _tile_args(bvh: Bvh):
    ex, ey = bvh.extent
    zlo, zhi = bvh.z_range
    return ex, ey, zlo, zhi


def canonical_hit(bvh: Bvh, prim: int, tile_x: int, tile_y: int):
    """Map a (possibly ghost) primitive hit to its source tile and prim."""
    return (int(bvh.src[prim]),
            tile_x + int(bvh.shift[prim, 0]),
            tile_y + int(bvh.shift[prim, 1]))


def query_rays(bvh: Bvh, origins, directions, *, mode: str = "bvh",
               tmin: float = 1e-12):
    """Batch nearest-hit query in patch-cell coordinates.

    ``mode`` selects the traversal: "bvh" and "brute" intersect the
    primitive list as-is, "tiled" marches the periodic tiling.  Returns
    ``(t, prim)`` arrays, plus ``(tile_x, tile_y)`` for "tiled"; misses
    carry ``prim == -1``.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    if origins.ndim != 2 or origins.shape[1] != 3 \
            or origins.shape != directions.shape:
        raise ValueError("origins and directions must both be (N, 3)")
    n = origins.shape[0]
    t = np.empty(n)
    prim = np.empty(n, np.int64)
    if mode == "bvh":
        kernels.batch_nearest_bvh(*_bvh_args(bvh), origins, directions,
                                  tmin, t, prim)
        return t, prim
    if mode == "brute":
        kernels.batch_nearest_brute(bvh.p0, bvh.p1, bvh.radius, bvh.curve,
                                    origins, directions, tmin, t, prim)
        return t, prim
    if mode == "tiled":
        tile_x = np.empty(n, np.int64)
        tile_y = np.empty(n, np.int64)
        kernels.batch_tiled(*_bvh_args(bvh), *_tile_args(bvh),
                            origins, directions, tmin, t, prim,
                            tile_x, tile_y)
        return t, prim, tile_x, tile_y
    raise ValueError(f"unknown query mode: {mode!r}")


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraRig:
    """Pinhole camera in patch-cell coordinates."""

    origin: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    tan_x: float
    tan_y: float

    @staticmethod
    def from_capture(capture: CaptureConfig, scene: MacroScene,
                     width: int, height: int) -> "CameraRig":
        pos = scene.to_cells(capture.camera_position)
        look = scene.to_cells(capture.camera_look_at)
        fwd = look - pos
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ConfigError("camera position and look-at coincide")
        fwd = fwd / n
        hint = np.array([0.0, 1.0, 0.0])
        if abs(float(fwd @ hint)) > 0.999:
            hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        tan_half = math.tan(math.radians(capture.fov_deg) * 0.5)
        return CameraRig(origin=pos, right=right, up=up, forward=fwd,
                         tan_x=tan_half * (width / height), tan_y=tan_half)

    def rays(self, width: int, height: int, jitter: np.ndarray | None = None):
        """Vectorized pixel rays; jitter (H, W, 2) in [0,1), default centre.

        Matches the kernel camera math exactly (same expressions).
        """
        xs = np.arange(width, dtype=np.float64)
        ys = np.arange(height, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        if jitter is None:
            jx = np.full_like(gx, 0.5)
            jy = np.full_like(gy, 0.5)
        else:
            jx = jitter[..., 0]
            jy = jitter[..., 1]
        su = (2.0 * (gx + jx) / width - 1.0) * self.tan_x
        sv = (1.0 - 2.0 * (gy + jy) / height) * self.tan_y
        d = (self.forward[None, None, :]
             + su[..., None] * self.right[None, None, :]
             + sv[..., None] * self.up[None, None, :])
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, d


# ---------------------------------------------------------------------------
# public tracing API
# ---------------------------------------------------------------------------

def intersect_tiled(origin, direction, scene: MacroScene, patch: Patch,
                    bvh: Bvh) -> MicroHit | None:
    """Nearest fiber hit of a world-space ray through the periodic patch.

    Returns ``None`` when the ray misses the fiber slab entirely.
    """
    if scene.kind != "plane":
        raise NotImplementedError(
            "single-ray queries are defined for plane scenes")
    o = scene.to_cells(origin)
    d = scene.dir_to_cells(direction)
    d = d / np.linalg.norm(d)
    return _intersect_cells(o, d, bvh)


def _intersect_cells(o, d, bvh: Bvh) -> MicroHit | None:
    ex, ey, zlo, zhi = _tile_args(bvh)
    t, praw, qix, qiy = kernels.ray_tiled(
        *_bvh_args(bvh), ex, ey, zlo, zhi,
        o[0], o[1], o[2], d[0], d[1], d[2], 1e-7, kernels.MISS)
    if praw < 0:
        return None
    pos = o + t * d
    local = pos - np.array([qix * ex, qiy * ey, 0.0])
    wo = -d
    (ok, tx, ty, tz, zx, zy, zz, mx, my, mz, hoff,
     sin_to) = kernels._hit_frame(int(praw), bvh.p0, bvh.p1, bvh.radius,
                                  local[0], local[1], local[2],
                                  wo[0], wo[1], wo[2])
    if not ok:
        return None
    return MicroHit(position=pos, tangent=np.array([tx, ty, tz]),
                    h=float(hoff), axis=int(bvh.axis[praw]), t=float(t),
                    prim=int(praw), tile=(int(qix), int(qiy)))


def trace_micro(hit: MicroHit, wo, light: TransformedLight, rng,
                appearance, bvh: Bvh, max_depth: int = 64,
                n_paths: int = 1) -> np.ndarray:
    """Path-traced radiance (RGB) leaving ``hit`` toward ``wo``.

    ``rng`` seeds the paths; averaging over ``n_paths`` shares one call.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    comp = (appearance if isinstance(appearance, CompiledAppearance)
            else compile_scene_appearance(appearance))
    seed = int(rng.integers(0, 2 ** 62)) if hasattr(rng, "integers") \
        else int(rng)
    wo = np.asarray(wo, dtype=np.float64)
    out = np.zeros(3)
    ex, ey, zlo, zhi = _tile_args(bvh)
    kernels.trace_micro_kernel(
        *_bvh_args(bvh), bvh.axis, ex, ey, zlo, zhi,
        comp.sigma, comp.eta, comp.variance, comp.az_scale,
        light.position[0], light.position[1], light.position[2],
        light.intensity[0], light.intensity[1], light.intensity[2],
        hit.position[0], hit.position[1], hit.position[2],
        hit.prim, hit.tile[0], hit.tile[1],
        wo[0], wo[1], wo[2], max_depth, seed, n_paths, out)
    return out


def _mesh_tri_arrays(scene: MacroScene):
    v = scene.vertices
    f = scene.faces
    tv0 = v[f[:, 0]]
    te1 = v[f[:, 1]] - tv0
    te2 = v[f[:, 2]] - tv0
    n = np.cross(te1, te2)
    nl = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(nl < 1e-14):
        raise ValueError("mesh contains degenerate faces")
    n = n / nl
    uv0 = scene.uv[:, 0, :]
    du1 = scene.uv[:, 1, :] - uv0
    du2 = scene.uv[:, 2, :] - uv0
    det = du1[:, 0] * du2[:, 1] - du2[:, 0] * du1[:, 1]
    det = np.where(np.abs(det) < 1e-14, 1e-14, det)
    dpdu = (du2[:, 1:2] * te1 - du1[:, 1:2] * te2) / det[:, None]
    t = dpdu - np.sum(dpdu * n, axis=1, keepdims=True) * n
    tl = np.linalg.norm(t, axis=1, keepdims=True)
    bad = tl[:, 0] < 1e-12
    if np.any(bad):
        alt = np.cross(n[bad], np.array([0.0, 0.0, 1.0]))
        alt_l = np.linalg.norm(alt, axis=1, keepdims=True)
        alt = np.where(alt_l > 1e-12, alt / np.maximum(alt_l, 1e-12),
                       np.array([1.0, 0.0, 0.0]))
        t[bad] = alt
        tl = np.linalg.norm(t, axis=1, keepdims=True)
    t = t / tl
    b = np.cross(n, t)
    c = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return (c(tv0), c(te1), c(te2), c(t), c(b), c(n),
            c(uv0), c(du1), c(du2))


def render(scene: MacroScene, patch: Patch, capture: CaptureConfig,
           spp: int, max_depth: int = 64, *, seed: int = 0,
           bvh: Bvh | None = None, appearance=None,
           macro_depth: int = 2) -> np.ndarray:
    """Full two-scale path-traced image, linear RGB (H, W, 3).

    ``appearance`` defaults to the capture's fabric appearance and may be
    an ``AppearanceSettings`` or a precompiled ``CompiledAppearance``.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if appearance is None:
        raise ValueError("appearance settings are required")
    comp = (appearance if isinstance(appearance, CompiledAppearance)
            else compile_scene_appearance(appearance))
    if bvh is None:
        bvh = build_bvh(patch)
    w, h = capture.image_size
    img = np.zeros((h, w, 3))
    cam = CameraRig.from_capture(capture, scene, w, h)
    ex, ey, zlo, zhi = _tile_args(bvh)
    if scene.kind == "plane":
        light = TransformedLight.from_capture(capture, scene)
        kernels.render_full_kernel(
            *_bvh_args(bvh), bvh.axis, ex, ey, zlo, zhi,
            comp.sigma, comp.eta, comp.variance, comp.az_scale,
            light.position[0], light.position[1], light.position[2],
            light.intensity[0], light.intensity[1], light.intensity[2],
            cam.origin, cam.right, cam.up, cam.forward,
            cam.tan_x, cam.tan_y,
            int(spp), int(seed), int(max_depth),
            float(capture.exposure), img)
    else:
        tri = _mesh_tri_arrays(scene)
        lp = np.asarray(capture.light_position, dtype=np.float64)
        li = (np.asarray(capture.light_intensity, dtype=np.float64)
              / scene.cell_cm ** 2)
        cam_w = CameraRig.from_capture(
            capture, MacroScene(kind="plane", cell_cm=1.0,
                                origin=np.zeros(3), frame=np.eye(3),
                                extent_cm=scene.extent_cm),
            w, h)
        kernels.render_mesh_kernel(
            *_bvh_args(bvh), bvh.axis, ex, ey, zlo, zhi,
            comp.sigma, comp.eta, comp.variance, comp.az_scale,
            *tri,
            lp[0], lp[1], lp[2], li[0], li[1], li[2],
            1.0 / scene.cell_cm,
            cam_w.origin, cam_w.right, cam_w.up, cam_w.forward,
            cam_w.tan_x, cam_w.tan_y,
            int(spp), int(seed), int(max_depth), int(macro_depth),
            float(capture.exposure), img)
    return img


def render_approx(scene: MacroScene, patch: Patch, capture: CaptureConfig,
                  spp: int, *, seed: int = 0, bvh: Bvh | None = None,
                  appearance=None, supersample: int = 2) -> np.ndarray:
    """Fast forward pass: primary visibility, one shadow ray, fiber lobe
    plus diffuse blend, rendered at ``supersample`` x resolution and
    box-filtered down."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    if scene.kind != "plane":
        raise NotImplementedError("approximate rendering expects the "
                                  "microscope plane rig")
    if appearance is None:
        raise ValueError("appearance settings are required")
    comp = (appearance if isinstance(appearance, CompiledAppearance)
            else compile_scene_appearance(appearance))
    if bvh is None:
        bvh = build_bvh(patch)
    w, h = capture.image_size
    ws = w * supersample
    hs = h * supersample
    img = np.zeros((hs, ws, 3))
    cam = CameraRig.from_capture(capture, scene, ws, hs)
    light = TransformedLight.from_capture(capture, scene)
    ex, ey, zlo, zhi = _tile_args(bvh)
    kernels.render_approx_kernel(
        *_bvh_args(bvh), bvh.axis, ex, ey, zlo, zhi,
        comp.sigma, comp.eta, comp.variance, comp.az_scale,
        comp.k_d, comp.w_d,
        light.position[0], light.position[1], light.position[2],
        light.intensity[0], light.intensity[1], light.intensity[2],
        cam.origin, cam.right, cam.up, cam.forward,
        cam.tan_x, cam.tan_y,
        int(spp), int(seed), float(capture.exposure), img)
    if supersample == 1:
        return img
    return img.reshape(h, supersample, w, supersample, 3).mean(axis=(1, 3))


def luminance(img: np.ndarray) -> np.ndarray:
    """Per-pixel photometric weighting of a linear-RGB image."""
    return img @ _LUMA


def set_threads(n: int) -> int:
    """Clamp and apply the render thread count; returns the value in use."""
    import numba

    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
