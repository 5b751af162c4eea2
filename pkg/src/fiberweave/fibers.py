"""Procedural fiber geometry.

Builds fiber polylines for one weave-repeat patch:

* a hybrid circular/parabolic centerline gives each yarn segment its bent
  height profile, normalized so the peak height equals the scaling factor;
* each yarn carries ``m`` fibers placed by a radial distribution with
  per-fiber jitter, migration (radius oscillating with rotation), and twist;
* two noise terms perturb fibers vertically (seeded periodic gradient noise,
  constant per fiber run) and azimuthally (a random exponent that slides the
  height peak along the run);
* yarns are closed loops across the patch so tiling is seamless: the final
  vertex of every curve is the first vertex translated by the patch extent.

All coordinates are in pattern-cell units (one weave cell = 1.0); physical
scale enters only when the patch is instanced under a camera. Weft yarns run
along +x (one per matrix row), warp yarns along +y (one per matrix column);
``matrix[i, j]`` True means the warp yarn is on top at that crossing.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .noise import NoiseField
from .weave import (
    AXES,
    SEGMENT_LENGTH_MAX,
    SEGMENT_LENGTH_MIN,
    ConfigError,
    FabricConfig,
    YarnGeomParams,
)

__all__ = [
    "FiberCurve",
    "Patch",
    "centerline_height",
    "circular_runs",
    "fiber_base_radius",
    "fiber_point",
    "fiber_radius_at",
    "full_fabric_fiber_count",
    "generate_patch",
    "generate_yarn",
    "quantize_twist",
    "shift_parameter",
    "twist_angle",
    "write_curves_obj",
    "write_curves_text",
]

# Golden-angle-like spacing of fiber start phases around the yarn.
FIBER_PHASE_SPACING = 0.137
# Base radii are clamped to this multiple of the yarn radius.
BASE_RADIUS_CLAMP = 1.2
# Jitter amplitude is uniform on (0, this bound).
JITTER_BOUND = 0.1
# Minimum twist pitch, cells per full turn, representable at the supported
# vertex densities; requests for tighter twist are quantized up to this.
MIN_TWIST_PITCH = 0.2

_WEFT, _WARP = 0, 1


# ---------------------------------------------------------------------------
# centerline
# ---------------------------------------------------------------------------

def centerline_height(y, u_max: float, l, beta: float):
    """Height of the yarn centerline at position ``y`` along a segment.

    A circular arc (endpoint inclination ``u_max``, chord length ``l``) is
    blended with a parabola-weighted copy of itself; long segments lean on
    the parabola term for a flatter crown. The result is normalized by the
    arc's peak height and scaled by ``beta``, so the curve runs from 0 at
    both ends of ``[0, l]`` to ``beta`` at the midpoint.
    """
    if not 0.0 < u_max < 0.5 * math.pi:
        raise ValueError(f"u_max={u_max!r} outside (0, pi/2)")
    y = np.asarray(y, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if np.any(l <= 0.0):
        raise ValueError("segment length must be > 0")

    sin_u = math.sin(u_max)
    cos_u = math.cos(u_max)
    r = l / (2.0 * sin_u)
    d = y - r * sin_u
    z_cir = np.sqrt(np.maximum(r * r - d * d, 0.0)) - r * cos_u
    z_par = d * d / (r * l) + 1.0
    w = (l - SEGMENT_LENGTH_MIN) / (SEGMENT_LENGTH_MAX - SEGMENT_LENGTH_MIN)
    z_hyb = w * z_cir * z_par + (1.0 - w) * z_cir
    out = beta * z_hyb / (r - r * cos_u)
    return out if out.ndim else float(out)


def shift_parameter(u, kappa, mirror=False):
    """Warp a unit parameter so the height peak slides along the segment.

    ``u -> 1 - (1-u)^kappa`` moves the peak toward the segment start for
    ``kappa > 1``; ``mirror`` selects the reflected form ``u^kappa`` that
    moves it the other way. Both fix the endpoints, so junctions stay put.
    """
    u = np.asarray(u, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    warped = np.where(mirror, u ** kappa, 1.0 - (1.0 - u) ** kappa)
    warped = np.where(kappa == 1.0, u, warped)  # exact identity, no rounding
    return warped if warped.ndim else float(warped)


# ---------------------------------------------------------------------------
# per-fiber radial distribution
# ---------------------------------------------------------------------------

def fiber_base_radius(index, m: int, e_yarn: float, jitter=0.0, gauss=0.0):
    """Nominal orbit radius of fiber ``index`` (1-based) within its yarn.

    ``(index/m)^0.3`` packs fibers densely near the yarn surface; the jitter
    term (uniform amplitude x standard normal draw) roughens the shells. The
    result is clamped to ``[0, 1.2 * e_yarn]``.
    """
    index = np.asarray(index, dtype=np.float64)
    base = (index / float(m)) ** 0.3 + np.asarray(jitter) * np.asarray(gauss)
    out = np.clip(e_yarn * base, 0.0, BASE_RADIUS_CLAMP * e_yarn)
    return out if out.ndim else float(out)


def twist_angle(t, alpha: float):
    """Fiber-bundle rotation at arc position ``t`` for twist pitch ``alpha``.

    ``alpha`` is cells per full turn (sign = handedness); zero disables
    twist entirely rather than diverging.
    """
    t = np.asarray(t, dtype=np.float64)
    if alpha == 0.0:
        out = np.zeros_like(t)
    else:
        out = 2.0 * math.pi * t / alpha
    return out if out.ndim else float(out)


def fiber_radius_at(theta, base_radius, G: float, s: float, theta0):
    """Migrating orbit radius: oscillates between ``(1-G)*R`` and ``R``.

    ``theta`` is the twist rotation at the evaluation point, ``s`` scales how
    fast migration cycles per turn, ``theta0`` is the per-fiber start phase.
    """
    theta = np.asarray(theta, dtype=np.float64)
    base_radius = np.asarray(base_radius, dtype=np.float64)
    out = (1.0 - G) * base_radius + 0.5 * G * base_radius * (
        np.cos(s * theta + np.asarray(theta0)) + 1.0
    )
    return out if out.ndim else float(out)


def fiber_point(y, index: int, geom: YarnGeomParams, l: float, *,
                jitter=0.0, gauss=0.0, theta0=0.0, kappa=1.0, mirror=False,
                noise_offset=0.0):
    """Cross-section offset and height of one fiber at position ``y``.

    Composes the orbit radius, twist helix, peak-shifted centerline, and a
    per-run vertical noise offset into the ``(x, z)`` pair for a single
    evaluation point. Deterministic given the explicitly passed draws.
    """
    base = fiber_base_radius(index, geom.m, geom.e_yarn, jitter, gauss)
    theta = twist_angle(y, geom.alpha)
    radius = fiber_radius_at(theta, base, geom.G, geom.s, theta0)
    phase = theta + 2.0 * math.pi * FIBER_PHASE_SPACING * index
    if geom.Q == 0.0:
        kappa, noise_offset = 1.0, 0.0
    u = np.clip(np.asarray(y, dtype=np.float64) / l, 0.0, 1.0)
    y_shifted = shift_parameter(u, kappa, mirror) * l
    z_cen = centerline_height(y_shifted, geom.u_max, l, geom.beta)
    x = radius * np.cos(phase)
    z = radius * np.sin(phase) + z_cen + noise_offset
    if np.ndim(x) == 0:
        return float(x), float(z)
    return x, z


def quantize_twist(alpha: float, s: float, loop_cells: int) -> tuple[float, float, int]:
    """Snap twist and migration frequency so a closed loop meets itself.

    Over a loop of ``loop_cells`` cells the bundle must complete a whole
    number of turns, and the migration phase a whole number of cycles, or
    the closing vertex would not match the first. Returns
    ``(alpha_eff, s_eff, turns)``; ``alpha == 0`` passes through unchanged.
    """
    if alpha == 0.0:
        return 0.0, s, 0
    turns = int(round(loop_cells / abs(alpha)))
    turns = min(max(turns, 1), int(loop_cells / MIN_TWIST_PITCH))
    alpha_eff = math.copysign(loop_cells / turns, alpha)
    s_eff = round(s * turns) / turns
    return alpha_eff, s_eff, turns


# ---------------------------------------------------------------------------
# weave runs
# ---------------------------------------------------------------------------

def circular_runs(states: np.ndarray) -> list[tuple[int, int, bool]]:
    """Maximal circular runs of equal state: ``(start_cell, length, state)``.

    The cell sequence is circular (the yarn closes across the patch edge), so
    a run may wrap; runs are reported in increasing start order beginning
    with the first run boundary at or after cell 0.
    """
    states = np.asarray(states, dtype=bool)
    n = states.size
    if n == 0:
        raise ValueError("empty state sequence")
    changes = np.nonzero(states != np.roll(states, 1))[0]
    if changes.size == 0:
        return [(0, n, bool(states[0]))]
    runs = []
    for a, b in zip(changes, np.roll(changes, -1)):
        length = int((b - a) % n) or n
        runs.append((int(a), length, bool(states[a])))
    return runs


def _run_tables(states: np.ndarray, l_axis: float):
    """Per-run and per-cell lookup tables for one yarn's crossing states."""
    runs = circular_runs(states)
    n_cells = states.size
    starts = np.array([r[0] for r in runs], dtype=np.int64)
    lengths = np.array([r[1] for r in runs], dtype=np.int64)
    over = np.array([r[2] for r in runs], dtype=bool)
    l_seg = np.clip(lengths * l_axis, SEGMENT_LENGTH_MIN, SEGMENT_LENGTH_MAX)
    run_of_cell = np.empty(n_cells, dtype=np.int64)
    for idx, (c0, k, _) in enumerate(runs):
        run_of_cell[(c0 + np.arange(k)) % n_cells] = idx
    return starts, lengths, over, l_seg, run_of_cell


# ---------------------------------------------------------------------------
# patch containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiberCurve:
    """One fiber polyline (closed loop: last vertex = first + patch extent)."""

    vertices: np.ndarray
    radius: float
    axis: str
    yarn_index: int
    fiber_index: int


@dataclass(frozen=True, eq=False)
class Patch:
    """Flat-array fiber geometry for one weave repeat.

    ``vertices`` holds every curve's points back to back; curve ``c`` owns
    rows ``curve_first[c]:curve_first[c+1]``. Capsule primitives for the
    tracer are the consecutive vertex pairs within each curve.
    """

    vertices: np.ndarray        # (V, 3) float64, cell units
    curve_first: np.ndarray     # (C+1,) int64 prefix offsets
    curve_radius: np.ndarray    # (C,) float64 fiber radius e_fib
    curve_axis: np.ndarray      # (C,) int8, 0 = weft, 1 = warp
    curve_yarn: np.ndarray      # (C,) int32
    curve_fiber: np.ndarray     # (C,) int32, 1-based within the yarn
    extent: tuple[float, float]  # patch size (x, y) in cells
    density: int
    seed: int

    def __post_init__(self):
        for name in ("vertices", "curve_first", "curve_radius",
                     "curve_axis", "curve_yarn", "curve_fiber"):
            getattr(self, name).setflags(write=False)

    @property
    def n_curves(self) -> int:
        return self.curve_first.size - 1

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_capsules(self) -> int:
        return self.n_vertices - self.n_curves

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, n).nbytes for n in
                   ("vertices", "curve_first", "curve_radius",
                    "curve_axis", "curve_yarn", "curve_fiber"))

    def curve(self, c: int) -> FiberCurve:
        lo, hi = self.curve_first[c], self.curve_first[c + 1]
        return FiberCurve(
            vertices=self.vertices[lo:hi],
            radius=float(self.curve_radius[c]),
            axis=AXES[self.curve_axis[c]],
            yarn_index=int(self.curve_yarn[c]),
            fiber_index=int(self.curve_fiber[c]),
        )


# ---------------------------------------------------------------------------
# yarn and patch generation
# ---------------------------------------------------------------------------

def _yarn_rng(seed: int, axis_id: int, yarn_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), axis_id, yarn_index]))


def generate_yarn(states: np.ndarray, axis: str, yarn_index: int,
                  geom: YarnGeomParams, l_axis: float, density: int,
                  seed: int, noise: NoiseField, xi: float,
                  run_counter_start: int = 0,
                  noise_z_scale: float = 1.0) -> np.ndarray:
    """Generate all fiber polylines of one yarn.

    ``states`` lists the over/under crossing state per cell along the yarn
    (True = this yarn passes over). Returns vertices with shape
    ``(m, cells*density + 1, 3)``; the trailing vertex closes the loop one
    patch extent along the yarn axis. Under-runs use negated height; each
    run's vertical noise offset is constant and indexed by a patch-global
    run counter starting at ``run_counter_start``.
    """
    if density < 1:
        raise ValueError("density must be >= 1")
    states = np.asarray(states, dtype=bool)
    n_cells = states.size
    if n_cells == 0:
        raise ValueError("yarn must cross at least one cell")
    axis_id = AXES.index(axis)

    starts, lengths, over, l_seg, run_of_cell = _run_tables(states, l_axis)
    n_runs = starts.size
    m = geom.m
    rng = _yarn_rng(seed, axis_id, yarn_index)
    jitter = rng.uniform(0.0, JITTER_BOUND, m)
    gauss = rng.standard_normal(m)
    theta0 = rng.uniform(0.0, 2.0 * math.pi, m)
    nu = rng.uniform(0.0, 1.0, m)
    mirror = rng.integers(0, 2, m).astype(bool)

    fiber_idx = np.arange(1, m + 1, dtype=np.float64)
    base = fiber_base_radius(fiber_idx, m, geom.e_yarn, jitter, gauss)
    helix_phase = 2.0 * math.pi * FIBER_PHASE_SPACING * fiber_idx

    T = n_cells * density
    t = np.arange(T, dtype=np.float64) / density
    cell_t = np.minimum(t.astype(np.int64), n_cells - 1)
    run_t = run_of_cell[cell_t]                      # (T,)
    u_t = ((t - starts[run_t]) % n_cells) / lengths[run_t]
    sign_t = np.where(over[run_t], 1.0, -1.0)
    l_t = l_seg[run_t]

    alpha_eff, s_eff, _ = quantize_twist(geom.alpha, geom.s, n_cells)
    theta_t = twist_angle(t, alpha_eff)              # (T,)
    radius = fiber_radius_at(theta_t[None, :], base[:, None],
                             geom.G, s_eff, theta0[:, None])   # (m, T)
    phase = theta_t[None, :] + helix_phase[:, None]
    c_perp = radius * np.cos(phase)
    c_z = radius * np.sin(phase)

    if geom.Q > 0.0:
        kappa = 1.0 + nu[:, None] * (2.5 * geom.Q / (l_seg * l_seg))[None, :]
        u_warp = shift_parameter(u_t[None, :], kappa[:, run_t],
                                 mirror[:, None])    # (m, T)
        lam_run = run_counter_start + np.arange(n_runs, dtype=np.float64)
        z_noise = (noise.values(0.0, geom.Q * fiber_idx[:, None],
                                geom.Q * lam_run[None, :] + xi)
                   - noise.values(0.0, 0.0, xi)) * noise_z_scale  # (m, R)
        z_noise_t = z_noise[:, run_t]
    else:
        u_warp = np.broadcast_to(u_t[None, :], (m, T))
        z_noise_t = 0.0

    z_cen = sign_t[None, :] * centerline_height(
        u_warp * l_t[None, :], geom.u_max, l_t[None, :], geom.beta)
    z = c_z + z_cen + z_noise_t

    verts = np.empty((m, T + 1, 3), dtype=np.float64)
    if axis_id == _WEFT:
        verts[:, :T, 0] = t[None, :]
        verts[:, :T, 1] = (yarn_index + 0.5) + c_perp
    else:
        verts[:, :T, 0] = (yarn_index + 0.5) + c_perp
        verts[:, :T, 1] = t[None, :]
    verts[:, :T, 2] = z
    verts[:, T] = verts[:, 0]
    verts[:, T, axis_id] += n_cells
    return verts


def generate_patch(cfg: FabricConfig, density: int,
                   seed: int | None = None) -> Patch:
    """Generate the fiber geometry of one weave repeat for ``cfg``.

    Deterministic in ``seed`` (default: the config's seed). Weft and warp
    use independent noise fields and per-yarn generator streams, so any
    yarn can be regenerated in isolation.
    """
    if seed is None:
        seed = cfg.seed
    matrix = cfg.fabric.pattern.matrix
    n_rows, n_cols = matrix.shape
    l_h, l_v = cfg.fabric.segment_lengths
    geo = cfg.geometry

    fields = {a: NoiseField(int(np.random.SeedSequence(
        [int(seed), 900 + i]).generate_state(1)[0]))
        for i, a in enumerate(AXES)}
    xi = {a: float(np.random.default_rng(
        np.random.SeedSequence([int(seed), 2 ** 20, i])).uniform(0.0, 100.0))
        for i, a in enumerate(AXES)}

    blocks, first, radii, axes_col, yarns, fibers = [], [0], [], [], [], []
    plan = ([("weft", i, ~matrix[i, :], geo.weft, l_h, n_cols)
             for i in range(n_rows)]
            + [("warp", j, matrix[:, j], geo.warp, l_v, n_rows)
               for j in range(n_cols)])

    run_counter = {"weft": 0, "warp": 0}
    offset = {"weft": -geo.gap_factor * geo.weft.e_yarn,
              "warp": +geo.gap_factor * geo.warp.e_yarn}
    for axis, index, states, geom, l_axis, n_cells in plan:
        verts = generate_yarn(states, axis, index, geom, l_axis, density,
                              seed, fields[axis], xi[axis],
                              run_counter[axis], geo.noise_z_scale)
        verts[:, :, 2] += offset[axis]
        run_counter[axis] += len(circular_runs(states))
        m, nv, _ = verts.shape
        blocks.append(verts.reshape(m * nv, 3))
        e_fib = geo.fiber_radius_scale * geom.e_yarn / math.sqrt(geom.m)
        base0 = first[-1]
        first.extend(base0 + nv * k for k in range(1, m + 1))
        radii.extend([e_fib] * m)
        axes_col.extend([AXES.index(axis)] * m)
        yarns.extend([index] * m)
        fibers.extend(range(1, m + 1))

    return Patch(
        vertices=np.concatenate(blocks, axis=0),
        curve_first=np.asarray(first, dtype=np.int64),
        curve_radius=np.asarray(radii, dtype=np.float64),
        curve_axis=np.asarray(axes_col, dtype=np.int8),
        curve_yarn=np.asarray(yarns, dtype=np.int32),
        curve_fiber=np.asarray(fibers, dtype=np.int32),
        extent=(float(n_cols), float(n_rows)),
        density=int(density),
        seed=int(seed),
    )


def full_fabric_fiber_count(cfg: FabricConfig) -> int:
    """Distinct fibers across the whole fabric (yarn count x fibers each)."""
    return (cfg.fabric.n_h * cfg.geometry.weft.m
            + cfg.fabric.n_v * cfg.geometry.warp.m)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def write_curves_text(patch: Patch, path) -> None:
    """Write the documented plain-text curve format (one vertex per line)."""
    buf = io.StringIO()
    buf.write(f"# fiberweave curves v1 curves={patch.n_curves} "
              f"vertices={patch.n_vertices} density={patch.density} "
              f"extent={patch.extent[0]:g}x{patch.extent[1]:g} "
              f"seed={patch.seed}\n")
    for c in range(patch.n_curves):
        cur = patch.curve(c)
        buf.write(f"c {c} {cur.axis} {cur.yarn_index} {cur.fiber_index} "
                  f"{cur.radius:.9g}\n")
        for x, y, z in cur.vertices:
            buf.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def write_curves_obj(patch: Patch, path) -> None:
    """Write polylines as Wavefront OBJ (v + l records)."""
    buf = io.StringIO()
    buf.write("# fiberweave patch polylines\n")
    for x, y, z in patch.vertices:
        buf.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    for c in range(patch.n_curves):
        lo, hi = patch.curve_first[c], patch.curve_first[c + 1]
        idx = " ".join(str(i + 1) for i in range(lo, hi))
        buf.write(f"l {idx}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
