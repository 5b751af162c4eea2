"""Domain types for woven fabrics: weave patterns, parameter sets, and the
flattened optimization vector.

Conventions used throughout the package:

* The *weft* family runs horizontally (along patch x), the *warp* family
  vertically (along patch y).
* A weave pattern is a binary matrix; entry ``[i, j]`` is True when the warp
  yarn ``j`` passes **over** the weft yarn ``i`` in that cell.
* Geometry lives in pattern-cell units: one unit spans one weave cell.
  Physical scale (cm) enters only through :class:`CaptureConfig` and the
  fabric size fields.
"""

from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AXES",
    "PATTERN_KINDS",
    "PARAM_RANGES",
    "ConfigError",
    "WeavePattern",
    "FabricSpec",
    "YarnGeomParams",
    "FiberAppearanceParams",
    "SharedAppearance",
    "CaptureConfig",
    "GeometrySettings",
    "AppearanceSettings",
    "FabricConfig",
    "ParamVector",
    "pattern_matrix",
    "derive_segment_lengths",
    "sample_params",
    "sample_fabric_config",
    "remap_unit_to_range",
    "range_to_unit",
    "default_config",
    "load_config",
    "save_config",
]

AXES = ("weft", "warp")

SEGMENT_LENGTH_MIN = 1.0
SEGMENT_LENGTH_MAX = 4.0

U_MAX_LIMIT = 0.5 * math.pi * 0.96


class ConfigError(ValueError):
    """Raised for invalid fabric specifications or configuration files."""


# ---------------------------------------------------------------------------
# Weave patterns
# ---------------------------------------------------------------------------

def _rolled_rows(first_row, shift=1):
    rows = [list(first_row)]
    for _ in range(len(first_row) - 1):
        prev = rows[-1]
        rows.append(prev[-shift:] + prev[:-shift])
    return rows


def _satin_rows(n=8, counter=3):
    rows = []
    for i in range(n):
        row = [1] * n
        row[(counter * i) % n] = 0
        rows.append(row)
    return rows


_BASE_MATRICES = {
    "plain": [[1, 0], [0, 1]],
    "twill0": _rolled_rows([1, 1, 0, 0]),
    "twill1": _rolled_rows([1, 1, 1, 0]),
    "satin": _satin_rows(),
}

PATTERN_KINDS = (
    "plain",
    "twill0",
    "twill1",
    "satin",
    "twill0-rot90",
    "twill1-rot90",
    "satin-rot90",
)


@dataclass(frozen=True, eq=False)
class WeavePattern:
    """A named over/under grid. ``matrix[i, j]`` True = warp over weft."""

    kind: str
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2:
            raise ConfigError("pattern matrix must be 2D")
        if not (m.any(axis=1).all() and (~m).any(axis=1).all()):
            raise ConfigError(f"pattern {self.kind!r}: a row lacks an over or under cell")
        if not (m.any(axis=0).all() and (~m).any(axis=0).all()):
            raise ConfigError(f"pattern {self.kind!r}: a column lacks an over or under cell")

    def __eq__(self, other):
        if not isinstance(other, WeavePattern):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash((self.kind, self.matrix.tobytes()))

    @property
    def shape(self):
        return self.matrix.shape


def pattern_matrix(kind: str) -> WeavePattern:
    """Return the preset weave matrix for ``kind``.

    rot90 variants are the transpose-with-flip (``np.rot90``) of their base
    pattern. Unknown kinds are rejected: only the seven presets are supported.
    """
    if kind not in PATTERN_KINDS:
        raise ConfigError(f"unknown weave pattern {kind!r}; presets: {PATTERN_KINDS}")
    if kind.endswith("-rot90"):
        base = np.array(_BASE_MATRICES[kind[: -len("-rot90")]], dtype=bool)
        return WeavePattern(kind, np.rot90(base))
    return WeavePattern(kind, np.array(_BASE_MATRICES[kind], dtype=bool))


def base_kind(kind: str) -> str:
    """Strip a ``-rot90`` suffix (rot90 fabrics share base-pattern tables)."""
    return kind[: -len("-rot90")] if kind.endswith("-rot90") else kind


# ---------------------------------------------------------------------------
# Fabric specification
# ---------------------------------------------------------------------------

def _clamped_length(raw: float, label: str) -> float:
    if raw < SEGMENT_LENGTH_MIN or raw > SEGMENT_LENGTH_MAX:
        clamped = min(max(raw, SEGMENT_LENGTH_MIN), SEGMENT_LENGTH_MAX)
        warnings.warn(
            f"derived segment length {label}={raw:g} outside [{SEGMENT_LENGTH_MIN:g}, "
            f"{SEGMENT_LENGTH_MAX:g}]; clamped to {clamped:g}",
            stacklevel=3,
        )
        return clamped
    return float(raw)


@dataclass(frozen=True)
class FabricSpec:
    """Pattern plus physical size (cm) and yarn counts per family.

    Segment lengths are derived (and clamp warnings emitted) once, at
    construction.
    """

    pattern: WeavePattern
    L_h: float = 1.0
    L_v: float = 1.0
    n_h: int = 20
    n_v: int = 20
    l_h: float = field(init=False)
    l_v: float = field(init=False)

    def __post_init__(self):
        if self.L_h <= 0 or self.L_v <= 0:
            raise ConfigError("fabric size must be positive")
        if int(self.n_h) != self.n_h or int(self.n_v) != self.n_v:
            raise ConfigError("yarn counts must be integers")
        if self.n_h < 2 or self.n_v < 2:
            raise ConfigError("yarn counts must be >= 2 per axis")
        l_h, l_v = derive_segment_lengths(self)
        object.__setattr__(self, "l_h", l_h)
        object.__setattr__(self, "l_v", l_v)

    @property
    def segment_lengths(self) -> tuple[float, float]:
        return (self.l_h, self.l_v)

    @property
    def cell_size_cm(self) -> tuple[float, float]:
        """Physical size of one weave cell: (along x, along y)."""
        return (self.L_h / self.n_v, self.L_v / self.n_h)


def derive_segment_lengths(spec: FabricSpec) -> tuple[float, float]:
    """Yarn segment lengths (l_weft, l_warp) in cell units.

    l_weft = L_h / n_v and l_warp = L_v / n_h, clamped into [1, 4] with a
    warning when out of range.
    """
    if spec.n_v == 0 or spec.n_h == 0:
        raise ConfigError("yarn count cannot be zero")
    l_h = _clamped_length(spec.L_h / spec.n_v, "l_weft")
    l_v = _clamped_length(spec.L_v / spec.n_h, "l_warp")
    return (l_h, l_v)


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------

def _check_range(name, value, lo, hi, lo_open=False, hi_open=False):
    ok = (value > lo if lo_open else value >= lo) and (value < hi if hi_open else value <= hi)
    if not ok:
        lb, rb = ("(" if lo_open else "["), (")" if hi_open else "]")
        raise ConfigError(f"{name}={value!r} outside {lb}{lo}, {hi}{rb}")


def _check_rgb(name, value, lo_open=False):
    if len(value) != 3:
        raise ConfigError(f"{name} must have 3 channels")
    for c in value:
        _check_range(name, c, 0.0, 1.0, lo_open=lo_open)


@dataclass(frozen=True)
class YarnGeomParams:
    """Per-axis yarn/fiber geometry controls (all in cell units).

    u_max: maximum inclination angle of the bending arc (radians).
    beta: height scaling of the arc.
    e_yarn: yarn bundle radius.
    m: fibers per yarn.
    G, s: migration extent and rotation-frequency control.
    alpha: twist, cells per full turn (sign = direction, 0 = untwisted).
    Q: noise level.
    """

    u_max: float = 0.8
    beta: float = 0.9
    e_yarn: float = 0.45
    m: int = 200
    G: float = 0.75
    s: float = 0.2
    alpha: float = 0.0
    Q: float = 0.15

    def __post_init__(self):
        _check_range("u_max", self.u_max, 0.0, U_MAX_LIMIT, lo_open=True)
        if self.beta <= 0:
            raise ConfigError(f"beta={self.beta!r} must be > 0")
        if self.e_yarn <= 0:
            raise ConfigError(f"e_yarn={self.e_yarn!r} must be > 0")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"m={self.m!r} must be an integer >= 1")
        _check_range("G", self.G, 0.0, 1.0, lo_open=True, hi_open=True)
        if self.s <= 0:
            raise ConfigError(f"s={self.s!r} must be > 0")
        _check_range("Q", self.Q, 0.0, 1.0, hi_open=True)


@dataclass(frozen=True)
class FiberAppearanceParams:
    """Per-axis optical parameters of the fiber scattering model."""

    C: tuple[float, float, float] = (0.5, 0.5, 0.5)
    gamma_M: float = 0.5
    gamma_N: float = 0.05
    gamma_M0: float = 0.125
    k_d: tuple[float, float, float] = (0.5, 0.5, 0.5)
    eta: float = 1.55

    def __post_init__(self):
        object.__setattr__(self, "C", tuple(float(c) for c in self.C))
        object.__setattr__(self, "k_d", tuple(float(c) for c in self.k_d))
        _check_rgb("C", self.C, lo_open=True)
        _check_rgb("k_d", self.k_d)
        _check_range("gamma_M", self.gamma_M, 0.0, 1.0, lo_open=True)
        _check_range("gamma_N", self.gamma_N, 0.0, 1.0, lo_open=True)
        _check_range("gamma_M0", self.gamma_M0, 0.0, 1.0, lo_open=True)
        if self.eta < 1.0:
            raise ConfigError(f"eta={self.eta!r} must be >= 1")


@dataclass(frozen=True)
class SharedAppearance:
    """Fabric-wide appearance: the diffuse blending weight."""

    w_d: float = 0.5

    def __post_init__(self):
        _check_range("w_d", self.w_d, 0.0, 1.0)


@dataclass(frozen=True)
class CaptureConfig:
    """Synthetic microscope rig: pinhole camera, point light, sample plane.

    Positions are in cm. ``light_intensity`` is RGB radiant intensity; the
    default 100 matches the rig's initial brightness before any exposure
    optimization. The default crop is square.
    """

    camera_position: tuple[float, float, float] = (0.0, 0.0, 2.0)
    camera_look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_deg: float = 24.0
    light_position: tuple[float, float, float] = (1.2, 1.2, 2.2)
    light_intensity: tuple[float, float, float] = (100.0, 100.0, 100.0)
    plane_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    plane_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    plane_extent_cm: tuple[float, float] = (1.0, 1.0)
    image_size: tuple[int, int] = (256, 256)
    exposure: float = 1.0

    def __post_init__(self):
        for name in ("camera_position", "camera_look_at", "light_position",
                     "plane_origin", "plane_normal"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        li = getattr(self, "light_intensity")
        if np.isscalar(li):
            li = (li, li, li)
        object.__setattr__(self, "light_intensity", tuple(float(v) for v in li))
        object.__setattr__(self, "plane_extent_cm", tuple(float(v) for v in self.plane_extent_cm))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if min(self.light_intensity) < 0:
            raise ConfigError("light intensity must be >= 0")
        if self.fov_deg <= 0 or self.fov_deg >= 180:
            raise ConfigError("fov_deg must be in (0, 180)")
        if min(self.image_size) < 1:
            raise ConfigError("image size must be >= 1 px")
        if self.exposure <= 0:
            raise ConfigError("exposure must be > 0")


@dataclass(frozen=True)
class GeometrySettings:
    weft: YarnGeomParams = field(default_factory=YarnGeomParams)
    warp: YarnGeomParams = field(default_factory=YarnGeomParams)
    gap_factor: float = 1.0
    fiber_radius_scale: float = 1.0
    noise_z_scale: float = 1.0

    def __post_init__(self):
        if self.gap_factor < 0:
            raise ConfigError("gap_factor must be >= 0")
        if self.fiber_radius_scale <= 0:
            raise ConfigError("fiber_radius_scale must be > 0")
        if self.noise_z_scale < 0:
            raise ConfigError("noise_z_scale must be >= 0")

    def axis(self, a: str) -> YarnGeomParams:
        return self.weft if a == "weft" else self.warp


@dataclass(frozen=True)
class AppearanceSettings:
    weft: FiberAppearanceParams = field(default_factory=FiberAppearanceParams)
    warp: FiberAppearanceParams = field(default_factory=FiberAppearanceParams)
    shared: SharedAppearance = field(default_factory=SharedAppearance)

    def axis(self, a: str) -> FiberAppearanceParams:
        return self.weft if a == "weft" else self.warp


@dataclass(frozen=True)
class FabricConfig:
    """Everything needed to generate, render, and fit one fabric."""

    fabric: FabricSpec
    geometry: GeometrySettings = field(default_factory=GeometrySettings)
    appearance: AppearanceSettings = field(default_factory=AppearanceSettings)
    capture: CaptureConfig = field(default_factory=CaptureConfig)
    seed: int = 0

    @property
    def kind(self) -> str:
        return self.fabric.pattern.kind


# ---------------------------------------------------------------------------
# Parameter ranges / remapping
# ---------------------------------------------------------------------------

# (lo, hi) documented range per optimizable or config-side parameter name.
PARAM_RANGES = {
    "u_max": (0.1, 1.5),
    "beta": (0.1, 1.5),
    "alpha": (-0.5, 0.5),
    "Q": (0.0, 0.95),
    "C": (1e-3, 1.0),
    "gamma_M": (0.01, 1.0),
    "gamma_N": (0.01, 1.0),
    "gamma_M0": (0.01, 1.0),
    "k_d": (0.0, 1.0),
    "w_d": (0.0, 1.0),
    "log_exposure": (-4.0, 4.0),
    "e_yarn": (0.005, 0.15),
    "G": (0.05, 0.95),
    "s": (0.01, 1.0),
    "m": (50, 400),
}


def _range_for(name: str) -> tuple[float, float]:
    key = name.rsplit(".", 1)[-1]
    if key in ("r", "g", "b"):
        key = name.split(".")[-2]
    if key not in PARAM_RANGES:
        raise KeyError(f"unknown parameter name {name!r}")
    return PARAM_RANGES[key]


def remap_unit_to_range(u: float, name: str) -> float:
    """Affine map of u in [0, 1] onto the documented range of ``name``."""
    lo, hi = _range_for(name)
    return lo + (hi - lo) * u


def range_to_unit(value: float, name: str) -> float:
    """Inverse of :func:`remap_unit_to_range` (round-trips within 1e-12)."""
    lo, hi = _range_for(name)
    return (value - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------

_VECTOR_AXIS_FIELDS = (
    "u_max", "beta", "alpha", "Q",
    "C.r", "C.g", "C.b",
    "gamma_M", "gamma_N", "gamma_M0",
    "k_d.r", "k_d.g", "k_d.b",
)
_VECTOR_SHARED_FIELDS = ("w_d", "log_exposure")

VECTOR_NAMES = tuple(
    [f"{axis}.{f}" for axis in AXES for f in _VECTOR_AXIS_FIELDS]
) + _VECTOR_SHARED_FIELDS

# Entries optimized by the path-traced refinement stage.
REFINE_FIELDS = ("C.r", "C.g", "C.b", "gamma_M", "gamma_N", "gamma_M0")
REFINE_NAMES = tuple(f"{axis}.{f}" for axis in AXES for f in REFINE_FIELDS)


def _frozen_array(values, dtype=np.float64):
    a = np.asarray(values, dtype=dtype).copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParamVector:
    """Flattened, bounded, maskable parameter vector.

    The layout covers exactly the jointly-optimized appearance/geometry
    scalars (13 per axis), the shared diffuse weight, and the log exposure.
    Values always lie within bounds: updates go through :meth:`evolve`, which
    projects. ``mask`` marks entries the optimizer may move.
    """

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    mask: np.ndarray
    names: tuple[str, ...] = VECTOR_NAMES

    def __post_init__(self):
        n = len(self.names)
        values = np.clip(np.asarray(self.values, dtype=np.float64), self.lo, self.hi)
        for fname, arr in (("values", values),
                           ("lo", np.asarray(self.lo, dtype=np.float64)),
                           ("hi", np.asarray(self.hi, dtype=np.float64))):
            if arr.shape != (n,):
                raise ConfigError(f"ParamVector.{fname} must have shape ({n},)")
            object.__setattr__(self, fname, _frozen_array(arr))
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (n,):
            raise ConfigError(f"ParamVector.mask must have shape ({n},)")
        object.__setattr__(self, "mask", _frozen_array(mask, dtype=bool))

    @property
    def layout(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.names)}

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.index(name)])

    def evolve(self, values=None, mask=None) -> "ParamVector":
        """Functional update; out-of-bound values are projected."""
        v = self.values if values is None else np.asarray(values, dtype=np.float64)
        m = self.mask if mask is None else np.asarray(mask, dtype=bool)
        return ParamVector(np.clip(v, self.lo, self.hi), self.lo, self.hi, m, self.names)

    def with_entry(self, name: str, value: float) -> "ParamVector":
        v = self.values.copy()
        v[self.index(name)] = value
        return self.evolve(values=v)

    def project(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lo, self.hi)

    # -- config conversion ---------------------------------------------------

    @staticmethod
    def from_config(cfg: FabricConfig, mask_names=None) -> "ParamVector":
        """Flatten a config's optimizable entries into a vector.

        ``mask_names``: iterable of entry names the optimizer may move
        (default: all entries).
        """
        vals = []
        for axis in AXES:
            g = cfg.geometry.axis(axis)
            a = cfg.appearance.axis(axis)
            vals += [g.u_max, g.beta, g.alpha, g.Q, *a.C,
                     a.gamma_M, a.gamma_N, a.gamma_M0, *a.k_d]
        vals += [cfg.appearance.shared.w_d, math.log(cfg.capture.exposure)]
        lo = np.array([_range_for(n)[0] for n in VECTOR_NAMES])
        hi = np.array([_range_for(n)[1] for n in VECTOR_NAMES])
        if mask_names is None:
            mask = np.ones(len(VECTOR_NAMES), dtype=bool)
        else:
            wanted = set(mask_names)
            unknown = wanted - set(VECTOR_NAMES)
            if unknown:
                raise ConfigError(f"unknown vector entries: {sorted(unknown)}")
            mask = np.array([n in wanted for n in VECTOR_NAMES])
        return ParamVector(np.array(vals), lo, hi, mask)

    def to_config(self, base: FabricConfig) -> FabricConfig:
        """Write the vector's entries back onto a config."""
        get = self.__getitem__
        geo = {}
        app = {}
        for axis in AXES:
            g = base.geometry.axis(axis)
            geo[axis] = dataclasses.replace(
                g,
                u_max=get(f"{axis}.u_max"), beta=get(f"{axis}.beta"),
                alpha=get(f"{axis}.alpha"), Q=get(f"{axis}.Q"),
            )
            a = base.appearance.axis(axis)
            app[axis] = dataclasses.replace(
                a,
                C=(get(f"{axis}.C.r"), get(f"{axis}.C.g"), get(f"{axis}.C.b")),
                gamma_M=get(f"{axis}.gamma_M"), gamma_N=get(f"{axis}.gamma_N"),
                gamma_M0=get(f"{axis}.gamma_M0"),
                k_d=(get(f"{axis}.k_d.r"), get(f"{axis}.k_d.g"), get(f"{axis}.k_d.b")),
            )
        geometry = dataclasses.replace(base.geometry, weft=geo["weft"], warp=geo["warp"])
        appearance = AppearanceSettings(
            weft=app["weft"], warp=app["warp"], shared=SharedAppearance(get("w_d")),
        )
        capture = dataclasses.replace(base.capture, exposure=math.exp(get("log_exposure")))
        return dataclasses.replace(
            base, geometry=geometry, appearance=appearance, capture=capture,
        )


# ---------------------------------------------------------------------------
# Parameter sampling (dataset distributions)
# ---------------------------------------------------------------------------

def _u(rng, a, b):
    return float(rng.uniform(a, b))


def _n(rng, mu, sigma):
    return float(rng.normal(mu, sigma))


def _nmax(rng, mu, sigma, floor):
    return max(_n(rng, mu, sigma), floor)


# Per-pattern sampling table. Each entry: axis -> dict of closures over rng.
# Yarn counts (n) belong to FabricSpec and are sampled by the fabric-level
# wrapper below. Q, k_d, and w_d have no table rows; see docs/formats.md.
def _geom_row(rng, *, e_lo, e_hi, n_mu=200.0, n_sd=5.0, g_mu=0.75, g_sd=0.03,
              s_scale=1.0, u_lo=0.1, u_hi=1.5, b_lo=0.3, b_hi=1.5, a_sd=0.03):
    return dict(
        alpha=_n(rng, 0.0, a_sd),
        e_yarn=_u(rng, e_lo, e_hi),
        m=max(1, round(_n(rng, n_mu, n_sd))),
        G=float(np.clip(_n(rng, g_mu, g_sd), 0.05, 0.95)),
        s=_nmax(rng, 0.2, 0.03, 0.01) * s_scale,
        u_max=_u(rng, u_lo, u_hi),
        beta=_u(rng, b_lo, b_hi),
        Q=_u(rng, 0.0, 0.3),
    )


def _app_row(rng, *, gm_mu=0.5, gn_mu=0.05, gn_sd=0.01):
    return dict(
        C=tuple(np.clip(rng.uniform(0.0, 1.0, 3), 1e-3, 1.0)),
        gamma_M=_nmax(rng, gm_mu, 0.1, 0.01),
        gamma_N=_nmax(rng, gn_mu, gn_sd, 0.01),
        gamma_M0=_u(rng, 0.1, 0.15),
        k_d=tuple(rng.uniform(0.0, 1.0, 3)),
    )


def _sample_axis(kind: str, axis: str, rng) -> tuple[dict, dict]:
    if kind == "plain":
        geom = _geom_row(rng, e_lo=0.0525, e_hi=0.09625)
        app = _app_row(rng)
    elif kind == "twill0":
        if axis == "weft":
            geom = _geom_row(rng, e_lo=0.0475, e_hi=0.108)
        else:
            geom = _geom_row(rng, e_lo=0.0475, e_hi=0.0672)
        app = _app_row(rng)
    elif kind == "twill1":
        if axis == "weft":
            geom = _geom_row(rng, e_lo=0.038, e_hi=0.055)
        else:
            geom = _geom_row(rng, e_lo=0.045, e_hi=0.0672)
        app = _app_row(rng, gn_mu=0.15)
    elif kind == "satin":
        if axis == "weft":
            geom = _geom_row(rng, e_lo=0.0053, e_hi=0.0143, a_sd=0.01,
                             s_scale=0.8, b_lo=0.5, b_hi=1.5)
        else:
            geom = _geom_row(rng, e_lo=0.0234, e_hi=0.0357, a_sd=0.01,
                             s_scale=0.8, b_lo=0.1, b_hi=0.5)
        app = _app_row(rng, gm_mu=0.4)
    else:  # pragma: no cover - guarded by caller
        raise ConfigError(f"no sampling table for {kind!r}")
    return geom, app


_YARN_COUNT_RANGES = {
    # kind -> (weft n range, warp n range), inclusive integer bounds
    "plain": ((6, 10), (5, 7)),
    "twill0": ((9, 11), (6, 11)),
    "twill1": ((11, 13), (9, 11)),
    "satin": ((11, 13), (9, 11)),
}


def sample_params(kind: str, rng: np.random.Generator):
    """Draw one parameter set from the per-pattern dataset distributions.

    Returns ``(geom_weft, geom_warp, app_weft, app_warp, shared)``. Weft and
    warp draw independently; rot90 kinds swap the two families' tables.
    """
    if kind not in PATTERN_KINDS:
        raise ConfigError(f"unknown weave pattern {kind!r}")
    base = base_kind(kind)
    rotated = kind.endswith("-rot90")
    axes = ("warp", "weft") if rotated else ("weft", "warp")
    rows = {}
    for table_axis, out_axis in zip(("weft", "warp"), axes):
        g, a = _sample_axis(base, table_axis, rng)
        rows[out_axis] = (YarnGeomParams(**g), FiberAppearanceParams(**a))
    shared = SharedAppearance()
    return (rows["weft"][0], rows["warp"][0], rows["weft"][1], rows["warp"][1], shared)


def sample_fabric_config(kind: str, rng: np.random.Generator,
                         size_cm: tuple[float, float] = (1.0, 1.0),
                         capture: CaptureConfig | None = None,
                         seed: int = 0) -> FabricConfig:
    """sample_params plus yarn counts, assembled into a full FabricConfig."""
    gw, gv, aw, av, shared = sample_params(kind, rng)
    base = base_kind(kind)
    (wlo, whi), (vlo, vhi) = _YARN_COUNT_RANGES[base]
    if kind.endswith("-rot90"):
        (wlo, whi), (vlo, vhi) = (vlo, vhi), (wlo, whi)
    n_h = int(rng.integers(wlo, whi + 1))
    n_v = int(rng.integers(vlo, vhi + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # sampled counts routinely clamp l
        spec = FabricSpec(pattern_matrix(kind), size_cm[0], size_cm[1], n_h, n_v)
    return FabricConfig(
        fabric=spec,
        geometry=GeometrySettings(weft=gw, warp=gv),
        appearance=AppearanceSettings(weft=aw, warp=av, shared=shared),
        capture=capture or CaptureConfig(),
        seed=seed,
    )


def default_config(kind: str = "plain", seed: int = 0) -> FabricConfig:
    """Config at the dataset-distribution means for ``kind`` (1 cm² fabric).

    These means also serve as fit initialization: e.g. G=0.75, m=200,
    gamma_N=0.05 for plain weave.
    """
    base = base_kind(kind)
    # e_yarn defaults are the dataset-mean values rescaled from
    # fraction-of-capture units into cell units using the dataset-mean
    # visible yarn counts, so default fabrics have realistic coverage.
    means = {
        "plain": dict(
            weft=dict(e_yarn=0.55),
            warp=dict(e_yarn=0.45),
            gamma_M=0.5, gamma_N=0.05,
        ),
        "twill0": dict(
            weft=dict(e_yarn=0.6),
            warp=dict(e_yarn=0.49),
            gamma_M=0.5, gamma_N=0.05,
        ),
        "twill1": dict(
            weft=dict(e_yarn=0.56),
            warp=dict(e_yarn=0.56),
            gamma_M=0.5, gamma_N=0.15,
        ),
        "satin": dict(
            weft=dict(e_yarn=0.12, s=0.16, beta=1.0),
            warp=dict(e_yarn=0.30, s=0.16, beta=0.3),
            gamma_M=0.4, gamma_N=0.05,
        ),
    }[base]
    axes = {"weft": dict(means["weft"]), "warp": dict(means["warp"])}
    if kind.endswith("-rot90"):
        axes = {"weft": dict(means["warp"]), "warp": dict(means["weft"])}
    geom = {a: YarnGeomParams(**axes[a]) for a in AXES}
    app = {a: FiberAppearanceParams(gamma_M=means["gamma_M"], gamma_N=means["gamma_N"])
           for a in AXES}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # default 1 cm² / 20 yarns clamps l to 1
        spec = FabricSpec(pattern_matrix(kind))
    return FabricConfig(
        fabric=spec,
        geometry=GeometrySettings(weft=geom["weft"], warp=geom["warp"]),
        appearance=AppearanceSettings(weft=app["weft"], warp=app["warp"]),
        capture=CaptureConfig(),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Config file IO (JSON; round-trips losslessly)
# ---------------------------------------------------------------------------

_SCHEMA = "fiberweave-config-v1"


def config_to_dict(cfg: FabricConfig) -> dict:
    def axis_geom(g: YarnGeomParams) -> dict:
        return dict(u_max=g.u_max, beta=g.beta, e_yarn=g.e_yarn, m=g.m,
                    G=g.G, s=g.s, alpha=g.alpha, Q=g.Q)

    def axis_app(a: FiberAppearanceParams) -> dict:
        return dict(C=list(a.C), gamma_M=a.gamma_M, gamma_N=a.gamma_N,
                    gamma_M0=a.gamma_M0, k_d=list(a.k_d), eta=a.eta)

    cap = cfg.capture
    return {
        "schema": _SCHEMA,
        "seed": cfg.seed,
        "fabric": {
            "pattern": cfg.fabric.pattern.kind,
            "size_cm": [cfg.fabric.L_h, cfg.fabric.L_v],
            "yarn_counts": [cfg.fabric.n_h, cfg.fabric.n_v],
        },
        "geometry": {
            "weft": axis_geom(cfg.geometry.weft),
            "warp": axis_geom(cfg.geometry.warp),
            "gap_factor": cfg.geometry.gap_factor,
            "fiber_radius_scale": cfg.geometry.fiber_radius_scale,
            "noise_z_scale": cfg.geometry.noise_z_scale,
        },
        "appearance": {
            "weft": axis_app(cfg.appearance.weft),
            "warp": axis_app(cfg.appearance.warp),
            "w_d": cfg.appearance.shared.w_d,
        },
        "capture": {
            "camera_position": list(cap.camera_position),
            "camera_look_at": list(cap.camera_look_at),
            "fov_deg": cap.fov_deg,
            "light_position": list(cap.light_position),
            "light_intensity": list(cap.light_intensity),
            "plane_origin": list(cap.plane_origin),
            "plane_normal": list(cap.plane_normal),
            "plane_extent_cm": list(cap.plane_extent_cm),
            "image_size": list(cap.image_size),
            "exposure": cap.exposure,
        },
    }


def config_from_dict(d: dict) -> FabricConfig:
    try:
        if d.get("schema") != _SCHEMA:
            raise ConfigError(f"unknown config schema {d.get('schema')!r}")
        fab = d["fabric"]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            spec = FabricSpec(
                pattern_matrix(fab["pattern"]),
                float(fab["size_cm"][0]), float(fab["size_cm"][1]),
                int(fab["yarn_counts"][0]), int(fab["yarn_counts"][1]),
            )
        for w in caught:
            warnings.warn(str(w.message), stacklevel=2)
        geo = d["geometry"]
        app = d["appearance"]
        geometry = GeometrySettings(
            weft=YarnGeomParams(**geo["weft"]),
            warp=YarnGeomParams(**geo["warp"]),
            gap_factor=float(geo.get("gap_factor", 1.0)),
            fiber_radius_scale=float(geo.get("fiber_radius_scale", 1.0)),
            noise_z_scale=float(geo.get("noise_z_scale", 1.0)),
        )
        appearance = AppearanceSettings(
            weft=FiberAppearanceParams(**{k: (tuple(v) if isinstance(v, list) else v)
                                          for k, v in app["weft"].items()}),
            warp=FiberAppearanceParams(**{k: (tuple(v) if isinstance(v, list) else v)
                                          for k, v in app["warp"].items()}),
            shared=SharedAppearance(float(app.get("w_d", 0.5))),
        )
        capture = CaptureConfig(**d["capture"])
        return FabricConfig(fabric=spec, geometry=geometry, appearance=appearance,
                            capture=capture, seed=int(d.get("seed", 0)))
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed config: {exc!r}") from exc


def load_config(path) -> FabricConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    return config_from_dict(d)


def save_config(cfg: FabricConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
