"""Near-field fiber scattering.

Implements the industry-standard four-lobe fiber BCSDF (reflection, two
transmission bounces, and a residual lobe absorbing everything deeper) over
rough dielectric cylinders, plus the Lambertian blend used by the fast
approximate shading pass. All evaluation paths are vectorized over batches
of shading points; per-call appearance parameters are scalars/RGB.

Conventions (shared with the tracer):

* local frame at a hit: ``x = tangent``, ``z = azimuthal direction of the
  outgoing ray``, ``y = z × x``; thus the outgoing azimuth is always 0;
* ``sin(theta)`` of a direction is its tangent component; azimuth is
  ``atan2(w·y, w·z)``;
* ``h`` in [-1, 1] is the hit offset across the fiber measured along
  ``tangent × z``, normalized by the fiber radius — the mirror direction of
  the reflection lobe at offset ``h`` is azimuth ``-2·asin(h)``;
* ``eval_*`` return densities that the renderer multiplies by its cosine
  term: the fiber term uses ``|w_i·z|``, the diffuse term ``<w_i·n>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .weave import FiberAppearanceParams

__all__ = [
    "BsdfParams",
    "LobeSet",
    "ShadingFrame",
    "build_lobes",
    "albedo_to_absorption",
    "azimuth_scale",
    "compile_appearance",
    "eval_approx",
    "eval_bcsdf",
    "eval_diffuse",
    "fiber_frame",
    "fresnel_dielectric",
    "longitudinal_variance",
    "lobe_attenuation",
    "lobe_deflection",
    "pdf_bcsdf",
    "sample_bcsdf",
    "scatter_eval",
    "scatter_pdf",
    "scatter_sample",
]

ABSORPTION_CAP = 1e4
_SQRT_PI_OVER_8 = math.sqrt(math.pi / 8.0)
_LUMA = np.array([0.2126, 0.7152, 0.0722])
_EPS = 1e-9
N_LOBES = 4  # p = 0..2 explicit, p = 3 residual


# ---------------------------------------------------------------------------
# parameter mappings
# ---------------------------------------------------------------------------

def longitudinal_variance(beta: float) -> float:
    """Longitudinal lobe variance for roughness ``beta`` in (0, 1]."""
    t = 0.726 * beta + 0.812 * beta**2 + 3.7 * beta**20
    return t * t


def azimuth_scale(beta: float) -> float:
    """Logistic scale of the azimuthal lobe for roughness ``beta``."""
    return _SQRT_PI_OVER_8 * (
        0.265 * beta + 1.194 * beta**2 + 5.372 * beta**22)


def albedo_to_absorption(C, gamma_N: float) -> np.ndarray:
    """Per-channel absorption so a white-furnace fiber reflects ``C``.

    Empirical inverse fit for the cylinder model, a polynomial in the
    azimuthal roughness; monotone decreasing in C with ``sigma_a(1) = 0``.
    Channels at 0 are capped at a large finite absorption.
    """
    C = np.asarray(C, dtype=np.float64)
    if np.any(C < 0.0) or np.any(C > 1.0):
        raise ValueError("albedo components must lie in [0, 1]")
    b = gamma_N
    denom = (5.969 - 0.215 * b + 2.532 * b**2 - 10.73 * b**3
             + 5.574 * b**4 + 0.245 * b**5)
    with np.errstate(divide="ignore"):
        sig = (np.log(C) / denom) ** 2
    return np.minimum(np.nan_to_num(sig, nan=ABSORPTION_CAP,
                                    posinf=ABSORPTION_CAP), ABSORPTION_CAP)


@dataclass(frozen=True)
class BsdfParams:
    """Appearance compiled to the quantities evaluation actually needs."""

    sigma_a: np.ndarray          # (3,)
    eta: float
    v: np.ndarray                # (4,) longitudinal variance per lobe
    s: float                     # azimuthal logistic scale

    def __post_init__(self):
        self.sigma_a.setflags(write=False)
        self.v.setflags(write=False)


def compile_appearance(app: FiberAppearanceParams) -> BsdfParams:
    vm = longitudinal_variance(app.gamma_M)
    v = np.array([longitudinal_variance(app.gamma_M0),
                  0.25 * vm, 4.0 * vm, 4.0 * vm])
    return BsdfParams(
        sigma_a=albedo_to_absorption(app.C, app.gamma_N),
        eta=float(app.eta),
        v=v,
        s=azimuth_scale(app.gamma_N),
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def fresnel_dielectric(cos_i, eta: float):
    """Unpolarized Fresnel reflectance entering a medium of IOR ``eta``."""
    cos_i = np.clip(np.asarray(cos_i, dtype=np.float64), 0.0, 1.0)
    if eta == 1.0:  # index-matched: exactly no reflection
        return np.zeros_like(cos_i)
    sin2_t = (1.0 - cos_i * cos_i) / (eta * eta)
    total = sin2_t >= 1.0
    cos_t = np.sqrt(np.maximum(1.0 - sin2_t, 0.0))
    r_par = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    r_perp = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    fr = 0.5 * (r_par * r_par + r_perp * r_perp)
    return np.where(total, 1.0, fr)


_I0_TERMS = 24
_I0_CROSSOVER = 18.0


def _i0(x):
    """Modified Bessel I0 by power series (accurate below the crossover)."""
    x2 = x * x
    total = np.ones_like(x)
    term = np.ones_like(x)
    for k in range(1, _I0_TERMS):
        term = term * x2 / (4.0 * k * k)
        total = total + term
    return total


def _log_i0(x):
    """log(I0(x)) with an asymptotic branch for large arguments."""
    xs = np.maximum(x, 1e-300)
    asym = (x - 0.5 * (math.log(2.0 * math.pi) + np.log(xs))
            + np.log1p(1.0 / (8.0 * xs) + 9.0 / (128.0 * xs * xs)))
    return np.where(x > _I0_CROSSOVER, asym,
                    np.log(_i0(np.minimum(x, _I0_CROSSOVER))))


def _mp(cos_ti, cos_to, sin_ti, sin_to, v):
    """Longitudinal lobe, normalized so its cosine-weighted integral is 1.

    ``a`` is non-negative here (both cosines are). Very sharp lobes take
    a log-space branch to avoid overflow in I0 and sinh; in the wide
    branch ``a <= 1/v <= 10`` so the series I0 is safe.
    """
    a = cos_ti * cos_to / v
    b = sin_ti * sin_to / v
    if v <= 0.1:
        return np.exp(_log_i0(a) - b - 1.0 / v + 0.6931
                      + math.log(1.0 / (2.0 * v)))
    return _i0(a) * np.exp(-b) / (2.0 * v * math.sinh(1.0 / v))


def _logistic_pdf(x, s):
    x = np.abs(x) / s
    e = np.exp(-x)
    return e / (s * (1.0 + e) ** 2)


def _logistic_cdf(x, s):
    return expit(np.asarray(x, dtype=np.float64) / s)


def _trimmed_logistic(x, s, bound=math.pi):
    norm = _logistic_cdf(bound, s) - _logistic_cdf(-bound, s)
    return _logistic_pdf(x, s) / norm


def _sample_trimmed_logistic(u, s, bound=math.pi):
    k = _logistic_cdf(bound, s) - _logistic_cdf(-bound, s)
    t = _logistic_cdf(-bound, s) + u * k
    t = np.clip(t, 1e-12, 1.0 - 1e-12)
    x = -s * np.log(1.0 / t - 1.0)
    return np.clip(x, -bound, bound)


def _wrap_pi(x):
    return (x + math.pi) % (2.0 * math.pi) - math.pi


def lobe_deflection(p, gamma_o, gamma_t):
    """Mean azimuthal deflection of lobe ``p`` at entry/exit angles."""
    return 2.0 * p * gamma_t - 2.0 * gamma_o + p * math.pi


def lobe_attenuation(h, sin_to, sigma_a, eta: float) -> np.ndarray:
    """Per-lobe RGB attenuations ``A_p``: Fresnel + interior absorption.

    Returns shape ``(N, 4, 3)``. The last lobe is the closed-form sum of
    all bounces past the second transmission.
    """
    h = np.asarray(h, dtype=np.float64)
    sin_to = np.asarray(sin_to, dtype=np.float64)
    cos_to = np.sqrt(np.maximum(1.0 - sin_to * sin_to, 0.0))
    cos_go = np.sqrt(np.maximum(1.0 - h * h, 0.0))

    sin_tt = sin_to / eta
    cos_tt = np.sqrt(np.maximum(1.0 - sin_tt * sin_tt, 0.0))
    eta_p = np.sqrt(np.maximum(eta * eta - sin_to * sin_to, 0.0)) \
        / np.maximum(cos_to, _EPS)
    sin_gt = h / np.maximum(eta_p, _EPS)
    cos_gt = np.sqrt(np.maximum(1.0 - sin_gt * sin_gt, 0.0))

    f = fresnel_dielectric(cos_to * cos_go, eta)
    # interior path transmittance per crossing
    path = 2.0 * cos_gt / np.maximum(cos_tt, _EPS)
    T = np.exp(-np.asarray(sigma_a)[None, :] * path[..., None])  # (N, 3)

    a = np.empty(h.shape + (N_LOBES, 3), dtype=np.float64)
    f3 = f[..., None]
    a[..., 0, :] = f3
    a[..., 1, :] = (1.0 - f3) ** 2 * T
    a[..., 2, :] = a[..., 1, :] * T * f3
    tf = np.clip(T * f3, 0.0, 1.0 - 1e-6)
    a[..., 3, :] = a[..., 2, :] * tf / (1.0 - tf)
    return a


@dataclass(frozen=True)
class LobeSet:
    """Precomputed per-lobe quantities for a batch of shading points."""

    attenuation: np.ndarray   # (N, 4, 3) RGB energy per lobe
    deflection: np.ndarray    # (N, 4) mean azimuthal deflection, radians
    variance: np.ndarray      # (4,) longitudinal variance per lobe

    def __post_init__(self):
        for name in ("attenuation", "deflection", "variance"):
            getattr(self, name).setflags(write=False)


def build_lobes(h, sin_to, params: BsdfParams) -> LobeSet:
    h = np.asarray(h, dtype=np.float64)
    sin_to = np.asarray(sin_to, dtype=np.float64)
    gamma_o, gamma_t = _angles(h, sin_to, params.eta)
    defl = np.stack([lobe_deflection(p, gamma_o, gamma_t)
                     for p in range(N_LOBES)], axis=-1)
    return LobeSet(
        attenuation=lobe_attenuation(h, sin_to, params.sigma_a, params.eta),
        deflection=defl,
        variance=params.v.copy(),
    )


# ---------------------------------------------------------------------------
# core (angle-space) evaluation
# ---------------------------------------------------------------------------

def _angles(h, sin_to, eta):
    gamma_o = np.arcsin(np.clip(h, -1.0, 1.0))
    cos_to = np.sqrt(np.maximum(1.0 - sin_to * sin_to, 0.0))
    eta_p = np.sqrt(np.maximum(eta * eta - sin_to * sin_to, 0.0)) \
        / np.maximum(cos_to, _EPS)
    gamma_t = np.arcsin(np.clip(h / np.maximum(eta_p, _EPS), -1.0, 1.0))
    return gamma_o, gamma_t


def scatter_eval(sin_to, sin_ti, phi, h, params: BsdfParams) -> np.ndarray:
    """Angular scattering function ``sum_p M_p·N_p`` as RGB, shape (N, 3).

    This is the quantity whose cosine-weighted spherical integral is the
    total fiber albedo; the renderer's BSDF value is this divided by the
    incident cosine (see :func:`eval_bcsdf`).
    """
    sin_to = np.asarray(sin_to, dtype=np.float64)
    sin_ti = np.asarray(sin_ti, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    cos_to = np.sqrt(np.maximum(1.0 - sin_to**2, 0.0))
    cos_ti = np.sqrt(np.maximum(1.0 - sin_ti**2, 0.0))

    ap = lobe_attenuation(h, sin_to, params.sigma_a, params.eta)
    gamma_o, gamma_t = _angles(h, sin_to, params.eta)

    out = np.zeros(np.broadcast(sin_to, sin_ti, phi).shape + (3,))
    for p in range(N_LOBES):
        mp = _mp(cos_ti, cos_to, sin_ti, sin_to, float(params.v[p]))
        if p < N_LOBES - 1:
            dphi = _wrap_pi(phi - lobe_deflection(p, gamma_o, gamma_t))
            np_pdf = _trimmed_logistic(dphi, params.s)
        else:
            np_pdf = 1.0 / (2.0 * math.pi)
        out += ap[..., p, :] * (mp * np_pdf)[..., None]
    return out


def _lobe_select_pdf(ap):
    w = ap @ _LUMA
    total = w.sum(axis=-1, keepdims=True)
    return w / np.maximum(total, _EPS)


def scatter_pdf(sin_to, sin_ti, phi, h, params: BsdfParams) -> np.ndarray:
    """Solid-angle pdf of :func:`scatter_sample`, shape (N,)."""
    sin_to = np.asarray(sin_to, dtype=np.float64)
    sin_ti = np.asarray(sin_ti, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    cos_to = np.sqrt(np.maximum(1.0 - sin_to**2, 0.0))
    cos_ti = np.sqrt(np.maximum(1.0 - sin_ti**2, 0.0))

    ap = lobe_attenuation(h, sin_to, params.sigma_a, params.eta)
    sel = _lobe_select_pdf(ap)
    gamma_o, gamma_t = _angles(h, sin_to, params.eta)

    pdf = np.zeros(np.broadcast(sin_to, sin_ti, phi).shape)
    for p in range(N_LOBES):
        mp = _mp(cos_ti, cos_to, sin_ti, sin_to, float(params.v[p]))
        if p < N_LOBES - 1:
            dphi = _wrap_pi(phi - lobe_deflection(p, gamma_o, gamma_t))
            np_pdf = _trimmed_logistic(dphi, params.s)
        else:
            np_pdf = 1.0 / (2.0 * math.pi)
        pdf += sel[..., p] * mp * np_pdf
    return pdf


def scatter_sample(sin_to, h, params: BsdfParams, u: np.ndarray):
    """Importance-sample the fiber lobes.

    ``u`` has shape (N, 4): lobe choice, longitudinal pair, azimuthal draw.
    Returns ``(sin_ti, phi, pdf, value)`` with value = scatter_eval at the
    sampled direction. A valid sample is always produced.
    """
    sin_to = np.asarray(sin_to, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = sin_to.shape[0]
    cos_to = np.sqrt(np.maximum(1.0 - sin_to**2, 0.0))

    ap = lobe_attenuation(h, sin_to, params.sigma_a, params.eta)
    sel = _lobe_select_pdf(ap)
    cdf = np.cumsum(sel, axis=-1)
    lobe = (u[:, 0:1] >= cdf).sum(axis=-1)
    lobe = np.minimum(lobe, N_LOBES - 1)

    v = params.v[lobe]
    u1 = np.maximum(u[:, 1], 1e-5)
    cos_theta = 1.0 + v * np.log(u1 + (1.0 - u1) * np.exp(-2.0 / v))
    sin_theta = np.sqrt(np.maximum(1.0 - cos_theta**2, 0.0))
    cos_phi_g = np.cos(2.0 * math.pi * u[:, 2])
    sin_ti = np.clip(-cos_theta * sin_to + sin_theta * cos_phi_g * cos_to,
                     -1.0, 1.0)

    gamma_o, gamma_t = _angles(h, sin_to, params.eta)
    phi = np.empty(n)
    residual = lobe == N_LOBES - 1
    if np.any(~residual):
        p = lobe[~residual]
        defl = (2.0 * p * gamma_t[~residual] - 2.0 * gamma_o[~residual]
                + p * math.pi)
        phi[~residual] = defl + _sample_trimmed_logistic(
            u[~residual, 3], params.s)
    phi[residual] = 2.0 * math.pi * u[residual, 3] - math.pi
    phi = _wrap_pi(phi)

    pdf = scatter_pdf(sin_to, sin_ti, phi, h, params)
    value = scatter_eval(sin_to, sin_ti, phi, h, params)
    return sin_ti, phi, pdf, value


# ---------------------------------------------------------------------------
# vector-space wrappers
# ---------------------------------------------------------------------------

def fiber_frame(tangent: np.ndarray, wo: np.ndarray):
    """Orthonormal frame (y, z) of the azimuthal plane for each point.

    ``z`` is the outgoing direction's component perpendicular to the
    tangent; degenerate views (wo parallel to the fiber) yield a zero
    frame, flagged by the returned validity mask.
    """
    t_dot = np.sum(tangent * wo, axis=-1, keepdims=True)
    z = wo - t_dot * tangent
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    ok = norm[..., 0] > 1e-9
    z = np.where(ok[..., None], z / np.maximum(norm, _EPS), 0.0)
    y = np.cross(z, tangent)
    return y, z, ok


@dataclass(frozen=True)
class ShadingFrame:
    """Per-hit shading geometry for a batch of fiber intersections."""

    tangent: np.ndarray        # (N, 3) unit fiber direction
    h: np.ndarray              # (N,) offset across the fiber in [-1, 1]
    normal: np.ndarray         # (N, 3) macro surface normal
    fiber_normal: np.ndarray   # (N, 3) axis-to-hit unit vector

    def __post_init__(self):
        for name in ("tangent", "h", "normal", "fiber_normal"):
            np.asarray(getattr(self, name)).setflags(write=False)


def offset_across_fiber(hit, axis_point, tangent, wo, radius):
    """Signed hit offset ``h``: position across the fiber seen from ``wo``."""
    side = np.cross(tangent, _perp(wo, tangent))
    d = np.sum((hit - axis_point) * side, axis=-1) / radius
    return np.clip(d, -1.0, 1.0)


def _perp(w, tangent):
    z = w - np.sum(w * tangent, axis=-1, keepdims=True) * tangent
    return z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), _EPS)


def _to_angles(w, tangent, y, z):
    sin_t = np.clip(np.sum(w * tangent, axis=-1), -1.0, 1.0)
    phi = np.arctan2(np.sum(w * y, axis=-1), np.sum(w * z, axis=-1))
    return sin_t, phi


def eval_bcsdf(frame: ShadingFrame, wi, wo,
               app: FiberAppearanceParams) -> np.ndarray:
    """Fiber BSDF value (RGB); multiply by ``|wi·z|`` for the integrand."""
    params = compile_appearance(app)
    y, z, ok = fiber_frame(frame.tangent, wo)
    sin_to, _ = _to_angles(wo, frame.tangent, y, z)
    sin_ti, phi = _to_angles(wi, frame.tangent, y, z)
    s = scatter_eval(sin_to, sin_ti, phi, frame.h, params)
    cos_zi = np.abs(np.sum(wi * z, axis=-1))
    out = s / np.maximum(cos_zi, 1e-7)[..., None]
    return np.where(ok[..., None], out, 0.0)


def pdf_bcsdf(frame: ShadingFrame, wi, wo, app: FiberAppearanceParams):
    params = compile_appearance(app)
    y, z, ok = fiber_frame(frame.tangent, wo)
    sin_to, _ = _to_angles(wo, frame.tangent, y, z)
    sin_ti, phi = _to_angles(wi, frame.tangent, y, z)
    return np.where(ok, scatter_pdf(sin_to, sin_ti, phi, frame.h, params), 0.0)


def sample_bcsdf(frame: ShadingFrame, wo, app: FiberAppearanceParams, rng):
    """Draw scattered directions; returns ``(wi, pdf, weight)``.

    ``weight`` is the unbiased estimator value ``eval·cos/pdf``, i.e. the
    RGB throughput multiplier for a path-tracing bounce.
    """
    params = compile_appearance(app)
    tangent = frame.tangent
    y, z, ok = fiber_frame(tangent, wo)
    sin_to, _ = _to_angles(wo, tangent, y, z)
    n = sin_to.shape[0]
    u = rng.random((n, 4)) if hasattr(rng, "random") else rng
    sin_ti, phi, pdf, value = scatter_sample(sin_to, frame.h, params, u)
    cos_ti = np.sqrt(np.maximum(1.0 - sin_ti**2, 0.0))
    wi = (sin_ti[:, None] * tangent
          + (cos_ti * np.cos(phi))[:, None] * z
          + (cos_ti * np.sin(phi))[:, None] * y)
    weight = value / np.maximum(pdf, _EPS)[:, None]
    weight = np.where((ok & (pdf > 0.0))[:, None], weight, 0.0)
    return wi, pdf, weight


# ---------------------------------------------------------------------------
# diffuse blend (approximate multiple scattering)
# ---------------------------------------------------------------------------

def eval_diffuse(wi, frame: ShadingFrame, k_d, w_d: float) -> np.ndarray:
    """Blended Lambertian term of the approximate shading model.

    ``w_d`` mixes a fiber-normal-weighted lobe (whose ratio against the
    surface cosine makes fibers read as cylinders) with plain Lambert.
    Multiply by ``<wi·normal>`` for the integrand.
    """
    k_d = np.asarray(k_d, dtype=np.float64)
    cos_n = np.sum(wi * frame.normal, axis=-1)
    cos_m = np.maximum(np.sum(wi * frame.fiber_normal, axis=-1), 0.0)
    fiber_part = w_d * cos_m / (math.pi * np.maximum(cos_n, _EPS))
    flat_part = (1.0 - w_d) / math.pi
    out = (fiber_part + flat_part)[..., None] * k_d
    return np.where((cos_n > 0.0)[..., None], out, 0.0)


def eval_approx(frame: ShadingFrame, wi, wo, app: FiberAppearanceParams,
                w_d: float) -> np.ndarray:
    """Stage-2 shading model: fiber single scattering + diffuse blend."""
    return eval_bcsdf(frame, wi, wo, app) + eval_diffuse(
        wi, frame, app.k_d, w_d)
