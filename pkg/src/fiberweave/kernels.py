"""Compiled inner loops: ray-capsule intersection, BVH traversal, periodic
tile marching, and the path-tracing kernels.

Everything here is scalar numba code; the array-facing API lives in
``tracer``. The fiber scattering functions mirror the vectorized reference
implementation in ``bsdf`` formula-for-formula (they are cross-checked by
tests); keep the two in sync when touching either.

Determinism: every sample's random stream is derived only from
``(seed, pixel, sample_index)`` with a counter-based generator, and each
pixel accumulates its own samples sequentially, so images are bitwise
independent of the number of threads.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

MISS = 1.0e300
# compile-time float relaxations that keep results run-to-run deterministic
_FM = {"contract", "nsz", "arcp"}
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_PIX_SALT = np.uint64(0xD1342543DE82EF95)
_SAMP_SALT = np.uint64(0xAF251AF3B0F025B5)
_DIM_SALT = np.uint64(0x9E3779B97F4A7C15)
_INV_2_53 = 1.0 / 9007199254740992.0


# ---------------------------------------------------------------------------
# counter-based RNG (splitmix64)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _seed_path(seed, pix, samp):
    s = np.uint64(seed) * _GOLDEN
    s = _mix(s ^ (np.uint64(pix) * _PIX_SALT))
    return _mix(s ^ (np.uint64(samp) * _SAMP_SALT))


@njit(cache=True)
def _rand(state):
    state = state + _DIM_SALT
    z = _mix(state)
    return state, (z >> np.uint64(11)) * _INV_2_53


# ---------------------------------------------------------------------------
# scalar fiber scattering (mirrors bsdf.py)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def _fresnel(ci, eta):
    if eta == 1.0:
        return 0.0
    if ci < 0.0:
        ci = 0.0
    elif ci > 1.0:
        ci = 1.0
    s2 = (1.0 - ci * ci) / (eta * eta)
    if s2 >= 1.0:
        return 1.0
    ct = math.sqrt(1.0 - s2)
    rp = (eta * ci - ct) / (eta * ci + ct)
    rs = (ci - eta * ct) / (ci + eta * ct)
    return 0.5 * (rp * rp + rs * rs)


@njit(cache=True, fastmath=_FM)
def _i0s(x):
    x2 = x * x
    total = 1.0
    term = 1.0
    for k in range(1, 24):
        term = term * x2 / (4.0 * k * k)
        total = total + term
        if term < 1e-18 * total:
            break
    return total


@njit(cache=True, fastmath=_FM)
def _log_i0s(x):
    if x > 18.0:
        xs = x if x > 1e-300 else 1e-300
        return (x - 0.5 * (math.log(2.0 * math.pi) + math.log(xs))
                + math.log1p(1.0 / (8.0 * xs) + 9.0 / (128.0 * xs * xs)))
    return math.log(_i0s(x))


@njit(cache=True, fastmath=_FM)
def _mp_s(cti, cto, sti, sto, v):
    a = cti * cto / v
    b = sti * sto / v
    if v <= 0.1:
        return math.exp(_log_i0s(a) - b - 1.0 / v + 0.6931
                        + math.log(1.0 / (2.0 * v)))
    return _i0s(a) * math.exp(-b) / (2.0 * v * math.sinh(1.0 / v))


@njit(cache=True, fastmath=_FM)
def _trim_logistic_s(x, s):
    ax = abs(x) / s
    if ax > 700.0:
        return 0.0
    e = math.exp(-ax)
    pdf = e / (s * (1.0 + e) * (1.0 + e))
    arg = math.pi / (2.0 * s)
    norm = 1.0 if arg > 20.0 else math.tanh(arg)
    return pdf / norm


@njit(cache=True, fastmath=_FM)
def _sample_trim_logistic_s(u, s):
    arg = math.pi / s
    if arg > 700.0:
        clo = 0.0
        chi = 1.0
    else:
        e = math.exp(arg)
        clo = 1.0 / (1.0 + e)
        chi = 1.0 / (1.0 + 1.0 / e)
    t = clo + u * (chi - clo)
    if t < 1e-12:
        t = 1e-12
    elif t > 1.0 - 1e-12:
        t = 1.0 - 1e-12
    x = -s * math.log(1.0 / t - 1.0)
    if x < -math.pi:
        x = -math.pi
    elif x > math.pi:
        x = math.pi
    return x


@njit(cache=True, fastmath=_FM)
def _wrap_pi_s(x):
    return (x + math.pi) % (2.0 * math.pi) - math.pi


@njit(cache=True, fastmath=_FM)
def _lobes_s(h, sin_to, eta, sr, sg, sb, ap):
    """Fill ap (4,3) with per-lobe attenuations; return (gamma_o, gamma_t)."""
    cos_to = math.sqrt(max(1.0 - sin_to * sin_to, 0.0))
    hh = min(max(h, -1.0), 1.0)
    cos_go = math.sqrt(max(1.0 - hh * hh, 0.0))
    sin_tt = sin_to / eta
    cos_tt = math.sqrt(max(1.0 - sin_tt * sin_tt, 0.0))
    etap = math.sqrt(max(eta * eta - sin_to * sin_to, 0.0)) / max(cos_to, 1e-9)
    sin_gt = hh / max(etap, 1e-9)
    if sin_gt < -1.0:
        sin_gt = -1.0
    elif sin_gt > 1.0:
        sin_gt = 1.0
    cos_gt = math.sqrt(max(1.0 - sin_gt * sin_gt, 0.0))
    f = _fresnel(cos_to * cos_go, eta)
    path = 2.0 * cos_gt / max(cos_tt, 1e-9)
    tr = math.exp(-sr * path)
    tg = math.exp(-sg * path)
    tb = math.exp(-sb * path)
    omf2 = (1.0 - f) * (1.0 - f)
    ap[0, 0] = f
    ap[0, 1] = f
    ap[0, 2] = f
    ap[1, 0] = omf2 * tr
    ap[1, 1] = omf2 * tg
    ap[1, 2] = omf2 * tb
    ap[2, 0] = ap[1, 0] * tr * f
    ap[2, 1] = ap[1, 1] * tg * f
    ap[2, 2] = ap[1, 2] * tb * f
    tfr = min(tr * f, 1.0 - 1e-6)
    tfg = min(tg * f, 1.0 - 1e-6)
    tfb = min(tb * f, 1.0 - 1e-6)
    ap[3, 0] = ap[2, 0] * tfr / (1.0 - tfr)
    ap[3, 1] = ap[2, 1] * tfg / (1.0 - tfg)
    ap[3, 2] = ap[2, 2] * tfb / (1.0 - tfb)
    return math.asin(hh), math.asin(sin_gt)


@njit(cache=True, fastmath=_FM)
def _mp_dp4(sin_ti, sin_to, phi, g_o, g_t, vv, s_az, md):
    """Per-lobe longitudinal x azimuthal density for one direction.

    Fills md (4,); the lobe geometry (g_o, g_t) comes from _lobes_s so the
    expensive per-bounce quantities are computed once and shared between
    light connection, pdf, and sampled-value evaluations.
    """
    cto = math.sqrt(max(1.0 - sin_to * sin_to, 0.0))
    cti = math.sqrt(max(1.0 - sin_ti * sin_ti, 0.0))
    for p in range(4):
        m = _mp_s(cti, cto, sin_ti, sin_to, vv[p])
        if p < 3:
            defl = 2.0 * p * g_t - 2.0 * g_o + p * math.pi
            npdf = _trim_logistic_s(_wrap_pi_s(phi - defl), s_az)
        else:
            npdf = 1.0 / (2.0 * math.pi)
        md[p] = m * npdf


@njit(cache=True, fastmath=_FM)
def _eval_s(sin_to, sin_ti, phi, h, eta, sr, sg, sb, vv, s_az, ap, out):
    """Angular scattering sum into out (3,) using scratch ap (4,3)."""
    g_o, g_t = _lobes_s(h, sin_to, eta, sr, sg, sb, ap)
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    cto = math.sqrt(max(1.0 - sin_to * sin_to, 0.0))
    cti = math.sqrt(max(1.0 - sin_ti * sin_ti, 0.0))
    for p in range(4):
        m = _mp_s(cti, cto, sin_ti, sin_to, vv[p])
        if p < 3:
            defl = 2.0 * p * g_t - 2.0 * g_o + p * math.pi
            npdf = _trim_logistic_s(_wrap_pi_s(phi - defl), s_az)
        else:
            npdf = 1.0 / (2.0 * math.pi)
        mn = m * npdf
        out[0] += ap[p, 0] * mn
        out[1] += ap[p, 1] * mn
        out[2] += ap[p, 2] * mn


@njit(cache=True, fastmath=_FM)
def _pdf_s(sin_to, sin_ti, phi, h, eta, sr, sg, sb, vv, s_az, ap):
    g_o, g_t = _lobes_s(h, sin_to, eta, sr, sg, sb, ap)
    w0 = 0.2126 * ap[0, 0] + 0.7152 * ap[0, 1] + 0.0722 * ap[0, 2]
    w1 = 0.2126 * ap[1, 0] + 0.7152 * ap[1, 1] + 0.0722 * ap[1, 2]
    w2 = 0.2126 * ap[2, 0] + 0.7152 * ap[2, 1] + 0.0722 * ap[2, 2]
    w3 = 0.2126 * ap[3, 0] + 0.7152 * ap[3, 1] + 0.0722 * ap[3, 2]
    total = max(w0 + w1 + w2 + w3, 1e-9)
    cto = math.sqrt(max(1.0 - sin_to * sin_to, 0.0))
    cti = math.sqrt(max(1.0 - sin_ti * sin_ti, 0.0))
    pdf = 0.0
    for p in range(4):
        m = _mp_s(cti, cto, sin_ti, sin_to, vv[p])
        if p < 3:
            defl = 2.0 * p * g_t - 2.0 * g_o + p * math.pi
            npdf = _trim_logistic_s(_wrap_pi_s(phi - defl), s_az)
        else:
            npdf = 1.0 / (2.0 * math.pi)
        if p == 0:
            sel = w0
        elif p == 1:
            sel = w1
        elif p == 2:
            sel = w2
        else:
            sel = w3
        pdf += (sel / total) * m * npdf
    return pdf


@njit(cache=True, fastmath=_FM)
def _sample_lobes(state, sin_to, g_o, g_t, vv, s_az, ap, md):
    """Draw a direction from precomputed lobes; fused pdf and value.

    Returns (state, sin_ti, phi, pdf, vr, vg, vb) where (vr, vg, vb) is the
    scattering value S for the drawn direction, sharing the md (4,) scratch.
    """
    cos_to = math.sqrt(max(1.0 - sin_to * sin_to, 0.0))
    w0 = 0.2126 * ap[0, 0] + 0.7152 * ap[0, 1] + 0.0722 * ap[0, 2]
    w1 = 0.2126 * ap[1, 0] + 0.7152 * ap[1, 1] + 0.0722 * ap[1, 2]
    w2 = 0.2126 * ap[2, 0] + 0.7152 * ap[2, 1] + 0.0722 * ap[2, 2]
    w3 = 0.2126 * ap[3, 0] + 0.7152 * ap[3, 1] + 0.0722 * ap[3, 2]
    total = max(w0 + w1 + w2 + w3, 1e-9)
    state, u0 = _rand(state)
    state, u1 = _rand(state)
    state, u2 = _rand(state)
    state, u3 = _rand(state)
    c = u0 * total
    if c < w0:
        p = 0
    elif c < w0 + w1:
        p = 1
    elif c < w0 + w1 + w2:
        p = 2
    else:
        p = 3
    v = vv[p]
    if u1 < 1e-5:
        u1 = 1e-5
    cos_theta = 1.0 + v * math.log(u1 + (1.0 - u1) * math.exp(-2.0 / v))
    sin_theta = math.sqrt(max(1.0 - cos_theta * cos_theta, 0.0))
    cos_phi_g = math.cos(2.0 * math.pi * u2)
    sin_ti = -cos_theta * sin_to + sin_theta * cos_phi_g * cos_to
    if sin_ti < -1.0:
        sin_ti = -1.0
    elif sin_ti > 1.0:
        sin_ti = 1.0
    if p < 3:
        defl = 2.0 * p * g_t - 2.0 * g_o + p * math.pi
        phi = _wrap_pi_s(defl + _sample_trim_logistic_s(u3, s_az))
    else:
        phi = 2.0 * math.pi * u3 - math.pi
    _mp_dp4(sin_ti, sin_to, phi, g_o, g_t, vv, s_az, md)
    pdf = (w0 * md[0] + w1 * md[1] + w2 * md[2] + w3 * md[3]) / total
    vr = (ap[0, 0] * md[0] + ap[1, 0] * md[1]
          + ap[2, 0] * md[2] + ap[3, 0] * md[3])
    vg = (ap[0, 1] * md[0] + ap[1, 1] * md[1]
          + ap[2, 1] * md[2] + ap[3, 1] * md[3])
    vb = (ap[0, 2] * md[0] + ap[1, 2] * md[1]
          + ap[2, 2] * md[2] + ap[3, 2] * md[3])
    return state, sin_ti, phi, pdf, vr, vg, vb


@njit(cache=True, fastmath=_FM)
def _sample_s(state, sin_to, h, eta, sr, sg, sb, vv, s_az, ap):
    """Draw (sin_ti, phi); returns (state, sin_ti, phi, pdf)."""
    g_o, g_t = _lobes_s(h, sin_to, eta, sr, sg, sb, ap)
    md = np.empty(4)
    state, sin_ti, phi, pdf, vr, vg, vb = _sample_lobes(
        state, sin_to, g_o, g_t, vv, s_az, ap, md)
    return state, sin_ti, phi, pdf


# ---------------------------------------------------------------------------
# intersection primitives
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def _cap_t(ox, oy, oz, dx, dy, dz,
           ax, ay, az, bx, by, bz, r, tmin, tmax):
    """Nearest ray-capsule intersection in (tmin, tmax], or MISS."""
    bax = bx - ax
    bay = by - ay
    baz = bz - az
    oax = ox - ax
    oay = oy - ay
    oaz = oz - az
    baba = bax * bax + bay * bay + baz * baz
    bard = bax * dx + bay * dy + baz * dz
    baoa = bax * oax + bay * oay + baz * oaz
    rdoa = dx * oax + dy * oay + dz * oaz
    oaoa = oax * oax + oay * oay + oaz * oaz
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - r * r * baba
    if a > 1e-14:
        disc = b * b - a * c
        if disc >= 0.0:
            t = (-b - math.sqrt(disc)) / a
            y = baoa + t * bard
            if 0.0 <= y <= baba and tmin < t <= tmax:
                return t
            # try the sphere cap on the side the cylinder hit missed
            if y < 0.0:
                ocx = oax
                ocy = oay
                ocz = oaz
            else:
                ocx = ox - bx
                ocy = oy - by
                ocz = oz - bz
            b2 = dx * ocx + dy * ocy + dz * ocz
            c2 = ocx * ocx + ocy * ocy + ocz * ocz - r * r
            disc2 = b2 * b2 - c2
            if disc2 > 0.0:
                t2 = -b2 - math.sqrt(disc2)
                if tmin < t2 <= tmax:
                    return t2
        return MISS
    # ray nearly parallel to the axis: test both end spheres
    best = MISS
    b2 = dx * oax + dy * oay + dz * oaz
    c2 = oaoa - r * r
    disc2 = b2 * b2 - c2
    if disc2 > 0.0:
        t2 = -b2 - math.sqrt(disc2)
        if tmin < t2 <= tmax:
            best = t2
    obx = ox - bx
    oby = oy - by
    obz = oz - bz
    b3 = dx * obx + dy * oby + dz * obz
    c3 = obx * obx + oby * oby + obz * obz - r * r
    disc3 = b3 * b3 - c3
    if disc3 > 0.0:
        t3 = -b3 - math.sqrt(disc3)
        if tmin < t3 <= tmax and t3 < best:
            best = t3
    return best


@njit(cache=True, fastmath=_FM)
def _aabb_t(ox, oy, oz, ix, iy, iz, b0, b1, b2, b3, b4, b5, tmin, tmax):
    """Slab test with precomputed 1/direction; returns (hit, t_entry).

    Zero direction components give +-inf reciprocals; the comparison-based
    updates below treat any resulting NaN as "no clip", which errs toward
    testing the node (never skips a real hit).
    """
    t0 = tmin
    t1 = tmax
    ta = (b0 - ox) * ix
    tb = (b3 - ox) * ix
    if ta > tb:
        ta, tb = tb, ta
    if ta > t0:
        t0 = ta
    if tb < t1:
        t1 = tb
    ta = (b1 - oy) * iy
    tb = (b4 - oy) * iy
    if ta > tb:
        ta, tb = tb, ta
    if ta > t0:
        t0 = ta
    if tb < t1:
        t1 = tb
    ta = (b2 - oz) * iz
    tb = (b5 - oz) * iz
    if ta > tb:
        ta, tb = tb, ta
    if ta > t0:
        t0 = ta
    if tb < t1:
        t1 = tb
    return t0 <= t1, t0


@njit(cache=True, fastmath=_FM)
def _bvh_nearest(nb, nleft, nright, nstart, ncount, perm,
                 p0, p1, pr, pcurve,
                 ox, oy, oz, dx, dy, dz, tmin, tmax,
                 skip_curve, skip_dist, stack, tstack):
    """Nearest capsule hit; front-to-back traversal with entry-t pruning."""
    best_t = tmax
    best_p = -1
    ix = 1.0 / dx if dx != 0.0 else math.inf
    iy = 1.0 / dy if dy != 0.0 else math.inf
    iz = 1.0 / dz if dz != 0.0 else math.inf
    hit0, te0 = _aabb_t(ox, oy, oz, ix, iy, iz,
                        nb[0, 0], nb[0, 1], nb[0, 2],
                        nb[0, 3], nb[0, 4], nb[0, 5], tmin, best_t)
    if not hit0:
        return best_t, best_p
    sp = 1
    stack[0] = 0
    tstack[0] = te0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if tstack[sp] > best_t:
            continue
        if nleft[n] < 0:
            for k in range(nstart[n], nstart[n] + ncount[n]):
                p = perm[k]
                t = _cap_t(ox, oy, oz, dx, dy, dz,
                           p0[p, 0], p0[p, 1], p0[p, 2],
                           p1[p, 0], p1[p, 1], p1[p, 2],
                           pr[p], tmin, best_t)
                # Ties (e.g. a hit on the sphere cap shared by two
                # consecutive segments of one curve) resolve to the lowest
                # primitive index so results match brute-force scans and are
                # independent of traversal order.
                if t < best_t or (t == best_t and best_p >= 0 and p < best_p):
                    if pcurve[p] == skip_curve and t < skip_dist:
                        continue
                    best_t = t
                    best_p = p
        else:
            nl = nleft[n]
            nr = nright[n]
            hl, tl = _aabb_t(ox, oy, oz, ix, iy, iz,
                             nb[nl, 0], nb[nl, 1], nb[nl, 2],
                             nb[nl, 3], nb[nl, 4], nb[nl, 5],
                             tmin, best_t)
            hr, tr = _aabb_t(ox, oy, oz, ix, iy, iz,
                             nb[nr, 0], nb[nr, 1], nb[nr, 2],
                             nb[nr, 3], nb[nr, 4], nb[nr, 5],
                             tmin, best_t)
            if hl and hr:
                if tl <= tr:        # push far child first
                    stack[sp] = nr
                    tstack[sp] = tr
                    sp += 1
                    stack[sp] = nl
                    tstack[sp] = tl
                    sp += 1
                else:
                    stack[sp] = nl
                    tstack[sp] = tl
                    sp += 1
                    stack[sp] = nr
                    tstack[sp] = tr
                    sp += 1
            elif hl:
                stack[sp] = nl
                tstack[sp] = tl
                sp += 1
            elif hr:
                stack[sp] = nr
                tstack[sp] = tr
                sp += 1
    return best_t, best_p


@njit(cache=True, fastmath=_FM)
def _brute_nearest(p0, p1, pr, pcurve,
                   ox, oy, oz, dx, dy, dz, tmin, tmax,
                   skip_curve, skip_dist):
    best_t = tmax
    best_p = -1
    for p in range(p0.shape[0]):
        t = _cap_t(ox, oy, oz, dx, dy, dz,
                   p0[p, 0], p0[p, 1], p0[p, 2],
                   p1[p, 0], p1[p, 1], p1[p, 2],
                   pr[p], tmin, best_t)
        if t < best_t:
            if pcurve[p] == skip_curve and t < skip_dist:
                continue
            best_t = t
            best_p = p
    return best_t, best_p


@njit(cache=True, fastmath=_FM)
def _bvh_occluded(nb, nleft, nright, nstart, ncount, perm,
                  p0, p1, pr, pcurve,
                  ox, oy, oz, dx, dy, dz, tmin, tmax,
                  skip_curve, skip_dist, stack):
    ix = 1.0 / dx if dx != 0.0 else math.inf
    iy = 1.0 / dy if dy != 0.0 else math.inf
    iz = 1.0 / dz if dz != 0.0 else math.inf
    sp = 1
    stack[0] = 0
    while sp > 0:
        sp -= 1
        n = stack[sp]
        hit, _te = _aabb_t(ox, oy, oz, ix, iy, iz,
                           nb[n, 0], nb[n, 1], nb[n, 2],
                           nb[n, 3], nb[n, 4], nb[n, 5], tmin, tmax)
        if not hit:
            continue
        if nleft[n] < 0:
            for k in range(nstart[n], nstart[n] + ncount[n]):
                p = perm[k]
                t = _cap_t(ox, oy, oz, dx, dy, dz,
                           p0[p, 0], p0[p, 1], p0[p, 2],
                           p1[p, 0], p1[p, 1], p1[p, 2],
                           pr[p], tmin, tmax)
                if t < MISS:
                    if pcurve[p] == skip_curve and t < skip_dist:
                        continue
                    return True
        else:
            stack[sp] = nleft[n]
            sp += 1
            stack[sp] = nright[n]
            sp += 1
    return False


_MAX_TILE_STEPS = 16384


@njit(cache=True, fastmath=_FM)
def _tiled_nearest(nb, nleft, nright, nstart, ncount, perm,
                   p0, p1, pr, pcurve,
                   ex, ey, zlo, zhi,
                   ox, oy, oz, dx, dy, dz, tmin, tmax,
                   skip_curve, skip_dist, stack, tstack):
    """March the infinite tiling; returns (t, prim, tile_ix, tile_iy).

    prim indexes the (ghost-augmented) primitive list; the tile indices
    are those of the tile whose local frame the hit was found in.
    """
    t_enter = tmin
    t_exit = tmax
    if dz > 1e-300 or dz < -1e-300:
        ta = (zlo - oz) / dz
        tb = (zhi - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_enter:
            t_enter = ta
        if tb < t_exit:
            t_exit = tb
    else:
        if oz < zlo or oz > zhi:
            return MISS, -1, 0, 0
    if t_enter > t_exit:
        return MISS, -1, 0, 0

    t_nudge = t_enter + 1e-9 * (1.0 + abs(t_enter))
    px = ox + dx * t_nudge
    py = oy + dy * t_nudge
    ix = int(math.floor(px / ex))
    iy = int(math.floor(py / ey))

    best_t = tmax
    best_p = -1
    best_ix = 0
    best_iy = 0
    for _ in range(_MAX_TILE_STEPS):
        lox = ox - ix * ex
        loy = oy - iy * ey
        t, p = _bvh_nearest(nb, nleft, nright, nstart, ncount, perm,
                            p0, p1, pr, pcurve,
                            lox, loy, oz, dx, dy, dz, tmin, best_t,
                            skip_curve, skip_dist, stack, tstack)
        if p >= 0:
            best_t = t
            best_p = p
            best_ix = ix
            best_iy = iy
        if dx > 0.0:
            tx = ((ix + 1) * ex - ox) / dx
        elif dx < 0.0:
            tx = (ix * ex - ox) / dx
        else:
            tx = MISS
        if dy > 0.0:
            ty = ((iy + 1) * ey - oy) / dy
        elif dy < 0.0:
            ty = (iy * ey - oy) / dy
        else:
            ty = MISS
        te = tx if tx < ty else ty
        if best_p >= 0 and best_t <= te + 1e-9:
            break
        if te > t_exit or te >= best_t:
            break
        if tx <= ty:
            ix += 1 if dx > 0.0 else -1
        else:
            iy += 1 if dy > 0.0 else -1
    if best_p < 0:
        return MISS, -1, 0, 0
    return best_t, best_p, best_ix, best_iy


@njit(cache=True, fastmath=_FM)
def _tiled_occluded(nb, nleft, nright, nstart, ncount, perm,
                    p0, p1, pr, pcurve,
                    ex, ey, zlo, zhi,
                    ox, oy, oz, dx, dy, dz, tmin, tmax,
                    skip_curve, skip_dist, stack):
    t_enter = tmin
    t_exit = tmax
    if dz > 1e-300 or dz < -1e-300:
        ta = (zlo - oz) / dz
        tb = (zhi - oz) / dz
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_enter:
            t_enter = ta
        if tb < t_exit:
            t_exit = tb
    else:
        if oz < zlo or oz > zhi:
            return False
    if t_enter > t_exit:
        return False

    t_nudge = t_enter + 1e-9 * (1.0 + abs(t_enter))
    ix = int(math.floor((ox + dx * t_nudge) / ex))
    iy = int(math.floor((oy + dy * t_nudge) / ey))

    for _ in range(_MAX_TILE_STEPS):
        lox = ox - ix * ex
        loy = oy - iy * ey
        if _bvh_occluded(nb, nleft, nright, nstart, ncount, perm,
                         p0, p1, pr, pcurve,
                         lox, loy, oz, dx, dy, dz, tmin, tmax,
                         skip_curve, skip_dist, stack):
            return True
        if dx > 0.0:
            tx = ((ix + 1) * ex - ox) / dx
        elif dx < 0.0:
            tx = (ix * ex - ox) / dx
        else:
            tx = MISS
        if dy > 0.0:
            ty = ((iy + 1) * ey - oy) / dy
        elif dy < 0.0:
            ty = (iy * ey - oy) / dy
        else:
            ty = MISS
        te = tx if tx < ty else ty
        if te > t_exit or te >= tmax:
            return False
        if tx <= ty:
            ix += 1 if dx > 0.0 else -1
        else:
            iy += 1 if dy > 0.0 else -1
    return False


# ---------------------------------------------------------------------------
# shading at a fiber hit
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def _hit_frame(praw, p0, p1, pr, hx, hy, hz, wox, woy, woz):
    """Local shading data at a hit in tile-local coordinates.

    Returns (ok, tangent xyz, zhat xyz, fiber-normal xyz, hoff, sin_to).
    """
    ax = p0[praw, 0]
    ay = p0[praw, 1]
    az = p0[praw, 2]
    bx = p1[praw, 0]
    by = p1[praw, 1]
    bz = p1[praw, 2]
    tx = bx - ax
    ty = by - ay
    tz = bz - az
    tl = math.sqrt(tx * tx + ty * ty + tz * tz)
    if tl < 1e-14:
        return (False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                0.0, 0.0, 0.0, 0.0, 0.0)
    tx /= tl
    ty /= tl
    tz /= tl
    # closest axis point (capsule axis clamped to the segment)
    s = ((hx - ax) * tx + (hy - ay) * ty + (hz - az) * tz)
    if s < 0.0:
        s = 0.0
    elif s > tl:
        s = tl
    cx = ax + s * tx
    cy = ay + s * ty
    cz = az + s * tz
    mx = hx - cx
    my = hy - cy
    mz = hz - cz
    ml = math.sqrt(mx * mx + my * my + mz * mz)
    if ml < 1e-14:
        return (False, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                0.0, 0.0, 0.0, 0.0, 0.0)
    mx /= ml
    my /= ml
    mz /= ml
    # view-perpendicular frame
    td = tx * wox + ty * woy + tz * woz
    zx = wox - td * tx
    zy = woy - td * ty
    zz = woz - td * tz
    zl = math.sqrt(zx * zx + zy * zy + zz * zz)
    if zl < 1e-9:
        return (False, tx, ty, tz, 0.0, 0.0, 0.0,
                mx, my, mz, 0.0, td)
    zx /= zl
    zy /= zl
    zz /= zl
    # offset across the fiber along tangent x zhat
    sx = ty * zz - tz * zy
    sy = tz * zx - tx * zz
    sz = tx * zy - ty * zx
    r = pr[praw]
    hoff = ((hx - cx) * sx + (hy - cy) * sy + (hz - cz) * sz) / r
    if hoff < -1.0:
        hoff = -1.0
    elif hoff > 1.0:
        hoff = 1.0
    return (True, tx, ty, tz, zx, zy, zz, mx, my, mz, hoff, td)


@njit(cache=True, fastmath=_FM)
def _radiance_at(nb, nleft, nright, nstart, ncount, perm,
                 p0, p1, pr, pcurve, paxis,
                 ex, ey, zlo, zhi,
                 sigma, eta, vvar, saz,
                 lpx, lpy, lpz, lir, lig, lib,
                 sxp, syp, szp, praw, qix, qiy, wox, woy, woz,
                 max_depth, state, stack, tstack, ap, md, col):
    """Path-traced radiance leaving a known fiber hit toward -w_o.

    ``(sxp, syp, szp)`` is the hit in scene (untiled patch) coordinates,
    ``praw`` the primitive hit inside tile ``(qix, qiy)``. Adds into
    ``col`` (3,) and returns the advanced RNG state.
    """
    trr = 1.0
    trg = 1.0
    trb = 1.0
    for depth in range(max_depth):
        hx = sxp - qix * ex
        hy = syp - qiy * ey
        (ok, tx, ty, tz, zx, zy, zz, mx, my, mz, hoff,
         sin_to) = _hit_frame(praw, p0, p1, pr, hx, hy, szp,
                              wox, woy, woz)
        if not ok:
            break
        axis = paxis[praw]
        g_o, g_t = _lobes_s(hoff, sin_to, eta[axis],
                            sigma[axis, 0], sigma[axis, 1],
                            sigma[axis, 2], ap)
        yx = zy * tz - zz * ty
        yy = zz * tx - zx * tz
        yz = zx * ty - zy * tx
        # next-event estimation toward the point light
        lwx = lpx - sxp
        lwy = lpy - syp
        lwz = lpz - szp
        r2 = lwx * lwx + lwy * lwy + lwz * lwz
        rl = math.sqrt(r2)
        lwx /= rl
        lwy /= rl
        lwz /= rl
        sin_tl = lwx * tx + lwy * ty + lwz * tz
        phi_l = math.atan2(lwx * yx + lwy * yy + lwz * yz,
                           lwx * zx + lwy * zy + lwz * zz)
        _mp_dp4(sin_tl, sin_to, phi_l, g_o, g_t,
                vvar[axis], saz[axis], md)
        sr = (ap[0, 0] * md[0] + ap[1, 0] * md[1]
              + ap[2, 0] * md[2] + ap[3, 0] * md[3])
        sg = (ap[0, 1] * md[0] + ap[1, 1] * md[1]
              + ap[2, 1] * md[2] + ap[3, 1] * md[3])
        sb = (ap[0, 2] * md[0] + ap[1, 2] * md[1]
              + ap[2, 2] * md[2] + ap[3, 2] * md[3])
        if sr > 0.0 or sg > 0.0 or sb > 0.0:
            occ = _tiled_occluded(
                nb, nleft, nright, nstart, ncount, perm,
                p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                sxp, syp, szp, lwx, lwy, lwz,
                1e-7, rl * (1.0 - 1e-6),
                pcurve[praw], 2.0 * pr[praw], stack)
            if not occ:
                col[0] += trr * sr * lir / r2
                col[1] += trg * sg * lig / r2
                col[2] += trb * sb * lib / r2
        # continue the path with a BSDF sample
        state, sin_ti, phi_i, pdf, vr, vg, vb = _sample_lobes(
            state, sin_to, g_o, g_t, vvar[axis], saz[axis], ap, md)
        if pdf <= 0.0:
            break
        trr *= vr / pdf
        trg *= vg / pdf
        trb *= vb / pdf
        if trr <= 0.0 and trg <= 0.0 and trb <= 0.0:
            break
        cos_ti = math.sqrt(max(1.0 - sin_ti * sin_ti, 0.0))
        cp = math.cos(phi_i)
        sp = math.sin(phi_i)
        dx = sin_ti * tx + cos_ti * (cp * zx + sp * yx)
        dy = sin_ti * ty + cos_ti * (cp * zy + sp * yy)
        dz = sin_ti * tz + cos_ti * (cp * zz + sp * yz)
        # Russian roulette once paths are deep
        if depth >= 7:
            q = trr
            if trg > q:
                q = trg
            if trb > q:
                q = trb
            if q > 0.95:
                q = 0.95
            state, u = _rand(state)
            if u >= q:
                break
            trr /= q
            trg /= q
            trb /= q
        t, praw, qix, qiy = _tiled_nearest(
            nb, nleft, nright, nstart, ncount, perm,
            p0, p1, pr, pcurve, ex, ey, zlo, zhi,
            sxp, syp, szp, dx, dy, dz, 1e-7, MISS,
            pcurve[praw], 2.0 * pr[praw], stack, tstack)
        if praw < 0:
            break
        sxp = sxp + t * dx
        syp = syp + t * dy
        szp = szp + t * dz
        wox = -dx
        woy = -dy
        woz = -dz
    return state


@njit(cache=True, fastmath=_FM)
def _radiance(nb, nleft, nright, nstart, ncount, perm,
              p0, p1, pr, pcurve, paxis,
              ex, ey, zlo, zhi,
              sigma, eta, vvar, saz,
              lpx, lpy, lpz, lir, lig, lib,
              ox, oy, oz, dx, dy, dz,
              max_depth, state, stack, tstack, ap, md, col):
    """Path-traced radiance for one camera ray; adds into col (3,)."""
    t, praw, qix, qiy = _tiled_nearest(
        nb, nleft, nright, nstart, ncount, perm,
        p0, p1, pr, pcurve, ex, ey, zlo, zhi,
        ox, oy, oz, dx, dy, dz, 1e-7, MISS, -1, 0.0, stack, tstack)
    if praw < 0:
        return state
    return _radiance_at(nb, nleft, nright, nstart, ncount, perm,
                        p0, p1, pr, pcurve, paxis,
                        ex, ey, zlo, zhi,
                        sigma, eta, vvar, saz,
                        lpx, lpy, lpz, lir, lig, lib,
                        ox + t * dx, oy + t * dy, oz + t * dz,
                        praw, qix, qiy, -dx, -dy, -dz,
                        max_depth, state, stack, tstack, ap, md, col)


# ---------------------------------------------------------------------------
# image kernels
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True, fastmath=_FM)
def render_full_kernel(nb, nleft, nright, nstart, ncount, perm,
                       p0, p1, pr, pcurve, paxis,
                       ex, ey, zlo, zhi,
                       sigma, eta, vvar, saz,
                       lpx, lpy, lpz, lir, lig, lib,
                       cam_o, cam_r, cam_u, cam_f, tan_x, tan_y,
                       spp, seed, max_depth, exposure, img):
    """Stratified per-pixel path tracing; img is (H, W, 3) preallocated."""
    height = img.shape[0]
    width = img.shape[1]
    strat = int(math.sqrt(spp))
    if strat * strat != spp:
        strat = 0
    for pix in prange(height * width):
        yi = pix // width
        xi = pix % width
        stack = np.empty(128, np.int32)
        tstack = np.empty(128, np.float64)
        ap = np.empty((4, 3), np.float64)
        md = np.empty(4, np.float64)
        col = np.zeros(3, np.float64)
        for samp in range(spp):
            state = _seed_path(seed, pix, samp)
            state, u1 = _rand(state)
            state, u2 = _rand(state)
            if strat > 0:
                jx = ((samp % strat) + u1) / strat
                jy = ((samp // strat) + u2) / strat
            else:
                jx = u1
                jy = u2
            su = (2.0 * (xi + jx) / width - 1.0) * tan_x
            sv = (1.0 - 2.0 * (yi + jy) / height) * tan_y
            dx = cam_f[0] + su * cam_r[0] + sv * cam_u[0]
            dy = cam_f[1] + su * cam_r[1] + sv * cam_u[1]
            dz = cam_f[2] + su * cam_r[2] + sv * cam_u[2]
            dl = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= dl
            dy /= dl
            dz /= dl
            state = _radiance(nb, nleft, nright, nstart, ncount, perm,
                              p0, p1, pr, pcurve, paxis,
                              ex, ey, zlo, zhi,
                              sigma, eta, vvar, saz,
                              lpx, lpy, lpz, lir, lig, lib,
                              cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                              max_depth, state, stack, tstack, ap, md, col)
        img[yi, xi, 0] = col[0] / spp * exposure
        img[yi, xi, 1] = col[1] / spp * exposure
        img[yi, xi, 2] = col[2] / spp * exposure


@njit(cache=True, parallel=True, fastmath=_FM)
def render_approx_kernel(nb, nleft, nright, nstart, ncount, perm,
                         p0, p1, pr, pcurve, paxis,
                         ex, ey, zlo, zhi,
                         sigma, eta, vvar, saz, kd, wd,
                         lpx, lpy, lpz, lir, lig, lib,
                         cam_o, cam_r, cam_u, cam_f, tan_x, tan_y,
                         spp, seed, exposure, img):
    """Primary visibility + one shadow ray, fiber lobe + diffuse blend."""
    height = img.shape[0]
    width = img.shape[1]
    strat = int(math.sqrt(spp))
    if strat * strat != spp:
        strat = 0
    for pix in prange(height * width):
        yi = pix // width
        xi = pix % width
        stack = np.empty(128, np.int32)
        tstack = np.empty(128, np.float64)
        ap = np.empty((4, 3), np.float64)
        stmp = np.empty(3, np.float64)
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for samp in range(spp):
            state = _seed_path(seed, pix, samp)
            state, u1 = _rand(state)
            state, u2 = _rand(state)
            if strat > 0:
                jx = ((samp % strat) + u1) / strat
                jy = ((samp // strat) + u2) / strat
            else:
                jx = u1
                jy = u2
            su = (2.0 * (xi + jx) / width - 1.0) * tan_x
            sv = (1.0 - 2.0 * (yi + jy) / height) * tan_y
            dx = cam_f[0] + su * cam_r[0] + sv * cam_u[0]
            dy = cam_f[1] + su * cam_r[1] + sv * cam_u[1]
            dz = cam_f[2] + su * cam_r[2] + sv * cam_u[2]
            dl = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= dl
            dy /= dl
            dz /= dl
            t, praw, qix, qiy = _tiled_nearest(
                nb, nleft, nright, nstart, ncount, perm,
                p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                cam_o[0], cam_o[1], cam_o[2], dx, dy, dz,
                1e-7, MISS, -1, 0.0, stack, tstack)
            if praw < 0:
                continue
            sxp = cam_o[0] + t * dx
            syp = cam_o[1] + t * dy
            szp = cam_o[2] + t * dz
            hx = sxp - qix * ex
            hy = syp - qiy * ey
            (ok, tx, ty, tz, zx, zy, zz, mx, my, mz, hoff,
             sin_to) = _hit_frame(praw, p0, p1, pr, hx, hy, szp,
                                  -dx, -dy, -dz)
            if not ok:
                continue
            lwx = lpx - sxp
            lwy = lpy - syp
            lwz = lpz - szp
            r2 = lwx * lwx + lwy * lwy + lwz * lwz
            rl = math.sqrt(r2)
            lwx /= rl
            lwy /= rl
            lwz /= rl
            occ = _tiled_occluded(
                nb, nleft, nright, nstart, ncount, perm,
                p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                sxp, syp, szp, lwx, lwy, lwz,
                1e-7, rl * (1.0 - 1e-6),
                pcurve[praw], 2.0 * pr[praw], stack)
            if occ:
                continue
            axis = paxis[praw]
            yx = zy * tz - zz * ty
            yy = zz * tx - zx * tz
            yz = zx * ty - zy * tx
            sin_tl = lwx * tx + lwy * ty + lwz * tz
            phi_l = math.atan2(lwx * yx + lwy * yy + lwz * yz,
                               lwx * zx + lwy * zy + lwz * zz)
            _eval_s(sin_to, sin_tl, phi_l, hoff, eta[axis],
                    sigma[axis, 0], sigma[axis, 1], sigma[axis, 2],
                    vvar[axis], saz[axis], ap, stmp)
            # diffuse blend: macro normal is +z in patch space
            cos_n = lwz
            fr = 0.0
            fg = 0.0
            fb = 0.0
            if cos_n > 0.0:
                cos_m = lwx * mx + lwy * my + lwz * mz
                if cos_m < 0.0:
                    cos_m = 0.0
                f_d = (wd * cos_m / (math.pi * max(cos_n, 1e-9))
                       + (1.0 - wd) / math.pi) * cos_n
                fr = f_d * kd[axis, 0]
                fg = f_d * kd[axis, 1]
                fb = f_d * kd[axis, 2]
            cr += (stmp[0] + fr) * lir / r2
            cg += (stmp[1] + fg) * lig / r2
            cb += (stmp[2] + fb) * lib / r2
        img[yi, xi, 0] = cr / spp * exposure
        img[yi, xi, 1] = cg / spp * exposure
        img[yi, xi, 2] = cb / spp * exposure


# ---------------------------------------------------------------------------
# single-ray helpers (public wrappers and test oracles)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def ray_nearest_bvh(nb, nleft, nright, nstart, ncount, perm,
                    p0, p1, pr, pcurve,
                    ox, oy, oz, dx, dy, dz, tmin, tmax):
    stack = np.empty(128, np.int32)
    tstack = np.empty(128, np.float64)
    return _bvh_nearest(nb, nleft, nright, nstart, ncount, perm,
                        p0, p1, pr, pcurve,
                        ox, oy, oz, dx, dy, dz, tmin, tmax,
                        -1, 0.0, stack, tstack)


@njit(cache=True, fastmath=_FM)
def ray_nearest_brute(p0, p1, pr, pcurve,
                      ox, oy, oz, dx, dy, dz, tmin, tmax):
    return _brute_nearest(p0, p1, pr, pcurve,
                          ox, oy, oz, dx, dy, dz, tmin, tmax, -1, 0.0)


@njit(cache=True, fastmath=_FM)
def ray_tiled(nb, nleft, nright, nstart, ncount, perm,
              p0, p1, pr, pcurve,
              ex, ey, zlo, zhi,
              ox, oy, oz, dx, dy, dz, tmin, tmax):
    stack = np.empty(128, np.int32)
    tstack = np.empty(128, np.float64)
    return _tiled_nearest(nb, nleft, nright, nstart, ncount, perm,
                          p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                          ox, oy, oz, dx, dy, dz, tmin, tmax,
                          -1, 0.0, stack, tstack)


@njit(cache=True, fastmath=_FM)
def capsule_hit_t(ox, oy, oz, dx, dy, dz,
                  ax, ay, az, bx, by, bz, r):
    return _cap_t(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz,
                  r, 1e-12, MISS)


@njit(cache=True, parallel=True, fastmath=_FM)
def batch_nearest_bvh(nb, nleft, nright, nstart, ncount, perm,
                      p0, p1, pr, pcurve, origins, dirs, tmin,
                      out_t, out_p):
    for i in prange(origins.shape[0]):
        stack = np.empty(128, np.int32)
        tstack = np.empty(128, np.float64)
        t, p = _bvh_nearest(nb, nleft, nright, nstart, ncount, perm,
                            p0, p1, pr, pcurve,
                            origins[i, 0], origins[i, 1], origins[i, 2],
                            dirs[i, 0], dirs[i, 1], dirs[i, 2],
                            tmin, MISS, -1, 0.0, stack, tstack)
        out_t[i] = t
        out_p[i] = p


@njit(cache=True, parallel=True, fastmath=_FM)
def batch_nearest_brute(p0, p1, pr, pcurve, origins, dirs, tmin,
                        out_t, out_p):
    for i in prange(origins.shape[0]):
        t, p = _brute_nearest(p0, p1, pr, pcurve,
                              origins[i, 0], origins[i, 1], origins[i, 2],
                              dirs[i, 0], dirs[i, 1], dirs[i, 2],
                              tmin, MISS, -1, 0.0)
        out_t[i] = t
        out_p[i] = p


@njit(cache=True, parallel=True, fastmath=_FM)
def batch_tiled(nb, nleft, nright, nstart, ncount, perm,
                p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                origins, dirs, tmin,
                out_t, out_p, out_ix, out_iy):
    for i in prange(origins.shape[0]):
        stack = np.empty(128, np.int32)
        tstack = np.empty(128, np.float64)
        t, p, tx, ty = _tiled_nearest(nb, nleft, nright, nstart, ncount,
                                      perm, p0, p1, pr, pcurve,
                                      ex, ey, zlo, zhi,
                                      origins[i, 0], origins[i, 1],
                                      origins[i, 2],
                                      dirs[i, 0], dirs[i, 1], dirs[i, 2],
                                      tmin, MISS, -1, 0.0, stack, tstack)
        out_t[i] = t
        out_p[i] = p
        out_ix[i] = tx
        out_iy[i] = ty


@njit(cache=True, fastmath=_FM)
def trace_micro_kernel(nb, nleft, nright, nstart, ncount, perm,
                       p0, p1, pr, pcurve, paxis,
                       ex, ey, zlo, zhi,
                       sigma, eta, vvar, saz,
                       lpx, lpy, lpz, lir, lig, lib,
                       sxp, syp, szp, praw, qix, qiy, wox, woy, woz,
                       max_depth, seed, n_paths, out):
    """Average radiance over n_paths independent paths from one hit."""
    stack = np.empty(128, np.int32)
    tstack = np.empty(128, np.float64)
    ap = np.empty((4, 3), np.float64)
    md = np.empty(4, np.float64)
    col = np.zeros(3, np.float64)
    for i in range(n_paths):
        state = _seed_path(seed, 0, i)
        state = _radiance_at(nb, nleft, nright, nstart, ncount, perm,
                             p0, p1, pr, pcurve, paxis,
                             ex, ey, zlo, zhi,
                             sigma, eta, vvar, saz,
                             lpx, lpy, lpz, lir, lig, lib,
                             sxp, syp, szp, praw, qix, qiy,
                             wox, woy, woz,
                             max_depth, state, stack, tstack, ap, md, col)
    out[0] = col[0] / n_paths
    out[1] = col[1] / n_paths
    out[2] = col[2] / n_paths


# ---------------------------------------------------------------------------
# triangle-mesh macro scene
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=_FM)
def _tri_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, tmin, tmax):
    """Watertight-enough Moller-Trumbore; returns (t, b1, b2) or (MISS,..)."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if -1e-12 < det < 1e-12:
        return MISS, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0[0]
    sy = oy - v0[1]
    sz = oz - v0[2]
    b1 = (sx * px + sy * py + sz * pz) * inv
    if b1 < 0.0 or b1 > 1.0:
        return MISS, 0.0, 0.0
    qx = sy * e1[2] - sz * e1[1]
    qy = sz * e1[0] - sx * e1[2]
    qz = sx * e1[1] - sy * e1[0]
    b2 = (dx * qx + dy * qy + dz * qz) * inv
    if b2 < 0.0 or b1 + b2 > 1.0:
        return MISS, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= tmin or t > tmax:
        return MISS, 0.0, 0.0
    return t, b1, b2


@njit(cache=True, fastmath=_FM)
def _mesh_nearest(tv0, te1, te2, ox, oy, oz, dx, dy, dz, tmin):
    best_t = MISS
    best_f = -1
    bb1 = 0.0
    bb2 = 0.0
    for f in range(tv0.shape[0]):
        t, b1, b2 = _tri_t(ox, oy, oz, dx, dy, dz,
                           tv0[f], te1[f], te2[f], tmin, best_t)
        if t < best_t:
            best_t = t
            best_f = f
            bb1 = b1
            bb2 = b2
    return best_t, best_f, bb1, bb2


@njit(cache=True, parallel=True, fastmath=_FM)
def render_mesh_kernel(nb, nleft, nright, nstart, ncount, perm,
                       p0, p1, pr, pcurve, paxis,
                       ex, ey, zlo, zhi,
                       sigma, eta, vvar, saz,
                       tv0, te1, te2, ttan, tbit, tnrm,
                       tuv0, tdu1, tdu2,
                       lx, ly, lz, lir, lig, lib, inv_s,
                       cam_o, cam_r, cam_u, cam_f, tan_x, tan_y,
                       spp, seed, max_depth, macro_depth, exposure, img):
    """Two-scale tracing over a triangle mesh carrying the fiber patch.

    World geometry is in cm; fiber space in patch cells (1 cell = ``1/inv_s``
    cm). Rays passing through fiber gaps continue to the next macro hit, up
    to ``macro_depth`` macro-surface interactions.
    """
    height = img.shape[0]
    width = img.shape[1]
    strat = int(math.sqrt(spp))
    if strat * strat != spp:
        strat = 0
    pad = 0.001 * (zhi - zlo)
    for pix in prange(height * width):
        yi = pix // width
        xi = pix % width
        stack = np.empty(128, np.int32)
        tstack = np.empty(128, np.float64)
        ap = np.empty((4, 3), np.float64)
        md = np.empty(4, np.float64)
        col = np.zeros(3, np.float64)
        for samp in range(spp):
            state = _seed_path(seed, pix, samp)
            state, u1 = _rand(state)
            state, u2 = _rand(state)
            if strat > 0:
                jx = ((samp % strat) + u1) / strat
                jy = ((samp // strat) + u2) / strat
            else:
                jx = u1
                jy = u2
            su = (2.0 * (xi + jx) / width - 1.0) * tan_x
            sv = (1.0 - 2.0 * (yi + jy) / height) * tan_y
            wdx = cam_f[0] + su * cam_r[0] + sv * cam_u[0]
            wdy = cam_f[1] + su * cam_r[1] + sv * cam_u[1]
            wdz = cam_f[2] + su * cam_r[2] + sv * cam_u[2]
            dl = math.sqrt(wdx * wdx + wdy * wdy + wdz * wdz)
            wdx /= dl
            wdy /= dl
            wdz /= dl
            wox = cam_o[0]
            woy = cam_o[1]
            woz = cam_o[2]
            for _ in range(macro_depth):
                mt, mf, b1, b2 = _mesh_nearest(tv0, te1, te2,
                                               wox, woy, woz,
                                               wdx, wdy, wdz, 1e-6)
                if mf < 0:
                    break
                hxw = wox + mt * wdx
                hyw = woy + mt * wdy
                hzw = woz + mt * wdz
                tx = ttan[mf, 0]
                ty = ttan[mf, 1]
                tz = ttan[mf, 2]
                bx = tbit[mf, 0]
                by = tbit[mf, 1]
                bz = tbit[mf, 2]
                nx = tnrm[mf, 0]
                ny = tnrm[mf, 1]
                nz = tnrm[mf, 2]
                uu = tuv0[mf, 0] + b1 * tdu1[mf, 0] + b2 * tdu2[mf, 0]
                vv = tuv0[mf, 1] + b1 * tdu1[mf, 1] + b2 * tdu2[mf, 1]
                ldx = wdx * tx + wdy * ty + wdz * tz
                ldy = wdx * bx + wdy * by + wdz * bz
                ldz = wdx * nx + wdy * ny + wdz * nz
                # pull the micro ray origin back to the slab boundary
                if ldz < 0.0:
                    oz_t = zhi + pad
                else:
                    oz_t = zlo - pad
                adz = abs(ldz)
                if adz < 1e-6:
                    adz = 1e-6
                tb = abs(oz_t) / adz
                cap = 8.0 * (ex if ex > ey else ey) + abs(oz_t)
                if tb > cap:
                    tb = cap
                lox = uu - ldx * tb
                loy = vv - ldy * tb
                loz = -ldz * tb
                t, praw, qix, qiy = _tiled_nearest(
                    nb, nleft, nright, nstart, ncount, perm,
                    p0, p1, pr, pcurve, ex, ey, zlo, zhi,
                    lox, loy, loz, ldx, ldy, ldz, 1e-7, MISS,
                    -1, 0.0, stack, tstack)
                if praw < 0:
                    # through a gap: continue the macro path
                    wox = hxw + 1e-5 * wdx
                    woy = hyw + 1e-5 * wdy
                    woz = hzw + 1e-5 * wdz
                    continue
                # light position in the local patch frame
                dlx = lx - hxw
                dly = ly - hyw
                dlz = lz - hzw
                lpx = (dlx * tx + dly * ty + dlz * tz) * inv_s + uu
                lpy = (dlx * bx + dly * by + dlz * bz) * inv_s + vv
                lpz = (dlx * nx + dly * ny + dlz * nz) * inv_s
                state = _radiance_at(
                    nb, nleft, nright, nstart, ncount, perm,
                    p0, p1, pr, pcurve, paxis,
                    ex, ey, zlo, zhi,
                    sigma, eta, vvar, saz,
                    lpx, lpy, lpz, lir, lig, lib,
                    lox + t * ldx, loy + t * ldy, loz + t * ldz,
                    praw, qix, qiy, -ldx, -ldy, -ldz,
                    max_depth, state, stack, tstack, ap, md, col)
                break
        img[yi, xi, 0] = col[0] / spp * exposure
        img[yi, xi, 1] = col[1] / spp * exposure
        img[yi, xi, 2] = col[2] / spp * exposure

