"""Two-stage parameter recovery from a single target image.

Stage one (``stage_joint``) fits geometry and appearance jointly against
the fast approximate renderer; stage two (``stage_refine``) freezes the
geometry and refines the remaining optical parameters against the full
path tracer.  Gradients come from stochastic finite differences with
common random numbers: every forward render uses fixed seeds, so the
loss is a deterministic function of the parameters and fits reproduce
bit-for-bit — including across checkpoint/resume boundaries.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fibers import generate_patch
from .losses import FeatureBank, PriorSpec, total_loss
from .tracer import build_bvh, render, render_approx, scene_for
from .weave import (
    AXES,
    PARAM_RANGES,
    ConfigError,
    FabricConfig,
    FabricSpec,
    FiberAppearanceParams,
    GeometrySettings,
    AppearanceSettings,
    SharedAppearance,
    YarnGeomParams,
    default_config,
    pattern_matrix,
)

__all__ = [
    "FitError",
    "GradientConfig",
    "Stage2Config",
    "Stage3Config",
    "FitSeeds",
    "FitConfig",
    "ParamVector",
    "FitResult",
    "STAGE2_PARAMS",
    "STAGE3_PARAMS",
    "init_params",
    "estimate_gradient",
    "refine_start",
    "stage_joint",
    "stage_refine",
]


class FitError(RuntimeError):
    """Numerical failure during optimization (non-finite loss)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientConfig:
    """Stochastic gradient estimator settings.

    ``estimator`` is "spsa" (simultaneous perturbation, two forward
    evaluations per sample regardless of dimension) or "central"
    (central differences per active parameter, practical up to roughly a
    dozen active entries).  ``perturbation`` scales each parameter's
    probe step as a fraction of its documented range.
    """

    estimator: str = "spsa"
    perturbation: float = 0.02
    samples: int = 1
    calibrate: bool = True

    def __post_init__(self):
        if self.estimator not in ("spsa", "central"):
            raise ConfigError("estimator must be 'spsa' or 'central'")
        if not self.perturbation > 0:
            raise ConfigError("perturbation must be > 0")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")


@dataclass(frozen=True)
class Stage2Config:
    """Joint geometry–appearance stage (approximate forward model)."""

    iterations: int = 75
    step: float = 0.01
    spp: int = 4
    image_size: tuple[int, int] = (256, 256)
    supersample: int = 2

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.step > 0:
            raise ConfigError("step must be > 0")
        if self.spp < 1 or self.supersample < 1:
            raise ConfigError("spp and supersample must be >= 1")


@dataclass(frozen=True)
class Stage3Config:
    """Appearance refinement stage (full path-traced forward model)."""

    iterations: int = 50
    step: float = 0.02
    spp_forward: int = 256
    max_depth: int = 64

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.step > 0:
            raise ConfigError("step must be > 0")
        if self.spp_forward < 1 or self.max_depth < 1:
            raise ConfigError("spp_forward and max_depth must be >= 1")


@dataclass(frozen=True)
class FitSeeds:
    """Every RNG stream a fit consumes, pinned for reproducibility."""

    geometry: int = 0
    render: int = 0
    gradient: int = 0
    bank: int = 0


@dataclass(frozen=True)
class FitConfig:
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    gradient: GradientConfig = field(default_factory=GradientConfig)
    seeds: FitSeeds = field(default_factory=FitSeeds)
    density: int = 10
    snapshot_every: int = 0

    def __post_init__(self):
        if self.density < 1:
            raise ConfigError("density must be >= 1")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be >= 0")


# ---------------------------------------------------------------------------
# parameter vector
# ---------------------------------------------------------------------------

_GEOM_FIELDS = ("u_max", "beta", "e_yarn", "m", "G", "s", "alpha", "Q")
_RGB = ("r", "g", "b")

# Parameters the joint stage moves (per axis unless noted); everything
# else — fiber counts, yarn radius, migration, twist frequency — stays
# at its preset value through both stages.
STAGE2_PARAMS = ("u_max", "beta", "alpha", "Q", "C", "gamma_M", "gamma_N",
                 "gamma_M0", "k_d", "w_d", "log_exposure")
# The refinement stage drops the diffuse stand-in and the geometry.
STAGE3_PARAMS = ("C", "gamma_M", "gamma_N", "gamma_M0")


def _slot_names() -> tuple[str, ...]:
    names = []
    for a in AXES:
        for f in _GEOM_FIELDS:
            names.append(f"{a}.{f}")
        for ch in _RGB:
            names.append(f"{a}.C.{ch}")
        for f in ("gamma_M", "gamma_N", "gamma_M0"):
            names.append(f"{a}.{f}")
        for ch in _RGB:
            names.append(f"{a}.k_d.{ch}")
    names += ["w_d", "log_exposure", "n_h", "n_v"]
    return tuple(names)


_SLOT_NAMES = _slot_names()
_SLOT_INDEX = {n: i for i, n in enumerate(_SLOT_NAMES)}


def _param_key(name: str) -> str:
    """Slot name -> parameter-table key ("weft.C.r" -> "C")."""
    parts = name.split(".")
    if parts[-1] in _RGB:
        return parts[-2]
    return parts[-1]


def _stage_mask(stage: int) -> np.ndarray:
    keys = STAGE2_PARAMS if stage == 2 else STAGE3_PARAMS
    mask = np.array([_param_key(n) in keys for n in _SLOT_NAMES])
    mask.setflags(write=False)
    return mask


def _slot_bounds() -> tuple[np.ndarray, np.ndarray]:
    """Optimizer bounds: documented ranges for movable slots, open bounds
    for frozen ones (those are validated by the config constructors)."""
    movable = set(STAGE2_PARAMS) | set(STAGE3_PARAMS)
    lo = np.full(len(_SLOT_NAMES), -np.inf)
    hi = np.full(len(_SLOT_NAMES), np.inf)
    for i, n in enumerate(_SLOT_NAMES):
        key = _param_key(n)
        if key in movable:
            lo[i], hi[i] = PARAM_RANGES[key]
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


_BOUNDS_LO, _BOUNDS_HI = _slot_bounds()


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, named view of every fittable (and frozen) fabric parameter.

    ``active`` marks the entries the current stage optimizes; the rest
    are carried bit-identically through updates.  ``base`` supplies the
    non-vector parts of the config (capture rig, pattern, scales).
    """

    kind: str
    values: np.ndarray
    active: np.ndarray
    base: FabricConfig

    names: tuple[str, ...] = _SLOT_NAMES

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (len(self.names),):
            raise ConfigError("parameter vector has wrong length")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        a = np.ascontiguousarray(self.active, dtype=bool)
        a.setflags(write=False)
        object.__setattr__(self, "active", a)

    # -- access -----------------------------------------------------------

    def index(self, name: str) -> int:
        try:
            return _SLOT_INDEX[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None

    def get(self, name: str) -> float:
        return float(self.values[self.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return _BOUNDS_LO, _BOUNDS_HI

    # -- functional updates -------------------------------------------------

    def replace_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.kind, values, self.active, self.base)

    def replace(self, **updates) -> "ParamVector":
        v = self.values.copy()
        for name, val in updates.items():
            v[self.index(name)] = float(val)
        return self.replace_values(v)

    def with_stage(self, stage: int) -> "ParamVector":
        if stage not in (2, 3):
            raise ConfigError("stage must be 2 or 3")
        return ParamVector(self.kind, self.values, _stage_mask(stage),
                           self.base)

    # -- conversion ---------------------------------------------------------

    @staticmethod
    def from_config(cfg: FabricConfig, stage: int = 2) -> "ParamVector":
        vals = np.empty(len(_SLOT_NAMES))
        for i, n in enumerate(_SLOT_NAMES):
            if n == "w_d":
                vals[i] = cfg.appearance.shared.w_d
            elif n == "log_exposure":
                vals[i] = math.log(cfg.capture.exposure)
            elif n == "n_h":
                vals[i] = cfg.fabric.n_h
            elif n == "n_v":
                vals[i] = cfg.fabric.n_v
            else:
                axis, rest = n.split(".", 1)
                if rest.split(".")[0] in ("C", "k_d"):
                    f, ch = rest.split(".")
                    src = getattr(cfg.appearance.axis(axis), f)
                    vals[i] = src[_RGB.index(ch)]
                elif rest in ("gamma_M", "gamma_N", "gamma_M0"):
                    vals[i] = getattr(cfg.appearance.axis(axis), rest)
                else:
                    vals[i] = getattr(cfg.geometry.axis(axis), rest)
        return ParamVector(cfg.kind, vals, _stage_mask(stage), cfg)

    def to_config(self) -> FabricConfig:
        g = self.get
        geom = {}
        app = {}
        for a in AXES:
            geom[a] = YarnGeomParams(
                u_max=g(f"{a}.u_max"), beta=g(f"{a}.beta"),
                e_yarn=g(f"{a}.e_yarn"), m=int(round(g(f"{a}.m"))),
                G=g(f"{a}.G"), s=g(f"{a}.s"), alpha=g(f"{a}.alpha"),
                Q=g(f"{a}.Q"))
            app[a] = FiberAppearanceParams(
                C=tuple(g(f"{a}.C.{ch}") for ch in _RGB),
                gamma_M=g(f"{a}.gamma_M"), gamma_N=g(f"{a}.gamma_N"),
                gamma_M0=g(f"{a}.gamma_M0"),
                k_d=tuple(g(f"{a}.k_d.{ch}") for ch in _RGB),
                eta=self.base.appearance.axis(a).eta)
        n_h, n_v = int(round(g("n_h"))), int(round(g("n_v")))
        fabric = self.base.fabric
        if (n_h, n_v) != (fabric.n_h, fabric.n_v):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fabric = FabricSpec(pattern_matrix(self.kind), fabric.L_h,
                                    fabric.L_v, n_h, n_v)
        return FabricConfig(
            fabric=fabric,
            geometry=dataclasses.replace(self.base.geometry,
                                         weft=geom["weft"],
                                         warp=geom["warp"]),
            appearance=AppearanceSettings(
                weft=app["weft"], warp=app["warp"],
                shared=SharedAppearance(w_d=g("w_d"))),
            capture=dataclasses.replace(self.base.capture,
                                        exposure=math.exp(g("log_exposure"))),
            seed=self.base.seed,
        )


def init_params(kind: str = "plain", overrides: dict | None = None,
                *, base: FabricConfig | None = None,
                stage: int = 2) -> ParamVector:
    """Parameter vector at the pattern preset's distribution means.

    ``overrides`` maps slot names (e.g. ``"weft.C.r"``, ``"w_d"``) to
    values; an ``"exposure"`` key is accepted and stored in log space.
    Movable parameters are range-checked; frozen ones are validated by
    the config constructors.
    """
    cfg = base if base is not None else default_config(kind)
    if base is not None and cfg.kind != kind:
        raise ConfigError(f"base config is {cfg.kind!r}, not {kind!r}")
    pv = ParamVector.from_config(cfg, stage=stage)
    if overrides:
        updates = dict(overrides)
        if "exposure" in updates:
            exp = float(updates.pop("exposure"))
            if exp <= 0:
                raise ConfigError("exposure must be > 0")
            updates["log_exposure"] = math.log(exp)
        movable = set(STAGE2_PARAMS) | set(STAGE3_PARAMS)
        for name, val in updates.items():
            idx = pv.index(name)
            key = _param_key(name)
            if key in movable:
                lo, hi = PARAM_RANGES[key]
                if not (lo <= float(val) <= hi):
                    raise ConfigError(
                        f"override {name}={val!r} outside [{lo}, {hi}]")
        pv = pv.replace(**updates)
    pv.to_config()  # constructor-validates every slot, movable or frozen
    return pv


# ---------------------------------------------------------------------------
# gradient estimation
# ---------------------------------------------------------------------------

def _probe_scale(active: np.ndarray, perturbation: float) -> np.ndarray:
    width = np.where(np.isfinite(_BOUNDS_HI - _BOUNDS_LO),
                     _BOUNDS_HI - _BOUNDS_LO, 1.0)
    return np.where(active, perturbation * width, 0.0)


def _check_finite(losses, stage: int, iteration: int):
    if not np.all(np.isfinite(losses)):
        raise FitError(
            f"non-finite loss {losses!r} at stage {stage} iteration "
            f"{iteration}; aborting (inspect the parameter checkpoint)")


def _spsa_sample(f_vals, z, active, c_vec, rng):
    delta = (rng.integers(0, 2, z.size) * 2 - 1).astype(np.float64)
    delta[~active] = 0.0
    zp = np.clip(z + c_vec * delta, _BOUNDS_LO, _BOUNDS_HI)
    zm = np.clip(z - c_vec * delta, _BOUNDS_LO, _BOUNDS_HI)
    fp, fm = f_vals(zp), f_vals(zm)
    span = zp - zm
    ok = active & (span != 0.0)
    g = np.zeros_like(z)
    g[ok] = (fp - fm) / span[ok]
    return g, (fp, fm)


def _central_gradient(f_vals, z, active, c_vec):
    g = np.zeros_like(z)
    losses = []
    for i in np.nonzero(active)[0]:
        zp = z.copy()
        zm = z.copy()
        zp[i] = min(z[i] + c_vec[i], _BOUNDS_HI[i])
        zm[i] = max(z[i] - c_vec[i], _BOUNDS_LO[i])
        fp, fm = f_vals(zp), f_vals(zm)
        if zp[i] != zm[i]:
            g[i] = (fp - fm) / (zp[i] - zm[i])
        losses += [fp, fm]
    return g, losses


def estimate_gradient(f, p: ParamVector, cfg: GradientConfig,
                      *, seed: int = 0) -> np.ndarray:
    """Gradient estimate of ``f`` (a loss over parameter vectors) at ``p``.

    Inactive entries get exactly zero.  SPSA averages ``cfg.samples``
    simultaneous-perturbation draws (two evaluations each); the central
    estimator differences every active entry separately.
    """
    z = p.values.copy()
    c_vec = _probe_scale(p.active, cfg.perturbation)

    def f_vals(zv):
        return float(f(p.replace_values(zv)))

    if cfg.estimator == "central":
        g, _ = _central_gradient(f_vals, z, p.active, c_vec)
        return g
    total = np.zeros_like(z)
    for k in range(cfg.samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        g, _ = _spsa_sample(f_vals, z, p.active, c_vec, rng)
        total += g
    return total / cfg.samples


# ---------------------------------------------------------------------------
# results and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    """Outcome of one optimization stage.

    ``history`` holds the initial exact loss followed by one entry per
    iteration (the mean of that iteration's probe losses);
    ``final_loss`` is an exact evaluation at the returned parameters.
    """

    params: ParamVector
    history: np.ndarray
    wall_time: float
    snapshots: list
    final_loss: float
    stage: int
    n_evals: int

    @property
    def initial_loss(self) -> float:
        return float(self.history[0])


def _save_checkpoint(path, stage, t, z, m, v, history, elapsed, c_vec):
    state = {
        "stage": stage,
        "iteration": t,
        "names": list(_SLOT_NAMES),
        "values": [float(x) for x in z],
        "adam_m": [float(x) for x in m],
        "adam_v": [float(x) for x in v],
        "history": [float(x) for x in history],
        "elapsed": float(elapsed),
        "probe_scale": [float(x) for x in c_vec],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh)
    os.replace(tmp, path)


def _load_checkpoint(path, stage):
    with open(path, encoding="utf-8") as fh:
        state = json.load(fh)
    if state.get("stage") != stage:
        raise ConfigError(
            f"checkpoint {path} is for stage {state.get('stage')}, "
            f"not stage {stage}")
    if tuple(state.get("names", ())) != _SLOT_NAMES:
        raise ConfigError(f"checkpoint {path} has a different parameter set")
    return state


# ---------------------------------------------------------------------------
# optimizer core
# ---------------------------------------------------------------------------

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def _calibrated_probes(f_vals, z, active, c_vec, f0, stage):
    """Shrink probe spans on disproportionately loss-sensitive slots.

    One extra evaluation per active slot measures the loss impact of a
    base-size probe.  Slots whose impact towers over the quiet quartile
    of the pack (brightness-like parameters can be orders of magnitude
    more sensitive than chromatic ones) get their span scaled down so a
    simultaneous perturbation is not dominated by a few steep
    directions.  Scales never exceed 1: quiet slots keep the base span.
    """
    impact = np.zeros(z.size)
    for i in np.nonzero(active)[0]:
        zp = z.copy()
        zp[i] = min(z[i] + c_vec[i], _BOUNDS_HI[i])
        if zp[i] == z[i]:
            zp[i] = max(z[i] - c_vec[i], _BOUNDS_LO[i])
        fi = f_vals(zp)
        _check_finite([fi], stage, 0)
        impact[i] = abs(fi - f0)
    pos = impact[active & (impact > 0)]
    if pos.size == 0:
        return c_vec
    kappa = float(np.percentile(pos, 25))
    if kappa <= 0:
        return c_vec
    scale = np.where(impact > 0,
                     np.clip(kappa / np.where(impact > 0, impact, 1.0),
                             1.0 / 64.0, 1.0),
                     1.0)
    return c_vec * scale


def _optimize(forward, loss_of, p0: ParamVector, step: float,
              iterations: int, fcfg: FitConfig, stage: int,
              checkpoint: str | None):
    """Adam on the active slots of ``p0`` with SPSA/central gradients.

    ``forward`` maps a value vector to an image (for snapshots);
    ``loss_of`` maps a value vector to the scalar loss.  Checkpoints are
    written per iteration and make interrupted runs bit-reproducible.
    """
    evals = [0]

    def f_vals(zv):
        evals[0] += 1
        return float(loss_of(zv))

    active = p0.active
    c_vec = _probe_scale(active, fcfg.gradient.perturbation)
    start = time.perf_counter()
    prior_elapsed = 0.0

    if checkpoint and os.path.exists(checkpoint):
        state = _load_checkpoint(checkpoint, stage)
        z = np.array(state["values"])
        m = np.array(state["adam_m"])
        v = np.array(state["adam_v"])
        history = list(state["history"])
        t_start = state["iteration"] + 1
        prior_elapsed = state["elapsed"]
        c_vec = np.array(state["probe_scale"])
    else:
        z = p0.values.copy()
        m = np.zeros_like(z)
        v = np.zeros_like(z)
        f0 = f_vals(z)
        _check_finite([f0], stage, 0)
        history = [f0]
        t_start = 1
        if fcfg.gradient.calibrate and fcfg.gradient.estimator == "spsa":
            c_vec = _calibrated_probes(f_vals, z, active, c_vec, f0, stage)

    snapshots = []
    if fcfg.snapshot_every and t_start == 1:
        snapshots.append((0, forward(z)))

    for t in range(t_start, iterations + 1):
        if fcfg.gradient.estimator == "central":
            g, probes = _central_gradient(f_vals, z, active, c_vec)
        else:
            g = np.zeros_like(z)
            probes = []
            for k in range(fcfg.gradient.samples):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [fcfg.seeds.gradient, stage, t, k]))
                gk, pair = _spsa_sample(f_vals, z, active, c_vec, rng)
                g += gk
                probes += list(pair)
            g /= fcfg.gradient.samples
        _check_finite(probes, stage, t)

        m = _ADAM_B1 * m + (1.0 - _ADAM_B1) * g
        v = _ADAM_B2 * v + (1.0 - _ADAM_B2) * g * g
        m_hat = m / (1.0 - _ADAM_B1 ** t)
        v_hat = v / (1.0 - _ADAM_B2 ** t)
        z_new = z - step * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        z = np.where(active, np.clip(z_new, _BOUNDS_LO, _BOUNDS_HI), z)
        history.append(float(np.mean(probes)))

        elapsed = prior_elapsed + (time.perf_counter() - start)
        if checkpoint:
            _save_checkpoint(checkpoint, stage, t, z, m, v, history, elapsed,
                             c_vec)
        if fcfg.snapshot_every and (t % fcfg.snapshot_every == 0
                                    or t == iterations):
            snapshots.append((t, forward(z)))

    final_loss = f_vals(z)
    _check_finite([final_loss], stage, iterations)
    wall = prior_elapsed + (time.perf_counter() - start)
    return (p0.replace_values(z), np.asarray(history), wall, snapshots,
            float(final_loss), evals[0])


def _validate_target(target, expect_size=None) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != 3:
        raise ConfigError("target image must be (H, W, 3)")
    if expect_size is not None:
        w, h = expect_size
        if target.shape[:2] != (h, w):
            raise ConfigError(
                f"target is {target.shape[1]}x{target.shape[0]} px but the "
                f"stage renders {w}x{h}; resize one of them")
    return target


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_joint(target, p0: ParamVector, fcfg: FitConfig | None = None,
                *, checkpoint: str | None = None) -> FitResult:
    """Joint geometry + appearance fit against the approximate renderer.

    The fiber patch is regenerated from the candidate geometry every
    evaluation with a pinned seed, so the loss is a deterministic
    function of the parameters.
    """
    fcfg = fcfg or FitConfig()
    target = _validate_target(target, fcfg.stage2.image_size)
    p = p0.with_stage(2)
    bank = FeatureBank(fcfg.seeds.bank)
    prior = PriorSpec.for_pattern(p.kind)

    def forward(z):
        cfg = p.replace_values(z).to_config()
        patch = generate_patch(cfg, fcfg.density, seed=fcfg.seeds.geometry)
        cap = dataclasses.replace(cfg.capture,
                                  image_size=fcfg.stage2.image_size)
        return render_approx(scene_for(cfg), patch, cap, fcfg.stage2.spp,
                             seed=fcfg.seeds.render,
                             appearance=cfg.appearance,
                             supersample=fcfg.stage2.supersample)

    def loss_of(z):
        pv = p.replace_values(z)
        return total_loss(forward(z), target, pv.to_config().appearance,
                          prior, bank)

    params, history, wall, snaps, final, n_evals = _optimize(
        forward, loss_of, p, fcfg.stage2.step, fcfg.stage2.iterations,
        fcfg, 2, checkpoint)
    return FitResult(params=params, history=history, wall_time=wall,
                     snapshots=snaps, final_loss=final, stage=2,
                     n_evals=n_evals)


def refine_start(p1: ParamVector) -> ParamVector:
    """Refinement initialization: albedo seeded from the joint stage.

    The refined model has no diffuse stand-in, so its starting albedo
    splits the difference with the dropped diffuse color per channel,
    C0 = (C + k_d) / 2; k_d and w_d themselves are zeroed out of the
    final model.
    """
    updates = {}
    for a in AXES:
        for ch in _RGB:
            c = p1.get(f"{a}.C.{ch}")
            kd = p1.get(f"{a}.k_d.{ch}")
            updates[f"{a}.C.{ch}"] = 0.5 * (c + kd)
            updates[f"{a}.k_d.{ch}"] = 0.0
    updates["w_d"] = 0.0
    return p1.replace(**updates).with_stage(3)


def stage_refine(target, p1: ParamVector, fcfg: FitConfig | None = None,
                 *, checkpoint: str | None = None) -> FitResult:
    """Appearance refinement against the full path tracer.

    Geometry is frozen (the patch and its BVH are built once and shared
    by every evaluation), and only the fiber scattering parameters move.
    """
    fcfg = fcfg or FitConfig()
    target = _validate_target(target)
    p = refine_start(p1)

    bank = FeatureBank(fcfg.seeds.bank)
    prior = PriorSpec.for_pattern(p.kind)
    cfg0 = p.to_config()
    patch = generate_patch(cfg0, fcfg.density, seed=fcfg.seeds.geometry)
    bvh = build_bvh(patch)
    scene = scene_for(cfg0)
    size = (target.shape[1], target.shape[0])

    def forward(z):
        cfg = p.replace_values(z).to_config()
        cap = dataclasses.replace(cfg.capture, image_size=size)
        return render(scene, patch, cap, fcfg.stage3.spp_forward,
                      fcfg.stage3.max_depth, seed=fcfg.seeds.render,
                      bvh=bvh, appearance=cfg.appearance)

    def loss_of(z):
        pv = p.replace_values(z)
        return total_loss(forward(z), target, pv.to_config().appearance,
                          prior, bank)

    params, history, wall, snaps, final, n_evals = _optimize(
        forward, loss_of, p, fcfg.stage3.step, fcfg.stage3.iterations,
        fcfg, 3, checkpoint)
    return FitResult(params=params, history=history, wall_time=wall,
                     snapshots=snaps, final_loss=final, stage=3,
                     n_evals=n_evals)
