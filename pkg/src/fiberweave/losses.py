"""Fitting objective: texture statistics, mean color, and parameter priors.

The texture term compares channel-correlation (Gram) statistics of a
fixed random convolutional feature pyramid — a seeded, frozen stand-in
for a pretrained network, so the package carries no ML-framework
dependency and fits stay reproducible from a single seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .weave import ConfigError

__all__ = [
    "FeatureBank",
    "PriorSpec",
    "gram_loss",
    "gram_distances",
    "color_loss",
    "prior_loss",
    "total_loss",
]

_POOL_FACTORS = (2, 4, 8)
_STAGE_CHANNELS = (8, 16, 24)
_KERNEL = 3
_LEAKY_SLOPE = 0.2


# ---------------------------------------------------------------------------
# feature bank
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureBank:
    """Fixed 3-stage convolutional pyramid with seeded Gaussian weights.

    Each stage is a 3x3 convolution (wrap padding), a leaky rectifier,
    and — between stages — 2x2 average pooling.  Weights are drawn once
    from ``seed`` with He scaling and never trained; identical seeds give
    identical banks, so every feature (and loss) is a deterministic
    function of its inputs.
    """

    seed: int = 0
    weights: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        chans = (3,) + _STAGE_CHANNELS
        weights = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            std = np.sqrt(2.0 / (c_in * _KERNEL * _KERNEL))
            w = rng.normal(0.0, std, size=(c_out, c_in, _KERNEL, _KERNEL))
            w.setflags(write=False)
            weights.append(w)
        object.__setattr__(self, "weights", tuple(weights))

    def features(self, image: np.ndarray) -> np.ndarray:
        """Final-stage feature map (C, H', W') of a linear RGB image."""
        x = _to_chw(image)
        for i, w in enumerate(self.weights):
            x = _conv_wrap(x, w)
            x = np.where(x > 0.0, x, _LEAKY_SLOPE * x)
            if i < len(self.weights) - 1:
                x = _avg_pool(x, 2)
        return x


def _to_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    return np.moveaxis(image, 2, 0)


def _conv_wrap(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """3x3 convolution with periodic boundary, channels-first layout."""
    pad = _KERNEL // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="wrap")
    win = np.lib.stride_tricks.sliding_window_view(
        xp, (_KERNEL, _KERNEL), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", win, w, optimize=True)


def _avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = (h // k) * k, (w // k) * k
    return (x[:, :h2, :w2]
            .reshape(c, h2 // k, k, w2 // k, k)
            .mean(axis=(2, 4)))


def _gram(feats: np.ndarray) -> np.ndarray:
    c = feats.shape[0]
    flat = feats.reshape(c, -1)
    return (flat @ flat.T) / flat.shape[1]


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def gram_distances(image: np.ndarray, target: np.ndarray,
                   bank: FeatureBank) -> tuple[float, ...]:
    """Per-pyramid-level L1 Gram distances (pool factors 2, 4, 8)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError("image and target dimensions differ")
    if min(image.shape[:2]) < 32:
        raise ValueError("images must be at least 32x32 (the coarsest "
                         "pyramid level pools by 8 and the bank by 4 more)")
    out = []
    for k in _POOL_FACTORS:
        gi = _gram(bank.features(np.moveaxis(_avg_pool(_to_chw(image), k),
                                             0, 2)))
        gt = _gram(bank.features(np.moveaxis(_avg_pool(_to_chw(target), k),
                                             0, 2)))
        out.append(float(np.abs(gi - gt).sum()))
    return tuple(out)


def gram_loss(image: np.ndarray, target: np.ndarray,
              bank: FeatureBank) -> float:
    """Multi-scale texture-statistics distance between two images.

    Both images are average-pooled by 2x2, 4x4, and 8x8; each pooled
    image runs through the feature bank, channel-correlation Gram
    matrices (normalized by pixel count) are compared with an L1
    distance, and the three levels are summed.
    """
    return float(sum(gram_distances(image, target, bank)))


def color_loss(image: np.ndarray, target: np.ndarray) -> float:
    """L1 distance between per-channel image means (summed over RGB)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError("image and target dimensions differ")
    mi = image.reshape(-1, image.shape[-1]).mean(axis=0)
    mt = target.reshape(-1, target.shape[-1]).mean(axis=0)
    return float(np.abs(mi - mt).sum())


# ---------------------------------------------------------------------------
# parameter prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior on the two roughness controls, per pattern class."""

    mu_gamma_M: float = 0.5
    sigma_gamma_M: float = 5.0
    mu_gamma_M0: float = 0.5
    sigma_gamma_M0: float = 5.0

    def __post_init__(self):
        if self.sigma_gamma_M <= 0 or self.sigma_gamma_M0 <= 0:
            raise ConfigError("prior sigma must be positive")

    @staticmethod
    def for_pattern(kind: str) -> "PriorSpec":
        """Defaults per weave family.

        Plain and twill get a wide (effectively inactive) prior; satin
        pulls toward low roughness, where its glossy highlights live.
        """
        base = kind.split("-")[0].rstrip("0123456789")
        if base in ("plain", "twill"):
            return PriorSpec()
        if base == "satin":
            return PriorSpec(mu_gamma_M=0.1, sigma_gamma_M=0.15,
                             mu_gamma_M0=0.02, sigma_gamma_M0=0.15)
        raise ConfigError(f"unknown pattern kind {kind!r}")


def prior_loss(gamma_M, gamma_M0, prior: PriorSpec) -> float:
    """Quadratic (Gaussian negative-log) penalty on the roughness pair.

    Scalars score one yarn axis; sequences are scored per axis and
    summed.
    """
    gm = np.atleast_1d(np.asarray(gamma_M, dtype=np.float64))
    g0 = np.atleast_1d(np.asarray(gamma_M0, dtype=np.float64))
    if gm.shape != g0.shape:
        raise ValueError("gamma_M and gamma_M0 must pair up per axis")
    term_m = (gm - prior.mu_gamma_M) ** 2 / (2.0 * prior.sigma_gamma_M ** 2)
    term_0 = (g0 - prior.mu_gamma_M0) ** 2 / (2.0 * prior.sigma_gamma_M0 ** 2)
    return float(term_m.sum() + term_0.sum())


def total_loss(image: np.ndarray, target: np.ndarray, appearance,
               prior: PriorSpec, bank: FeatureBank) -> float:
    """Unweighted sum: texture term + color term + prior term.

    ``appearance`` is either an object with ``weft``/``warp`` members
    exposing ``gamma_M``/``gamma_M0`` or a pair ``(gamma_M_per_axis,
    gamma_M0_per_axis)``.
    """
    if hasattr(appearance, "weft"):
        gm = (appearance.weft.gamma_M, appearance.warp.gamma_M)
        g0 = (appearance.weft.gamma_M0, appearance.warp.gamma_M0)
    else:
        gm, g0 = appearance
    return (gram_loss(image, target, bank)
            + color_loss(image, target)
            + prior_loss(gm, g0, prior))
