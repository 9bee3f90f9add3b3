"""Synthetic multi-channel tumor phantoms with nested ground truth.

Each phantom is an ellipsoidal brain holding an edema ellipsoid, a core
ellipsoid inside it and an enhancing rim around a necrotic center. Four
channels give each tissue class a distinct but partially redundant intensity
signature, loosely modelled on FLAIR, T1, T1c and T2 contrast.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .labels import EDEMA, ENHANCING, NECROTIC

# mean intensity per tissue (healthy brain, edema, necrotic core, enhancing) and channel
SIGNATURES = np.array([
    [1.0, 2.0, 1.6, 1.8],  # FLAIR-like: whole tumor bright
    [1.0, 0.8, 0.4, 0.9],  # T1-like: necrosis dark
    [1.0, 1.0, 0.6, 2.2],  # T1c-like: enhancing rim bright
    [1.0, 1.8, 2.4, 1.5],  # T2-like: edema and necrosis bright
])
TEXTURE_AMPLITUDE = 0.03
SNR_DIFFICULTY = 1.0 / 3.0


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def generate_phantom(rng: np.random.Generator, shape=(32, 32, 32), difficulty: float = SNR_DIFFICULTY):
    """Draw one phantom.

    Args:
        rng: source of all randomness; the same generator state gives the same phantom.
        shape: spatial size ``(D, H, W)``.
        difficulty: standard deviation of the additive Gaussian noise, in units of
            the healthy-brain intensity. The smallest tumor-versus-brain contrast is
            about one unit, so ``1/3`` gives an SNR near 3.

    Returns:
        ``(volume, labels)``: float32 ``[4, D, H, W]`` intensities (zero outside
        the brain) and uint8 ``[D, H, W]`` labels.
    """
    shape = tuple(int(s) for s in shape)
    size = np.array(shape, dtype=float)
    grid = np.meshgrid(*(np.arange(s, dtype=float) for s in shape), indexing="ij")

    brain = _ellipsoid(grid, (size - 1) / 2, size * rng.uniform(0.42, 0.48, 3))
    whole_r = size * rng.uniform(0.18, 0.27, 3)
    whole_c = (size - 1) / 2 + rng.uniform(-0.12, 0.12, 3) * size
    whole = _ellipsoid(grid, whole_c, whole_r) & brain
    core_r = whole_r * rng.uniform(0.6, 0.8, 3)
    core_c = whole_c + rng.uniform(-0.15, 0.15, 3) * whole_r
    core = _ellipsoid(grid, core_c, core_r) & whole
    necrotic = _ellipsoid(grid, core_c, core_r * rng.uniform(0.5, 0.7)) & core

    labels = np.zeros(shape, dtype=np.uint8)
    labels[whole] = EDEMA
    labels[core] = ENHANCING
    labels[necrotic] = NECROTIC

    tissue = np.zeros(shape, dtype=np.intp)
    tissue[labels == EDEMA] = 1
    tissue[labels == NECROTIC] = 2
    tissue[labels == ENHANCING] = 3

    volume = np.zeros((4,) + shape, dtype=np.float64)
    for c in range(4):
        texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
        texture *= TEXTURE_AMPLITUDE / max(texture.std(), 1e-12)
        noise = difficulty * rng.standard_normal(shape)
        volume[c] = SIGNATURES[c][tissue] + texture + noise
    volume[:, ~brain] = 0.0
    return volume.astype(np.float32), labels


def phantom_set(seed: int, count: int, shape=(32, 32, 32), difficulty: float = SNR_DIFFICULTY):
    """``count`` phantoms from independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [generate_phantom(np.random.default_rng(s), shape, difficulty) for s in children]
