"""Loss, optimizer, learning-rate schedule, intensity normalization and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from . import ops
from .errors import DimensionError, NonFiniteError, ZeroVarianceError
from .labels import RegionMasks
from .network import RegionProbMaps
from .nn import Module
from .tensor import Parameter, Tensor, make_node

DICE_EPS = 1e-5


# loss -----------------------------------------------------------------------------------

def soft_dice_loss(u: Tensor, v, eps: float = DICE_EPS) -> Tensor:
    """Negative soft dice overlap ``-2 sum(u v) / (sum(u) + sum(v) + eps)``.

    Sums run over every element, so a batch is scored as one pooled volume.
    ``v`` is treated as a constant target.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=u.dtype)
    if v.shape != u.shape:
        raise DimensionError(f"soft dice: prediction {u.shape} vs target {v.shape}")
    ud = u.data.astype(np.float64)
    vd = v.astype(np.float64)
    inter = float(np.sum(ud * vd))
    denom = float(np.sum(ud) + np.sum(vd) + eps)
    value = np.asarray(-2.0 * inter / denom, dtype=u.dtype)

    def backward(g):
        grad = (-2.0 * vd / denom + 2.0 * inter / denom ** 2) * float(g)
        return (grad.astype(u.dtype),)

    return make_node(value, (u,), backward, "soft_dice")


@dataclass
class LossBreakdown:
    l_whole: Tensor
    l_core: Tensor
    l_enh: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"l_whole": self.l_whole.item(), "l_core": self.l_core.item(),
                "l_enh": self.l_enh.item(), "total": self.total.item()}


def _target_like(mask, p: Tensor) -> np.ndarray:
    mask = np.asarray(mask)
    # probability maps carry a singleton channel axis that masks do not
    expected = p.shape[:-4] + p.shape[-3:]
    if mask.shape == p.shape:
        return mask
    if mask.shape != expected:
        raise DimensionError(f"target shape {mask.shape} does not match prediction {p.shape}")
    return mask.reshape(p.shape)


def total_loss(p: RegionProbMaps, gt: RegionMasks, eps: float = DICE_EPS) -> LossBreakdown:
    """Sum of the soft dice losses of the whole, core and enhancing regions."""
    terms = [soft_dice_loss(pm, _target_like(m, pm), eps) for pm, m in zip(p, gt)]
    return LossBreakdown(*terms, total=ops.add(ops.add(terms[0], terms[1]), terms[2]))


# optimizer ------------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam hyperparameters and moment buffers, keyed by parameter path."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _named(params) -> list[tuple[str, Parameter]]:
    if isinstance(params, Module):
        return list(params.named_parameters())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def adam_step(params: Module | dict[str, Parameter] | Iterable[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Parameters flagged with ``decay`` (convolution and fully connected kernels)
    get ``weight_decay * w`` added to their gradient before the moment update.
    Gradients are checked before anything changes, so a non-finite gradient
    leaves both parameters and state untouched.
    """
    named = _named(params)
    for name, p in named:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {name}", name=name)
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# schedule -------------------------------------------------------------------------------

@dataclass
class ScheduleState:
    """Plateau-driven learning-rate decay with early stopping.

    The decay counter restarts after every drop, so a long plateau drops the
    rate every ``drop_patience`` epochs. The stop counter only restarts when
    the validation loss improves.
    """

    drop_factor: float = 0.2
    drop_patience: int = 6
    stop_patience: int = 15
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    plateau_wait: int = 0
    should_stop: bool = False

    def update(self, val_loss: float, lr: float) -> tuple[float, bool]:
        """Record one epoch's validation loss.

        Returns:
            The learning rate for the next epoch and whether this epoch improved.
        """
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"validation loss is {val_loss}", name="val_loss")
        improved = val_loss < self.best_val_loss
        if improved:
            self.best_val_loss = val_loss
            self.epochs_since_improvement = 0
            self.plateau_wait = 0
            return lr, True
        self.epochs_since_improvement += 1
        self.plateau_wait += 1
        if self.plateau_wait >= self.drop_patience:
            lr *= self.drop_factor
            self.plateau_wait = 0
        if self.epochs_since_improvement >= self.stop_patience:
            self.should_stop = True
        return lr, False


# intensity normalization ---------------------------------------------------------------

def normalize_volume(volume: np.ndarray, mask_policy: str = "nonzero", mask: np.ndarray | None = None,
                     dtype=np.float32) -> np.ndarray:
    """Standardize each channel to zero mean and unit variance over its support.

    Args:
        volume: ``[C, D, H, W]`` intensities.
        mask_policy: ``"nonzero"`` uses each channel's nonzero voxels, ``"full"``
            every voxel, and ``"mask"`` the boolean ``mask`` argument.
        mask: ``[D, H, W]`` support, required for ``"mask"``.

    Voxels outside the support are set to zero. Variance uses ``ddof=0``.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise DimensionError(f"expected [C, D, H, W], got shape {volume.shape}")
    if mask_policy == "mask":
        if mask is None or np.shape(mask) != volume.shape[1:]:
            raise DimensionError("mask policy needs a [D, H, W] mask matching the volume")
        mask = np.asarray(mask, dtype=bool)
    elif mask_policy not in ("nonzero", "full"):
        raise ValueError(f"unknown mask policy {mask_policy!r}")
    out = np.zeros(volume.shape, dtype=dtype)
    for c, chan in enumerate(volume.astype(np.float64)):
        if mask_policy == "nonzero":
            support = chan != 0
        elif mask_policy == "full":
            support = np.ones(chan.shape, dtype=bool)
        else:
            support = mask
        vals = chan[support]
        if not np.isfinite(vals).all():
            raise NonFiniteError(f"channel {c} contains non-finite intensities", name=f"channel{c}")
        if vals.size < 2:
            raise ZeroVarianceError(c)
        mean = vals.mean()
        std = np.sqrt(np.mean((vals - mean) ** 2))
        if not std > 1e-12 * max(1.0, abs(mean)):
            raise ZeroVarianceError(c)
        out[c][support] = ((vals - mean) / std).astype(dtype)
    return out


# augmentation ---------------------------------------------------------------------------

def augment(volume: np.ndarray, labels: np.ndarray, rng: np.random.Generator, max_angle: float = 1.0,
            flip_prob: float = 0.5, angle: float | None = None, flip: bool | None = None):
    """Random in-plane rotation and left-right mirror applied jointly to image and labels.

    The angle is drawn from ``U(-max_angle, max_angle)`` degrees and rotates
    each ``[H, W]`` slice about the depth axis, linearly interpolated for
    intensities and nearest-neighbor for labels. The mirror reverses the last
    (width) axis. ``angle`` and ``flip`` override the random draws, which are
    consumed from ``rng`` either way so the stream stays aligned.
    """
    volume = np.asarray(volume)
    labels = np.asarray(labels)
    if volume.shape[1:] != labels.shape:
        raise DimensionError(f"volume {volume.shape} and labels {labels.shape} are not paired")
    drawn_angle = rng.uniform(-max_angle, max_angle)
    drawn_flip = rng.random() < flip_prob
    angle = drawn_angle if angle is None else angle
    flip = drawn_flip if flip is None else flip
    if angle != 0:
        volume = np.stack([ndimage.rotate(ch, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
                           for ch in volume]).astype(volume.dtype, copy=False)
        labels = ndimage.rotate(labels, angle, axes=(1, 2), reshape=False, order=0, mode="nearest")
    if flip:
        volume = volume[..., ::-1]
        labels = labels[..., ::-1]
    return np.ascontiguousarray(volume), np.ascontiguousarray(labels)
