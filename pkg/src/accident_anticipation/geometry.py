"""Object geometry feeding the dynamic graph.

All functions broadcast over leading axes; the object axis is second to last for
per-object arrays and the last two axes for pairwise arrays. ``edge_weights``
accepts torch tensors so the mixing parameter can be learned.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

PAPER_DIAGONAL_1280x720 = 1450.0
DEFAULT_DEPTH_SCALE = 100.0
VEL_MODES = ("raw", "negated", "abs")


def centers(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack(
        [(boxes[..., 0] + boxes[..., 2]) / 2.0, (boxes[..., 1] + boxes[..., 3]) / 2.0], axis=-1
    )


def diag_norm(width: float, height: float, paper_compat: bool = False) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("frame size must be positive")
    if paper_compat and (width, height) == (1280, 720):
        return PAPER_DIAGONAL_1280x720
    return math.hypot(width, height)


def pair_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask[..., :, None] & mask[..., None, :]


def pairwise_distance3d(
    ctrs: np.ndarray,
    obj_depth: np.ndarray,
    d_norm: float,
    mask: np.ndarray | None = None,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
) -> np.ndarray:
    """sqrt((|C_i - C_j| / d_norm)^2 + (|D_i - D_j| / depth_scale)^2); masked pairs are 0."""
    if d_norm <= 0 or depth_scale <= 0:
        raise ValueError("normalizers must be positive")
    ctrs = np.asarray(ctrs, dtype=np.float64)
    depth = np.asarray(obj_depth, dtype=np.float64) / depth_scale
    diff = ctrs[..., :, None, :] - ctrs[..., None, :, :]
    pix = np.sqrt(np.sum(diff**2, axis=-1)) / d_norm
    dep = np.abs(depth[..., :, None] - depth[..., None, :])
    dist = np.sqrt(pix**2 + dep**2)
    if mask is not None:
        dist = np.where(pair_mask(mask), dist, 0.0)
    return dist


def relative_velocity(dist3d: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """First difference of distance along time (axis -3); frame 0 is zero."""
    dist3d = np.asarray(dist3d, dtype=np.float64)
    vel = np.zeros_like(dist3d)
    vel[..., 1:, :, :] = dist3d[..., 1:, :, :] - dist3d[..., :-1, :, :]
    if mask is not None:
        pm = pair_mask(mask)
        both = np.zeros_like(pm)
        both[..., 1:, :, :] = pm[..., 1:, :, :] & pm[..., :-1, :, :]
        vel = np.where(both, vel, 0.0)
    return vel


def _apply_vel_mode(vel, vel_mode: str):
    if vel_mode == "raw":
        return vel
    if vel_mode == "negated":
        return -vel
    if vel_mode == "abs":
        return abs(vel)
    raise ValueError(f"vel_mode must be one of {VEL_MODES}, got {vel_mode!r}")


def edge_weights(dist3d, relvel, a, mask=None, vel_mode: str = "raw"):
    """a/(a+1) * exp(-D) + 1/(a+1) * Vel, elementwise.

    Works on numpy arrays or torch tensors; ``mask`` is a pairwise boolean mask.
    """
    vel = _apply_vel_mode(relvel, vel_mode)
    if isinstance(dist3d, torch.Tensor):
        w = a / (a + 1) * torch.exp(-dist3d) + vel / (a + 1)
        if mask is not None:
            w = w * mask.to(w.dtype)
        return w
    w = a / (a + 1.0) * np.exp(-np.asarray(dist3d, dtype=np.float64)) + np.asarray(vel) / (a + 1.0)
    if mask is not None:
        w = np.where(mask, w, 0.0)
    return w


@dataclass
class GeometrySequence:
    centers: np.ndarray  # [T, N, 2] pixels
    dist3d: np.ndarray  # [T, N, N]
    relvel: np.ndarray  # [T, N, N]
    mask: np.ndarray  # [T, N] bool

    @property
    def pair_mask(self) -> np.ndarray:
        return pair_mask(self.mask)


def geometry_sequence(
    bundle, depth_scale: float = DEFAULT_DEPTH_SCALE, paper_compat: bool = False
) -> GeometrySequence:
    mask = bundle.scores > 0
    ctrs = np.where(mask[..., None], centers(bundle.boxes), 0.0)
    d_norm = diag_norm(bundle.width, bundle.height, paper_compat)
    dist = pairwise_distance3d(ctrs, bundle.obj_depth, d_norm, mask, depth_scale)
    return GeometrySequence(ctrs, dist, relative_velocity(dist, mask), mask)
