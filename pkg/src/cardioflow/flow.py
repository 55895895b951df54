"""Deterministic flow-field numerics: warping, endpoint error, statistics.

The flow convention is backward warping: a displacement maps output-voxel
coordinates into source coordinates, ``out(x) = sample(source, x + flow(x))``,
with clamp-to-edge sampling outside the grid.  One trilinear kernel serves
the pure numpy path, the differentiable tape op, and all resampling done by
the data pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor


@dataclass
class Volume:
    """Scalar intensity grid, nominal range [0, 1] after normalization."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DimensionError(f"volume must be 3-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("volume contains non-finite intensities")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.values.shape


@dataclass
class FlowField:
    """Per-voxel displacement (dx, dy, dz) in voxel units, 3 channels first."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[0] != 3:
            raise DimensionError(f"flow must be (3, d, h, w), got shape {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("flow contains non-finite components")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.vectors.shape[1:]


def base_coords(dims: Tuple[int, int, int], dtype=np.float32):
    """Voxel-index grids (one per axis) broadcastable to ``dims``."""
    d, h, w = dims
    return (
        np.arange(d, dtype=dtype)[:, None, None],
        np.arange(h, dtype=dtype)[None, :, None],
        np.arange(w, dtype=dtype)[None, None, :],
    )


def sample_at(values: np.ndarray, coords) -> np.ndarray:
    """Trilinear sample of (C, D, H, W) data at absolute voxel coordinates.

    ``coords`` is a 3-sequence of arrays broadcastable to the output grid.
    Out-of-bounds coordinates clamp to the boundary.
    """
    d, h, w = values.shape[1:]
    out_shape = np.broadcast_shapes(*(np.shape(c) for c in coords))
    acc = None
    clamped = []
    lo = []
    frac = []
    for c, n in zip(coords, (d, h, w)):
        cc = np.clip(c, 0, n - 1)
        i0 = np.floor(cc)
        frac.append(cc - i0)
        lo.append(i0.astype(np.int64))
        clamped.append(cc)
    for corner in range(8):
        sel = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = []
        weight = None
        for axis, (bit, n) in enumerate(zip(sel, (d, h, w))):
            i = lo[axis] + bit if bit else lo[axis]
            if bit:
                i = np.minimum(i, n - 1)
                wgt = frac[axis]
            else:
                wgt = 1 - frac[axis]
            idx.append(np.broadcast_to(i, out_shape))
            weight = wgt if weight is None else weight * wgt
        term = values[:, idx[0], idx[1], idx[2]] * weight
        acc = term if acc is None else acc + term
    return acc


def warp(source: Volume, flow: FlowField) -> Volume:
    """Backward-warp a volume: output(x) = sample(source, x + flow(x))."""
    if source.dims != flow.dims:
        raise DimensionError(f"volume dims {source.dims} do not match flow dims {flow.dims}")
    bx, by, bz = base_coords(flow.dims, dtype=flow.vectors.dtype)
    coords = (bx + flow.vectors[0], by + flow.vectors[1], bz + flow.vectors[2])
    return Volume(sample_at(source.values[None], coords)[0])


def warp_channels(values: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp multi-channel (C, D, H, W) data with a (3, D, H, W) flow."""
    if values.shape[1:] != flow.shape[1:]:
        raise DimensionError(f"data dims {values.shape[1:]} do not match flow dims {flow.shape[1:]}")
    bx, by, bz = base_coords(flow.shape[1:], dtype=flow.dtype)
    return sample_at(values, (bx + flow[0], by + flow[1], bz + flow[2]))


def warp_tensor(source: Tensor, flow: Tensor) -> Tensor:
    """Differentiable backward warp of (B, C, D, H, W) by (B, 3, D, H, W).

    Gradients flow into both the source intensities and the flow; the flow
    gradient is zero wherever the sampled coordinate clamps at the border.
    """
    if source.data.ndim != 5 or flow.data.ndim != 5 or flow.shape[1] != 3:
        raise DimensionError(f"warp_tensor expects (B,C,D,H,W) and (B,3,D,H,W), got {source.shape}, {flow.shape}")
    if source.shape[0] != flow.shape[0] or source.shape[2:] != flow.shape[2:]:
        raise DimensionError(f"source dims {source.shape} do not match flow dims {flow.shape}")
    dims = source.shape[2:]
    dtype = source.data.dtype
    bx, by, bz = base_coords(dims, dtype=dtype)
    out = np.empty_like(source.data)
    saved = []
    for b in range(source.shape[0]):
        coords_raw = (bx + flow.data[b, 0], by + flow.data[b, 1], bz + flow.data[b, 2])
        out[b] = sample_at(source.data[b], coords_raw)
        saved.append(coords_raw)

    def bwd(g):
        d, h, w = dims
        if source.requires_grad:
            dsrc = np.zeros_like(source.data)
        if flow.requires_grad:
            dflow = np.zeros_like(flow.data)
        for b in range(source.shape[0]):
            coords_raw = saved[b]
            lo, frac, inside = [], [], []
            for c, n in zip(coords_raw, (d, h, w)):
                cc = np.clip(c, 0, n - 1)
                i0 = np.floor(cc)
                lo.append(i0.astype(np.int64))
                frac.append((cc - i0).astype(dtype))
                inside.append(((c > 0) & (c < n - 1)).astype(dtype))
            hi = [np.minimum(lo[a] + 1, n - 1) for a, n in enumerate((d, h, w))]
            full = np.broadcast_shapes(*(x.shape for x in lo))
            gb = g[b]
            vol = source.data[b]
            dcoord = [np.zeros(full, dtype=dtype) for _ in range(3)]
            for corner in range(8):
                sel = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
                idx = [np.broadcast_to(hi[a] if bit else lo[a], full) for a, bit in enumerate(sel)]
                weights = [frac[a] if bit else 1 - frac[a] for a, bit in enumerate(sel)]
                signs = [1.0 if bit else -1.0 for bit in sel]
                w_all = weights[0] * weights[1] * weights[2]
                if source.requires_grad:
                    contrib = gb * w_all
                    for c in range(source.shape[1]):
                        np.add.at(dsrc[b, c], (idx[0], idx[1], idx[2]), contrib[c])
                if flow.requires_grad:
                    corner_vals = (vol[:, idx[0], idx[1], idx[2]] * gb).sum(axis=0)
                    dcoord[0] += corner_vals * (signs[0] * weights[1] * weights[2])
                    dcoord[1] += corner_vals * (weights[0] * signs[1] * weights[2])
                    dcoord[2] += corner_vals * (weights[0] * weights[1] * signs[2])
            if flow.requires_grad:
                for a in range(3):
                    dflow[b, a] = dcoord[a] * inside[a]
        if source.requires_grad:
            source.accumulate_grad(dsrc)
        if flow.requires_grad:
            flow.accumulate_grad(dflow)

    return T._make(out, (source, flow), bwd, "warp")


def mepe(pred: FlowField, gt: FlowField) -> Tuple[float, float]:
    """Mean and standard deviation of the per-voxel endpoint error, in voxels."""
    if pred.dims != gt.dims:
        raise DimensionError(f"flow dims {pred.dims} do not match {gt.dims}")
    diff = pred.vectors.astype(np.float64) - gt.vectors.astype(np.float64)
    epe = np.sqrt((diff ** 2).sum(axis=0))
    return float(epe.mean()), float(epe.std())


@dataclass
class FlowStats:
    mean_magnitude: float
    max_magnitude: float
    divergence: dict = field(default_factory=dict)


def flow_stats(flow: FlowField) -> FlowStats:
    """Magnitude summary plus central-difference divergence on the interior."""
    mag = np.sqrt((flow.vectors.astype(np.float64) ** 2).sum(axis=0))
    v = flow.vectors.astype(np.float64)
    if min(flow.dims) >= 3:
        div = (
            (v[0, 2:, 1:-1, 1:-1] - v[0, :-2, 1:-1, 1:-1]) / 2
            + (v[1, 1:-1, 2:, 1:-1] - v[1, 1:-1, :-2, 1:-1]) / 2
            + (v[2, 1:-1, 1:-1, 2:] - v[2, 1:-1, 1:-1, :-2]) / 2
        )
        summary = {"mean": float(div.mean()), "min": float(div.min()), "max": float(div.max())}
    else:
        summary = {"mean": 0.0, "min": 0.0, "max": 0.0}
    return FlowStats(float(mag.mean()), float(mag.max()), summary)
