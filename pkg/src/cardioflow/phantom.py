"""Analytic cardiac phantom: shell volumes with exact closed-form motion.

A sample is an ellipsoidal myocardium-like shell (long axis z) whose
deformation combines a feathered radial contraction with a twist about the
long axis.  The flow field is exact by construction, and the second frame
is produced by backward-warping the first with it, so every emitted triple
satisfies the annotation-consistency invariant up to interpolation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ValidationError
from .flow import FlowField, Volume, base_coords, sample_at, warp
from . import volio

# Long-axis elongation of the shell, applied to the radius metric.
_AXIS_Z = 1.2
_EDGE = 1.25           # intensity edge softness, voxels
_FEATHER_FRACTION = 0.35  # flow envelope feather width relative to outer radius


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and motion parameters of one phantom sample."""

    extent: int = 32
    center: Optional[Tuple[float, float, float]] = None
    inner_radius: float = 5.5
    outer_radius: float = 9.5
    contraction: float = 0.22
    wall_thickening: float = 0.3
    twist: float = 1.0
    noise_floor: float = 0.05
    seed: int = 0

    def resolved_center(self) -> Tuple[float, float, float]:
        if self.center is not None:
            return self.center
        mid = (self.extent - 1) / 2.0
        return (mid, mid, mid)

    def validate(self) -> None:
        if self.extent < 8:
            raise ValidationError(f"extent {self.extent} is too small for a shell phantom")
        if not (0 < self.inner_radius < self.outer_radius < self.extent / 2):
            raise ValidationError(
                f"radii must satisfy 0 < inner < outer < extent/2, got "
                f"{self.inner_radius}, {self.outer_radius} at extent {self.extent}"
            )
        if not (0.0 <= self.contraction <= 0.3):
            raise ValidationError(f"contraction amplitude {self.contraction} outside [0, 0.3]")
        if not (0.0 <= self.wall_thickening <= 1.0):
            raise ValidationError(f"wall thickening {self.wall_thickening} outside [0, 1]")
        if abs(self.twist) > 2.0:
            raise ValidationError(f"twist {self.twist} outside [-2, 2]")
        if not (0.0 <= self.noise_floor <= 0.5):
            raise ValidationError(f"noise floor {self.noise_floor} outside [0, 0.5]")
        cx, cy, cz = self.resolved_center()
        for c in (cx, cy, cz):
            if not (0 <= c <= self.extent - 1):
                raise ValidationError(f"center {self.resolved_center()} outside the grid")


@dataclass
class AnnotatedSample:
    """An (es, ed, flow) triple; ed == warp(es, flow) within trilinear tolerance."""

    es_frame: Volume
    ed_frame: Volume
    flow_gt: FlowField
    provenance: Union[PhantomSpec, str] = "external"


def _smoothstep(x: np.ndarray, a: float, b: float) -> np.ndarray:
    t = np.clip((x - a) / (b - a), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _radius(spec: PhantomSpec, dtype=np.float32):
    cx, cy, cz = spec.resolved_center()
    bx, by, bz = base_coords((spec.extent,) * 3, dtype=dtype)
    dx, dy, dz = bx - dtype(cx), by - dtype(cy), bz - dtype(cz)
    rho = np.sqrt(dx * dx + dy * dy + (dz / _AXIS_Z) ** 2)
    return (dx, dy, dz), rho


def phantom_flow(spec: PhantomSpec) -> FlowField:
    """Closed-form displacement: feathered radial contraction plus twist.

    The returned field is the backward-warp annotation: sample coordinates
    are pulled toward the center, so the warped frame appears dilated.
    """
    (dx, dy, dz), rho = _radius(spec, dtype=np.float64)
    feather = _FEATHER_FRACTION * spec.outer_radius
    envelope = 1.0 - _smoothstep(rho, spec.outer_radius, spec.outer_radius + feather)
    mid = 0.5 * (spec.inner_radius + spec.outer_radius)
    thickening = 1.0 + spec.wall_thickening * (mid - rho) / (spec.outer_radius - spec.inner_radius)
    pull = np.clip(spec.contraction * envelope * thickening, 0.0, 0.95)
    zn = np.clip(dz / (_AXIS_Z * spec.outer_radius), -1.0, 1.0)
    phi = spec.contraction * spec.twist * envelope * zn
    cphi, sphi = np.cos(phi), np.sin(phi)
    scale = 1.0 - pull
    px = scale * (dx * cphi - dy * sphi) - dx
    py = scale * (dx * sphi + dy * cphi) - dy
    pz = scale * dz - dz
    flow = np.stack([px, py, pz]).astype(np.float32)
    if spec.contraction == 0.0:
        flow[:] = 0.0  # rotation by phi=0 is exact; clear residual -0.0 noise
    return FlowField(flow)


def phantom_frame(spec: PhantomSpec) -> Volume:
    """Smooth-edged shell plus cavity fill and band-limited background texture."""
    _, rho = _radius(spec)
    up = _smoothstep(rho, spec.inner_radius - _EDGE, spec.inner_radius + _EDGE)
    down = 1.0 - _smoothstep(rho, spec.outer_radius - _EDGE, spec.outer_radius + _EDGE)
    wall = up * down
    cavity = 1.0 - up
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([0x7E47, spec.seed & 0xFFFFFFFF])))
    cells = 5
    coarse = rng.standard_normal((1, cells + 1, cells + 1, cells + 1)).astype(np.float32)
    scale = cells / (spec.extent - 1)
    bx, by, bz = base_coords((spec.extent,) * 3)
    texture = sample_at(coarse, (bx * scale, by * scale, bz * scale))[0]
    values = spec.noise_floor + 0.72 * wall + 0.18 * cavity + 0.07 * texture
    return Volume(np.clip(values, 0.0, 1.0).astype(np.float32))


def generate_phantom(spec: PhantomSpec) -> AnnotatedSample:
    """Build one fully annotated sample; raises if the spec is inconsistent."""
    spec.validate()
    flow = phantom_flow(spec)
    bx, by, bz = base_coords((spec.extent,) * 3)
    for axis, b in enumerate((bx, by, bz)):
        displaced = b + flow.vectors[axis]
        if displaced.min() < 0 or displaced.max() > spec.extent - 1:
            raise ValidationError(f"deformation leaves the grid along axis {axis}")
    es = phantom_frame(spec)
    ed = warp(es, flow)
    return AnnotatedSample(es, ed, flow, provenance=spec)


@dataclass(frozen=True)
class JitterRanges:
    """Uniform sampling ranges applied around a base spec per dataset member."""

    center_offset: float = 1.5
    inner_radius: Tuple[float, float] = (-0.8, 0.8)
    outer_radius: Tuple[float, float] = (-0.8, 1.2)
    contraction: Tuple[float, float] = (0.12, 0.30)
    wall_thickening: Tuple[float, float] = (0.15, 0.45)
    twist: Tuple[float, float] = (0.5, 1.4)

    @staticmethod
    def zero() -> "JitterRanges":
        return JitterRanges(0.0, (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


def _jittered_spec(base: PhantomSpec, jitter: JitterRanges, rng: np.random.Generator,
                   index: int) -> PhantomSpec:
    cx, cy, cz = base.resolved_center()
    off = rng.uniform(-jitter.center_offset, jitter.center_offset, size=3)
    draw = lambda lo_hi: float(rng.uniform(lo_hi[0], lo_hi[1]))
    d_inner = draw(jitter.inner_radius)
    d_outer = draw(jitter.outer_radius)
    contraction = draw(jitter.contraction) if jitter.contraction != (0.0, 0.0) else base.contraction
    thickening = draw(jitter.wall_thickening) if jitter.wall_thickening != (0.0, 0.0) else base.wall_thickening
    twist = draw(jitter.twist) if jitter.twist != (0.0, 0.0) else base.twist
    return replace(
        base,
        center=(cx + off[0], cy + off[1], cz + off[2]),
        inner_radius=base.inner_radius + d_inner,
        outer_radius=base.outer_radius + d_outer,
        contraction=contraction,
        wall_thickening=thickening,
        twist=twist,
        seed=base.seed + index,
    )


def make_dataset(n: int, base: PhantomSpec, jitter: JitterRanges, seed: int,
                 out_dir) -> List[AnnotatedSample]:
    """Generate n jittered samples, write them as VOLF3D triples plus a manifest."""
    if n < 1:
        raise ValidationError(f"dataset size must be >= 1, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(seed))
    samples = []
    triples = []
    for i in range(n):
        spec = _jittered_spec(base, jitter, rng, i)
        sample = generate_phantom(spec)
        names = (f"sample_{i:04d}.es.volf", f"sample_{i:04d}.ed.volf", f"sample_{i:04d}.flow.volf")
        volio.write_volume(out / names[0], sample.es_frame.values)
        volio.write_volume(out / names[1], sample.ed_frame.values)
        volio.write_volume(out / names[2], sample.flow_gt.vectors)
        triples.append(names)
        samples.append(sample)
    volio.write_manifest(
        out / "manifest.txt", triples,
        comments=[f"phantom dataset: count={n} seed={seed}",
                  "base spec: " + json.dumps(asdict(base), sort_keys=True)],
    )
    return samples


def load_dataset(data_dir) -> List[AnnotatedSample]:
    """Read (es, ed, flow) triples listed by a manifest; accepts external data."""
    root = Path(data_dir)
    samples = []
    for es_rel, ed_rel, flow_rel in volio.read_manifest(root / "manifest.txt"):
        es = volio.read_volume(root / es_rel)
        ed = volio.read_volume(root / ed_rel)
        fl = volio.read_volume(root / flow_rel)
        samples.append(AnnotatedSample(Volume(es[0]), Volume(ed[0]), FlowField(fl),
                                       provenance=f"external:{es_rel}"))
    return samples


def consistency_error(sample: AnnotatedSample) -> float:
    """Mean absolute intensity error of ed against warp(es, flow)."""
    rewarped = warp(sample.es_frame, sample.flow_gt)
    return float(np.mean(np.abs(rewarped.values - sample.ed_frame.values)))


@dataclass(frozen=True)
class AugmentConfig:
    """Paper-style training augmentations; shift is scaled for small grids."""

    noise_variance: float = 0.015
    max_shift: float = 10.0
    shift_reference_extent: int = 64
    zoom_range: Tuple[float, float] = (0.9, 1.1)


def sample_augment_params(cfg: AugmentConfig, dims: Tuple[int, int, int],
                          rng: np.random.Generator):
    """Draw (shift vector, zoom factor) for one sample; order is fixed."""
    shifts = []
    for n in dims:
        eff = cfg.max_shift * min(1.0, n / cfg.shift_reference_extent)
        shifts.append(float(rng.uniform(-eff, eff)))
    zoom = float(rng.uniform(cfg.zoom_range[0], cfg.zoom_range[1]))
    return np.array(shifts, dtype=np.float64), zoom


def augment(sample: AnnotatedSample, cfg: AugmentConfig,
            rng: np.random.Generator) -> AnnotatedSample:
    """Apply one consistent geometric transform plus intensity noise.

    Shift and zoom resample es and the flow with the shared trilinear
    kernel (flow vectors rescale by the zoom factor); ed is then rebuilt
    by warping the augmented es, which re-establishes the annotation
    invariant exactly.  Noise goes on the frames only, never on the flow.
    """
    dims = sample.es_frame.dims
    shift, zoom = sample_augment_params(cfg, dims, rng)
    if not (0.5 <= zoom <= 2.0):
        raise ValidationError(f"zoom factor {zoom} would push content out of frame")
    if any(abs(s) >= n / 2 for s, n in zip(shift, dims)):
        raise ValidationError(f"shift {shift} exceeds half the grid extent {dims}")
    bases = base_coords(dims)
    coords = tuple(
        np.float32((n - 1) / 2) + (b - np.float32(shift[a]) - np.float32((n - 1) / 2)) / np.float32(zoom)
        for a, (b, n) in enumerate(zip(bases, dims))
    )
    es_values = sample_at(sample.es_frame.values[None], coords)[0]
    flow_vec = np.float32(zoom) * sample_at(sample.flow_gt.vectors, coords)
    if cfg.noise_variance > 0:
        es_values = es_values + rng.normal(
            0.0, np.sqrt(cfg.noise_variance), size=es_values.shape
        ).astype(np.float32)
    es = Volume(es_values)
    flow = FlowField(flow_vec)
    ed = warp(es, flow)
    return AnnotatedSample(es, ed, flow, provenance=sample.provenance)
