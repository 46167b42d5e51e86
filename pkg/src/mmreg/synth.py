"""Synthetic volume-pair generator for benchmarks and end-to-end tests.

Each pair is a textured two-blob phantom: the target is the source warped by
a known smooth deformation, with additive noise in one half of the volume
and a monotone intensity remapping in the other half. Absolute-difference
metrics stay informative where intensities match and break down in the
remapped half, which correlation/information metrics handle.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import (
    DeformationField,
    SegmentationMask,
    Volume,
    interpolate_dense,
    make_control_grid,
    warp,
    warp_mask,
)

GT_MODES = ("identity", "translate", "random_ffd")


@dataclass(frozen=True)
class SynthSpec:
    """Generator configuration; all lengths in mm unless noted."""
    dims: tuple = (48, 48, 40)
    spacing_mm: tuple = (2.5, 2.5, 2.5)
    n_pairs: int = 1
    organ_radii_mm: tuple = (11.0, 11.0)
    organ_centers_frac: tuple = ((0.30, 0.5, 0.5), (0.72, 0.5, 0.5))
    center_jitter_mm: float = 3.0
    radius_jitter_mm: float = 1.5
    base_levels: tuple = (0.25, 0.65, 0.80)      # background, organ 1, organ 2
    texture_amp: tuple = (0.06, 0.02, 0.12)
    texture_sigma_vox: float = 1.5
    noise_sigma: float = 0.02
    # decoy blobs: intensity structures absent from the masks; a decoy with
    # a level between background and an organ confuses scale-free metrics
    decoy_centers_frac: tuple = ()
    decoy_radii_mm: tuple = ()
    decoy_levels: tuple = ()
    remap_region_x_frac: float = 0.5             # x beyond this fraction is remapped
    remap_gamma: float = 0.45
    remap_offset: float = 0.18
    remap_scale: float = 0.80
    gt_mode: str = "random_ffd"
    gt_translate_mm: tuple = (6.0, 0.0, 0.0)
    gt_grid_spacing_mm: float = 45.0
    max_gt_disp_mm: float = 8.0

    def __post_init__(self):
        if self.gt_mode not in GT_MODES:
            raise ValueError(f"gt_mode must be one of {GT_MODES}, got {self.gt_mode!r}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if len(self.organ_radii_mm) != len(self.organ_centers_frac):
            raise ValueError("organ radii and centers must have the same length")


@dataclass
class SynthPair:
    pair_id: str
    source: Volume
    target: Volume
    source_mask: SegmentationMask
    target_mask: SegmentationMask
    gt_field: DeformationField


def _positions_mm(spec):
    axes = [np.arange(spec.dims[a], dtype=np.float64) * spec.spacing_mm[a] for a in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _make_source(spec, rng):
    px, py, pz = _positions_mm(spec)
    extent = [spec.spacing_mm[a] * (spec.dims[a] - 1) for a in range(3)]
    labels = np.zeros(spec.dims, dtype=np.uint8)
    for k, (frac, radius) in enumerate(zip(spec.organ_centers_frac, spec.organ_radii_mm)):
        center = np.array([frac[a] * extent[a] for a in range(3)])
        center = center + rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
        r = radius + rng.uniform(-spec.radius_jitter_mm, spec.radius_jitter_mm)
        dist2 = (px - center[0]) ** 2 + (py - center[1]) ** 2 + (pz - center[2]) ** 2
        labels[dist2 <= r * r] = k + 1

    base = np.full(spec.dims, spec.base_levels[0], dtype=np.float64)
    amp = np.full(spec.dims, spec.texture_amp[0], dtype=np.float64)
    for k in range(len(spec.organ_radii_mm)):
        base[labels == k + 1] = spec.base_levels[min(k + 1, len(spec.base_levels) - 1)]
        amp[labels == k + 1] = spec.texture_amp[min(k + 1, len(spec.texture_amp) - 1)]
    for frac, radius, level in zip(spec.decoy_centers_frac, spec.decoy_radii_mm,
                                   spec.decoy_levels):
        center = np.array([frac[a] * extent[a] for a in range(3)])
        center = center + rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
        dist2 = (px - center[0]) ** 2 + (py - center[1]) ** 2 + (pz - center[2]) ** 2
        inside = (dist2 <= radius * radius) & (labels == 0)
        base[inside] = level
    tex = gaussian_filter(rng.standard_normal(spec.dims), spec.texture_sigma_vox)
    tex /= max(tex.std(), 1e-12)
    vol = Volume((base + amp * tex).astype(np.float32), spec.spacing_mm)
    return vol, SegmentationMask(labels, spec.spacing_mm)


def _make_gt_field(spec, vol, rng):
    dims = vol.dims
    if spec.gt_mode == "identity":
        dense = np.zeros(dims + (3,), dtype=np.float64)
    elif spec.gt_mode == "translate":
        t = np.asarray(spec.gt_translate_mm, dtype=np.float64)
        dense = np.broadcast_to(t, dims + (3,)).copy()
    else:
        grid = make_control_grid(vol, spec.gt_grid_spacing_mm)
        ctrl = rng.uniform(-spec.max_gt_disp_mm, spec.max_gt_disp_mm, (grid.n_nodes, 3))
        dense = interpolate_dense(grid, ctrl, vol).dense
    if np.abs(dense).max() > spec.max_gt_disp_mm + 1e-9:
        raise ValueError(
            f"ground-truth deformation exceeds the declared bound "
            f"{spec.max_gt_disp_mm} mm (max component {np.abs(dense).max():.3f})"
        )
    return DeformationField(dense=dense, spacing=vol.spacing, origin=vol.origin)


def _remap(values, lo, hi, spec):
    t = np.clip((values - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    return lo + (spec.remap_offset + spec.remap_scale * t ** spec.remap_gamma) * (hi - lo)


def _make_target(spec, src, src_mask, gt, rng):
    warped = warp(src, gt)
    tgt_mask = warp_mask(src_mask, gt)
    data = warped.data.astype(np.float64)
    lo, hi = float(src.data.min()), float(src.data.max())
    x_mm = np.arange(spec.dims[0], dtype=np.float64)[:, None, None] * spec.spacing_mm[0]
    split = spec.remap_region_x_frac * spec.spacing_mm[0] * (spec.dims[0] - 1)
    region = np.broadcast_to(x_mm > split, spec.dims)
    data = np.where(region, _remap(data, lo, hi, spec), data)
    data = data + rng.normal(0.0, spec.noise_sigma, spec.dims)
    return Volume(data.astype(np.float32), src.spacing, src.origin), tgt_mask


def synth_dataset(spec, seed):
    """Generate spec.n_pairs source/target pairs, bit-reproducible per seed."""
    pairs = []
    for idx in range(spec.n_pairs):
        rng = np.random.default_rng([int(seed), idx])
        src, src_mask = _make_source(spec, rng)
        gt = _make_gt_field(spec, src, rng)
        tgt, tgt_mask = _make_target(spec, src, src_mask, gt, rng)
        pairs.append(SynthPair(f"pair{idx:03d}", src, tgt, src_mask, tgt_mask, gt))
    return pairs


# ---------------------------------------------------------------------------
# generator config files (key=value)
# ---------------------------------------------------------------------------

def _parse_centers(v):
    return tuple(tuple(float(x) for x in c.split(",")) for c in v.split(";"))


_SPEC_PARSERS = {
    "dims": lambda v: tuple(int(x) for x in v.split(",")),
    "spacing_mm": lambda v: tuple(float(x) for x in v.split(",")),
    "n_pairs": int,
    "organ_radii_mm": lambda v: tuple(float(x) for x in v.split(",")),
    "organ_centers_frac": _parse_centers,
    "base_levels": lambda v: tuple(float(x) for x in v.split(",")),
    "texture_amp": lambda v: tuple(float(x) for x in v.split(",")),
    "center_jitter_mm": float,
    "radius_jitter_mm": float,
    "noise_sigma": float,
    "texture_sigma_vox": float,
    "remap_region_x_frac": float,
    "remap_gamma": float,
    "remap_offset": float,
    "remap_scale": float,
    "gt_mode": str,
    "gt_translate_mm": lambda v: tuple(float(x) for x in v.split(",")),
    "gt_grid_spacing_mm": float,
    "max_gt_disp_mm": float,
    "decoy_centers_frac": _parse_centers,
    "decoy_radii_mm": lambda v: tuple(float(x) for x in v.split(",")),
    "decoy_levels": lambda v: tuple(float(x) for x in v.split(",")),
}


def read_synth_spec(path):
    """Parse a generator config file of key=value lines."""
    kwargs = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
            k, v = (t.strip() for t in line.split("=", 1))
            if k not in _SPEC_PARSERS:
                raise ValueError(f"{path}:{ln}: unknown generator key {k!r}")
            kwargs[k] = _SPEC_PARSERS[k](v)
    return SynthSpec(**kwargs)
