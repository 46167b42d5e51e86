"""Similarity metrics, unary feature vectors and class-conditioned aggregation.

All metrics follow a dissimilarity convention: lower is a better match.
Similarities (correlation, mutual information) are converted accordingly.
The registry order SAD, MI, NCC, DWT fixes the coordinate layout of every
feature and weight vector in the package.
"""

from dataclasses import dataclass

import numpy as np

from .volume import Volume, SegmentationMask, extract_patch

METRIC_NAMES = ("SAD", "MI", "NCC", "DWT")
N_METRICS = len(METRIC_NAMES)

_INV_SQRT8 = 1.0 / (2.0 * np.sqrt(2.0))


@dataclass(frozen=True)
class MetricConfig:
    """Settings shared by all metric evaluations.

    Attributes:
        mi_bins: joint-histogram bins per axis for mutual information.
        empty_cost: dissimilarity assigned when either patch is empty.
        scales: optional per-metric normalization divisors (length n);
            None means no normalization.
    """
    mi_bins: int = 16
    empty_cost: float = 1e3
    scales: tuple = None

    def scale_array(self):
        if self.scales is None:
            return np.ones(N_METRICS, dtype=np.float64)
        s = np.asarray(self.scales, dtype=np.float64)
        if s.shape != (N_METRICS,) or np.any(s <= 0):
            raise ValueError(f"scales must be {N_METRICS} positive values, got {self.scales}")
        return s


def patch_radius(grid_spacing_mm, voxel_spacing_mm):
    """Per-axis patch half-width in voxels: half the control spacing,
    so patches of adjacent control points tile the volume."""
    g = np.asarray(grid_spacing_mm, dtype=np.float64)
    v = np.asarray(voxel_spacing_mm, dtype=np.float64)
    return tuple(int(r) for r in np.rint(0.5 * g / v))


# ---------------------------------------------------------------------------
# scalar metric kernels
# ---------------------------------------------------------------------------

def _sad(a, b):
    return float(np.mean(np.abs(a - b)))


def _ncc(a, b):
    am = a - a.mean()
    bm = b - b.mean()
    va = float(np.mean(am * am))
    vb = float(np.mean(bm * bm))
    if va == 0.0 or vb == 0.0:
        return 1.0
    r = float(np.mean(am * bm)) / np.sqrt(va * vb)
    return 1.0 - r


def _entropy(p):
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _mi(a, b, bins):
    ai = _bin_indices(a, bins)
    bi = _bin_indices(b, bins)
    joint = np.bincount(ai * bins + bi, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    pa = joint.reshape(bins, bins).sum(axis=1)
    pb = joint.reshape(bins, bins).sum(axis=0)
    mi = _entropy(pa) + _entropy(pb) - _entropy(joint)
    return float(np.log(bins) - mi)


def _bin_indices(x, bins):
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros(x.size, dtype=np.int64)
    idx = ((x.ravel() - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def _haar_approx(a):
    """Single-level 3D Haar approximation band (even-cropped block sums)."""
    sx, sy, sz = (2 * (s // 2) for s in a.shape)
    c = a[:sx, :sy, :sz].reshape(sx // 2, 2, sy // 2, 2, sz // 2, 2)
    return c.sum(axis=(1, 3, 5)) * _INV_SQRT8


def _dwt(a, b):
    if min(a.shape) < 2:
        # too small for one wavelet level: compare raw intensities
        return float(np.mean(np.abs(a - b)))
    return float(np.mean(np.abs(_haar_approx(a) - _haar_approx(b))))


def compute_metric(name, patch_src, patch_tgt, cfg=None):
    """Evaluate one dissimilarity metric on a patch pair.

    Patches are intersected to their common cropped shape around their
    centers. An empty patch on either side yields cfg.empty_cost.

    Raises:
        ValueError: unknown metric name, or non-finite patch data.
    """
    cfg = cfg or MetricConfig()
    if name not in METRIC_NAMES:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")
    if patch_src.is_empty or patch_tgt.is_empty:
        return float(cfg.empty_cost)
    a, b = _common_crop(patch_src, patch_tgt)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("patch data contains NaN or inf")
    if name == "SAD":
        return _sad(a, b)
    if name == "MI":
        return _mi(a, b, cfg.mi_bins)
    if name == "NCC":
        return _ncc(a, b)
    return _dwt(a, b)


def _common_crop(pa, pb):
    left = [min(pa.left[i], pb.left[i]) for i in range(3)]
    right = [min(pa.right[i], pb.right[i]) for i in range(3)]

    def crop(p):
        sl = tuple(
            slice(p.left[i] - left[i], p.left[i] + right[i] + 1) for i in range(3)
        )
        return np.asarray(p.data[sl], dtype=np.float64)

    return crop(pa), crop(pb)


# ---------------------------------------------------------------------------
# per-node operations
# ---------------------------------------------------------------------------

def unary_features(src, tgt, grid, label_space, node, label, cfg=None):
    """Feature vector of all metrics for one (node, label) pair.

    The source patch is taken at the displaced control point p_i + d_l,
    the target patch at the undisplaced p_i. Values are divided by the
    configured normalization scales; the empty-patch cost is a sentinel
    and stays unscaled.
    """
    cfg = cfg or MetricConfig()
    radius = patch_radius(grid.spacing_mm, src.spacing)
    p = grid.points[node]
    d = label_space.displacements[label]
    pa = extract_patch(src, p + d, radius)
    pb = extract_patch(tgt, p, radius)
    if pa.is_empty or pb.is_empty:
        return np.full(N_METRICS, float(cfg.empty_cost))
    vals = np.array([compute_metric(m, pa, pb, cfg) for m in METRIC_NAMES])
    return vals / cfg.scale_array()


def dominant_class(src_mask, grid, label_space, node, label, n_classes):
    """Most frequent nonzero class in the displaced source-mask patch.

    Ties break to the smaller class id. A patch that is empty or contains
    only background returns 0 (the background column is used downstream).
    """
    radius = patch_radius(grid.spacing_mm, src_mask.spacing)
    p = grid.points[node]
    d = label_space.displacements[label]
    patch = extract_patch(src_mask, p + d, radius)
    if patch.is_empty:
        return 0
    counts = np.bincount(patch.data.ravel(), minlength=n_classes + 1)
    if counts[1:n_classes + 1].sum() == 0:
        return 0
    return int(np.argmax(counts[1:n_classes + 1])) + 1


def aggregated_unary(features, wmat, class_id):
    """Class-conditioned linear aggregation: w(class)^T features."""
    return float(np.dot(wmat.column(class_id), np.asarray(features, dtype=np.float64)))


# ---------------------------------------------------------------------------
# weight matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightMatrix:
    """Per-class metric weights: column w_c per class plus pairwise weight w_p.

    class_ids lists the classes covered by the columns, in ascending order;
    id 0 is the designated background column.
    """
    weights: np.ndarray            # (n_metrics, n_classes)
    pairwise: np.ndarray           # (n_classes,)
    class_ids: tuple
    metric_names: tuple = METRIC_NAMES
    scales: tuple = None           # normalization divisors recorded with the model

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        p = np.ascontiguousarray(self.pairwise, dtype=np.float64)
        ids = tuple(int(c) for c in self.class_ids)
        if w.ndim != 2 or w.shape[0] != len(self.metric_names):
            raise ValueError(f"weights must be (n_metrics, n_classes), got {w.shape}")
        if w.shape[1] != len(ids) or p.shape != (len(ids),):
            raise ValueError("class count mismatch between weights, pairwise and class_ids")
        if list(ids) != sorted(ids):
            raise ValueError(f"class_ids must be ascending, got {ids}")
        if np.any(p < 0):
            raise ValueError(f"pairwise weights must be >= 0, got {p}")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "pairwise", p)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "metric_names", tuple(self.metric_names))
        if self.scales is not None:
            object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    @property
    def n_classes(self):
        return self.weights.shape[1]

    def column_index(self, class_id):
        try:
            return self.class_ids.index(int(class_id))
        except ValueError:
            raise ValueError(f"class {class_id} not covered by this weight matrix") from None

    def column(self, class_id):
        return self.weights[:, self.column_index(class_id)]

    def pairwise_for(self, class_id):
        return float(self.pairwise[self.column_index(class_id)])

    def metric_config(self, **kw):
        return MetricConfig(scales=self.scales, **kw)


def single_metric_weights(name, magnitude, pairwise, scales=None):
    """One-hot weight matrix for a single-metric baseline (one class column)."""
    w = np.zeros((N_METRICS, 1))
    w[METRIC_NAMES.index(name), 0] = magnitude
    return WeightMatrix(w, np.array([pairwise]), (0,), METRIC_NAMES, scales)


def write_weights(path, wmat, meta=None):
    """Write a weight matrix: header line, one line per class, then optional
    '#'-prefixed metadata lines. Floats use repr for bit-exact round-trips."""
    parts = [
        "metrics=" + ",".join(wmat.metric_names),
        "classes=" + ",".join(str(c) for c in wmat.class_ids),
    ]
    if wmat.scales is not None:
        parts.append("scales=" + ",".join(repr(s) for s in wmat.scales))
    lines = [" ".join(parts)]
    for j in range(wmat.n_classes):
        row = [repr(float(v)) for v in wmat.weights[:, j]]
        row.append(repr(float(wmat.pairwise[j])))
        lines.append(" ".join(row))
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={v}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_weights(path):
    """Read a weight matrix file; returns (WeightMatrix, meta dict)."""
    from .volume import FormatError

    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty weights file")
    header = {}
    for part in lines[0].split():
        if "=" not in part:
            raise FormatError(f"{path}: bad header token {part!r}")
        k, v = part.split("=", 1)
        header[k] = v
    if "metrics" not in header or "classes" not in header:
        raise FormatError(f"{path}: header must declare metrics= and classes=")
    names = tuple(header["metrics"].split(","))
    class_ids = tuple(int(c) for c in header["classes"].split(","))
    scales = None
    if "scales" in header:
        scales = tuple(float(s) for s in header["scales"].split(","))
    n = len(names)
    rows = []
    meta = {}
    for ln in lines[1:]:
        if ln.lstrip().startswith("#"):
            body = ln.lstrip()[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        vals = [float(t) for t in ln.split()]
        if len(vals) != n + 1:
            raise FormatError(f"{path}: expected {n + 1} values per class line, got {len(vals)}")
        rows.append(vals)
    if len(rows) != len(class_ids):
        raise FormatError(f"{path}: {len(class_ids)} classes declared but {len(rows)} lines found")
    arr = np.asarray(rows, dtype=np.float64)
    wmat = WeightMatrix(arr[:, :n].T, arr[:, n], class_ids, names, scales)
    return wmat, meta


# ---------------------------------------------------------------------------
# batch feature construction
# ---------------------------------------------------------------------------

def _center_table(vol_like, grid, label_space):
    """Nearest-voxel centers for every (node, label) source patch and every
    node target patch, plus inside-extent flags."""
    dims = np.asarray(vol_like.dims)
    spacing = np.asarray(vol_like.spacing, dtype=np.float64)
    origin = np.asarray(vol_like.origin, dtype=np.float64)
    pts = grid.points                                     # (V, 3)
    disp = label_space.displacements                      # (L, 3)
    t_src = (pts[:, None, :] + disp[None, :, :] - origin) / spacing   # (V, L, 3)
    t_tgt = (pts - origin) / spacing                                   # (V, 3)
    in_src = np.all((t_src >= 0.0) & (t_src <= dims - 1), axis=2)
    in_tgt = np.all((t_tgt >= 0.0) & (t_tgt <= dims - 1), axis=1)
    c_src = np.rint(t_src).astype(np.int64)
    c_tgt = np.rint(t_tgt).astype(np.int64)
    return c_src, in_src, c_tgt, in_tgt


def _metric_rows(A, b_flat, bins):
    """All four metrics of many source patches against one target patch.

    A: (rows, px, py, pz) float64 source blocks; b_flat: (n_vox,) float64.
    Uses algebraically fused forms of the scalar kernels (identical math,
    reduction order may differ at the last few ulps).
    """
    rows = A.shape[0]
    shape = A.shape[1:]
    n_vox = int(np.prod(shape))
    a = A.reshape(rows, n_vox)
    out = np.empty((rows, N_METRICS), dtype=np.float64)

    # SAD
    d = a - b_flat
    np.abs(d, out=d)
    out[:, 0] = d.mean(axis=1)
    del d

    # MI from per-row joint histograms against the shared target binning
    ai = _bin_rows(a, bins)
    bi = _bin_rows(b_flat[None, :], bins)[0]
    ai *= bins
    ai += bi
    offsets = (np.arange(rows, dtype=np.int32) * (bins * bins))[:, None]
    ai += offsets
    joint = np.bincount(ai.ravel(), minlength=rows * bins * bins)
    joint = joint.reshape(rows, bins, bins).astype(np.float64)
    del ai
    joint /= n_vox
    pa = joint.sum(axis=2)
    pb = joint.sum(axis=1)
    out[:, 1] = np.log(bins) - (
        _entropy_rows(pa) + _entropy_rows(pb) - _entropy_rows(joint.reshape(rows, -1))
    )

    # NCC: cov(a, b) = E[a * (b - b_mean)] since the b-side is zero-mean
    b_mean = b_flat.mean()
    bm = b_flat - b_mean
    vb = float(np.mean(bm * bm))
    a_mean = a.mean(axis=1)
    va = np.einsum("ij,ij->i", a, a) / n_vox - a_mean * a_mean
    cov = np.einsum("ij,j->i", a, bm) / n_vox
    a_const = a.max(axis=1) == a.min(axis=1)
    # the shifted-moment form cancels badly for near-constant rows; redo those
    shaky = ~a_const & (va < 1e-12 * (a_mean * a_mean + 1.0))
    if np.any(shaky):
        am = a[shaky] - a_mean[shaky, None]
        va[shaky] = np.mean(am * am, axis=1)
        cov[shaky] = np.mean(am * bm, axis=1)
    degenerate = a_const | (vb == 0.0) | (va == 0.0)
    denom = np.sqrt(np.where(degenerate, 1.0, va * vb))
    r = np.where(degenerate, 0.0, cov / denom)
    out[:, 2] = 1.0 - r

    # DWT
    if min(shape) < 2:
        out[:, 3] = out[:, 0]
    else:
        ha = _haar_rows(A)
        hb = _haar_rows(b_flat.reshape(shape)[None])[0]
        out[:, 3] = np.mean(np.abs(ha - hb), axis=1)
    return out


def _bin_rows(x, bins):
    lo = x.min(axis=1, keepdims=True)
    hi = x.max(axis=1, keepdims=True)
    rng = hi - lo
    safe = np.where(rng == 0.0, 1.0, rng)
    idx = ((x - lo) / safe * bins).astype(np.int32)
    idx[rng[:, 0] == 0.0, :] = 0
    return np.minimum(idx, bins - 1, out=idx)


def _entropy_rows(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(p > 0, p * np.log(p), 0.0)
    return -term.sum(axis=1)


def _haar_rows(A):
    rows = A.shape[0]
    sx, sy, sz = (2 * (s // 2) for s in A.shape[1:])
    c = A[:, :sx, :sy, :sz].reshape(rows, sx // 2, 2, sy // 2, 2, sz // 2, 2)
    return (c.sum(axis=(2, 4, 6)) * _INV_SQRT8).reshape(rows, -1)


def _gather_blocks(arr, corners, shape):
    """Copy same-shaped blocks out of a 3D array given their low corners."""
    from numpy.lib.stride_tricks import sliding_window_view

    view = sliding_window_view(arr, shape)
    return view[corners[:, 0], corners[:, 1], corners[:, 2]]


def feature_table(src, tgt, grid, label_space, cfg=None):
    """All unary feature vectors: (|V|, |L|, n_metrics).

    Vectorized equivalent of calling unary_features for every (node, label);
    pairs whose source or target patch is empty get cfg.empty_cost in every
    metric slot (before normalization the cost is used as-is).
    """
    cfg = cfg or MetricConfig()
    if not (np.all(np.isfinite(src.data)) and np.all(np.isfinite(tgt.data))):
        raise ValueError("volume data contains NaN or inf")
    radius = np.asarray(patch_radius(grid.spacing_mm, src.spacing), dtype=np.int64)
    dims = np.asarray(src.dims)
    V = grid.n_nodes
    L = label_space.n_labels
    c_src, in_src, c_tgt, in_tgt = _center_table(src, grid, label_space)

    out = np.full((V, L, N_METRICS), float(cfg.empty_cost), dtype=np.float64)
    valid = in_src & in_tgt[:, None]
    if not np.any(valid):
        return out

    vi, li = np.nonzero(valid)
    cs = c_src[vi, li]                   # (M, 3) source centers
    ct = c_tgt[vi]                       # (M, 3) target centers

    # common crop: patches intersected to equal shape around their centers
    left = np.minimum(np.minimum(cs, ct), radius)
    right = np.minimum(np.minimum(dims - 1 - cs, dims - 1 - ct), radius)

    # deduplicate identical evaluations (same node, same rounded source center)
    key = np.stack([vi, cs[:, 0], cs[:, 1], cs[:, 2]], axis=1)
    uniq, first_idx, inverse = np.unique(
        key, axis=0, return_index=True, return_inverse=True
    )
    u_cs = cs[first_idx]
    u_ct = ct[first_idx]
    u_left = left[first_idx]
    u_right = right[first_idx]
    u_vals = np.empty((len(first_idx), N_METRICS), dtype=np.float64)

    # group rows by patch shape, then by node so each target patch is
    # processed once per run of rows that share it
    u_node = vi[first_idx]
    sig = np.concatenate([u_left, u_right], axis=1)
    order = np.lexsort([u_node] + list(sig.T[::-1]))
    sig_sorted = sig[order]
    boundaries = np.nonzero(np.any(np.diff(sig_sorted, axis=0) != 0, axis=1))[0] + 1
    groups = np.split(order, boundaries)

    src_data = src.data.astype(np.float64)
    tgt_data = tgt.data.astype(np.float64)
    for g in groups:
        gl = u_left[g[0]]
        gr = u_right[g[0]]
        shape = tuple(int(x) for x in (gl + gr + 1))
        A = _gather_blocks(src_data, u_cs[g] - gl, shape)
        nodes_g = u_node[g]
        runs = np.nonzero(np.diff(nodes_g) != 0)[0] + 1
        starts = np.concatenate([[0], runs, [len(g)]])
        for k in range(len(starts) - 1):
            lo, hi = starts[k], starts[k + 1]
            corner = u_ct[g[lo]] - gl
            b = tgt_data[
                corner[0]:corner[0] + shape[0],
                corner[1]:corner[1] + shape[1],
                corner[2]:corner[2] + shape[2],
            ]
            u_vals[g[lo:hi]] = _metric_rows(A[lo:hi], b.reshape(-1), cfg.mi_bins)

    out[vi, li] = u_vals[inverse] / cfg.scale_array()
    return out


def empty_feature_rows(features, cfg):
    """(|V|, |L|) mask of (node, label) pairs whose patches were empty."""
    return np.all(features == float(cfg.empty_cost), axis=2)


def dominant_class_table(src_mask, grid, label_space, n_classes):
    """Dominant class for every (node, label): (|V|, |L|) int array.

    Background (0) marks empty or all-background patches.
    """
    radius = np.asarray(patch_radius(grid.spacing_mm, src_mask.spacing), dtype=np.int64)
    dims = np.asarray(src_mask.dims)
    V = grid.n_nodes
    L = label_space.n_labels
    c_src, in_src, _, _ = _center_table(src_mask, grid, label_space)

    out = np.zeros((V, L), dtype=np.int64)
    vi, li = np.nonzero(in_src)
    if len(vi) == 0:
        return out
    cs = c_src[vi, li]
    left = np.minimum(cs, radius)
    right = np.minimum(dims - 1 - cs, radius)

    key = np.stack([cs[:, 0], cs[:, 1], cs[:, 2]], axis=1)
    uniq, first_idx, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    u_cs = cs[first_idx]
    u_left = left[first_idx]
    u_right = right[first_idx]
    u_cls = np.zeros(len(first_idx), dtype=np.int64)

    sig = np.concatenate([u_left, u_right], axis=1)
    order = np.lexsort(sig.T[::-1])
    sig_sorted = sig[order]
    boundaries = np.nonzero(np.any(np.diff(sig_sorted, axis=0) != 0, axis=1))[0] + 1
    groups = np.split(order, boundaries)

    labels = src_mask.labels
    for g in groups:
        gl = u_left[g[0]]
        gr = u_right[g[0]]
        shape = tuple(int(x) for x in (gl + gr + 1))
        blocks = _gather_blocks(labels, u_cs[g] - gl, shape).reshape(len(g), -1)
        offsets = (np.arange(len(g), dtype=np.int64) * (n_classes + 1))[:, None]
        clipped = np.minimum(blocks.astype(np.int64), n_classes)
        counts = np.bincount(
            (offsets + clipped).ravel(), minlength=len(g) * (n_classes + 1)
        ).reshape(len(g), n_classes + 1)
        fg = counts[:, 1:]
        best = np.argmax(fg, axis=1) + 1
        u_cls[g] = np.where(fg.sum(axis=1) > 0, best, 0)

    out[vi, li] = u_cls[inverse]
    return out


def calibrate_scales(pairs, grid_spacing_mm, cfg=None, percentile=95.0):
    """Per-metric normalization divisors from zero-displacement features.

    For each (source, target) volume pair, features are computed for the
    zero label at every node of a grid at `grid_spacing_mm`; the divisor is
    the requested percentile per metric over all pooled nodes. Metrics whose
    percentile is zero keep scale 1.
    """
    from .volume import make_control_grid, LabelSpace as _LS

    cfg = cfg or MetricConfig()
    base = MetricConfig(mi_bins=cfg.mi_bins, empty_cost=cfg.empty_cost, scales=None)
    zero_ls = _LS(np.zeros((1, 3)), 0.0)
    pooled = []
    for src, tgt in pairs:
        grid = make_control_grid(src, grid_spacing_mm)
        feats = feature_table(src, tgt, grid, zero_ls, base)[:, 0, :]
        keep = ~np.all(feats == base.empty_cost, axis=1)
        pooled.append(feats[keep])
    allf = np.concatenate(pooled, axis=0)
    scales = np.percentile(allf, percentile, axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    return tuple(float(s) for s in scales)
