"""Weakly-supervised learning of per-class metric aggregation weights.

Ground-truth deformations are unknown, so they are treated as latent
labelings and imputed by segmentation-consistent registration. The trainer
alternates latent imputation with a cutting-plane structured SVM whose
separation oracle is loss-augmented registration inference: all three steps
are the same MRF solve with different unary potentials.

The Dice loss enters inference through a node-decomposable surrogate: tile
overlap counts accumulate per node with the denominator frozen at its
zero-displacement value. Exact warped-mask losses are recomputed whenever a
constraint is stored, so the QP always sees true loss values.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import metrics as me
from .graphreg import (
    MrfInstance,
    PyramidConfig,
    initialize_label_space,
    pairwise_l1_table,
    solve,
)
from .volume import (
    SegmentationMask,
    interpolate_dense,
    make_control_grid,
    tile_edges,
    warp_mask,
)


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of the CCCP / cutting-plane trainer."""
    C: float = 10.0
    alpha: float = 0.1
    eta: float = 50.0
    w0: tuple = (0.1, 10.0, 10.0, 10.0)
    wp0: float = 1.0
    wp_min: float = 0.0          # lower bound on the learned pairwise weight
    nonneg: bool = False         # constrain metric weights >= 0 in the QP
    epsilon: float = 1e-3        # relative outer-objective tolerance
    slack_tol: float = 1e-4      # margin for "sufficiently violated"
    max_cccp: int = 20
    max_cutting: int = 50
    spacing_mm: float = 25.0     # single-level training grid spacing
    labels: int = 125
    bound_factor: float = 0.4
    mi_bins: int = 16
    scales: tuple = None

    def __post_init__(self):
        if self.C <= 0 or self.eta <= 0 or self.epsilon <= 0:
            raise ValueError("C, eta and epsilon must be positive")
        if self.alpha < 0 or self.wp0 < 0 or self.wp_min < 0:
            raise ValueError("alpha, wp0 and wp_min must be non-negative")

    def w0_full(self):
        return np.concatenate([np.asarray(self.w0, dtype=np.float64), [self.wp0]])

    def metric_config(self):
        return me.MetricConfig(mi_bins=self.mi_bins, scales=self.scales)

    def label_schedule(self):
        return PyramidConfig(
            levels=1, steps_per_level=1, labels_per_level=self.labels,
            finest_spacing_mm=self.spacing_mm, bound_factor=self.bound_factor,
        )


@dataclass
class TrainingSample:
    """One (volume pair, mask pair) example for a single class under training."""
    source: object
    target: object
    source_mask: SegmentationMask
    target_mask: SegmentationMask
    class_id: int
    # populated by prepare_sample
    grid: object = None
    label_space: object = None
    features: np.ndarray = None       # (|V|, |L|, n)
    pairwise_table: np.ndarray = None
    edges: np.ndarray = None
    loss_terms: np.ndarray = None     # (|V|, |L|) decomposable loss contributions
    src_fg: SegmentationMask = None
    tgt_fg: SegmentationMask = None

    @property
    def prepared(self):
        return self.features is not None


# ---------------------------------------------------------------------------
# decomposable Dice loss
# ---------------------------------------------------------------------------

def _foreground(mask_or_array):
    if isinstance(mask_or_array, SegmentationMask):
        return mask_or_array.labels > 0
    return np.asarray(mask_or_array) > 0


def _tile_sums(values, bounds):
    """Per-tile sums of a 3D array for the tile partition given by per-axis
    boundary index arrays; returns sums in node order (x-fastest)."""
    s = np.zeros(tuple(d + 1 for d in values.shape), dtype=np.int64)
    s[1:, 1:, 1:] = np.cumsum(np.cumsum(np.cumsum(values, axis=0), axis=1), axis=2)
    corner = s[np.ix_(bounds[0], bounds[1], bounds[2])]
    tiles = np.diff(np.diff(np.diff(corner, axis=0), axis=1), axis=2)
    return tiles.reshape(-1, order="F")


def dice_loss(mask_a, mask_b, grid):
    """1 - Dice via the node-decomposable tiling: overlap and size counts
    accumulate per control-point tile and form one global ratio.

    Tiles partition the volume, so this equals the exact voxel-wise value.
    Both masks empty yields loss 0 by convention.
    """
    a = _foreground(mask_a)
    b = _foreground(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    bounds = tile_edges(grid, mask_a)
    num = int(_tile_sums(a & b, bounds).sum())
    den = int(_tile_sums(a, bounds).sum()) + int(_tile_sums(b, bounds).sum())
    if den == 0:
        return 0.0
    return 1.0 - 2.0 * num / den


def _shift_sample(arr, shift):
    """out[v] = arr[v + shift] with zero fill outside the array."""
    out = np.zeros_like(arr)
    src = []
    dst = []
    for a in range(3):
        s = int(shift[a])
        n = arr.shape[a]
        if abs(s) >= n:
            return out
        if s >= 0:
            dst.append(slice(0, n - s))
            src.append(slice(s, n))
        else:
            dst.append(slice(-s, n))
            src.append(slice(0, n + s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def loss_node_terms(src_mask, tgt_mask, grid, label_space):
    """Per-(node, label) contributions of the decomposable Dice loss.

    Displacing node i's tile of the source mask by d_l is approximated by an
    integer voxel shift; the denominator is held at its zero-displacement
    value so any labeling's surrogate loss is the plain sum of these terms.

    Returns:
        (terms, d0): terms has shape (|V|, |L|) and sums over a labeling to
        the surrogate loss in [0, 1]; d0 is the frozen denominator.
    """
    a = _foreground(src_mask)
    b = _foreground(tgt_mask)
    bounds = tile_edges(grid, src_mask)
    V = grid.n_nodes
    L = label_space.n_labels
    d0 = int(a.sum()) + int(b.sum())
    terms = np.zeros((V, L), dtype=np.float64)
    if d0 == 0:
        return terms, 0

    spacing = np.asarray(src_mask.spacing, dtype=np.float64)
    shifts = np.rint(label_space.displacements / spacing).astype(np.int64)
    uniq, inverse = np.unique(shifts, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    num = np.zeros((V, len(uniq)), dtype=np.int64)
    for k, sh in enumerate(uniq):
        shifted = _shift_sample(a, sh)
        num[:, k] = _tile_sums(shifted & b, bounds)
    terms = 1.0 / V - 2.0 * num[:, inverse] / d0
    return terms, d0


def loss_to_unary_increments(src_mask, tgt_mask, grid, label_space, sign, scale):
    """Additive unary costs encoding sign * scale * (decomposable loss)."""
    terms, _ = loss_node_terms(src_mask, tgt_mask, grid, label_space)
    return float(sign) * float(scale) * terms


# ---------------------------------------------------------------------------
# sample preparation and joint features
# ---------------------------------------------------------------------------

def prepare_sample(sample, config):
    """Build the w-independent tables of one sample: metric features, the
    pairwise distance table and the per-(node, label) loss contributions."""
    grid = make_control_grid(sample.source, config.spacing_mm)
    ls = initialize_label_space(config.label_schedule(), (config.spacing_mm,) * 3)
    mcfg = config.metric_config()
    sample.grid = grid
    sample.label_space = ls
    sample.features = me.feature_table(sample.source, sample.target, grid, ls, mcfg)
    sample.pairwise_table = pairwise_l1_table(ls)
    sample.edges = grid.edges
    sample.src_fg = SegmentationMask(
        (sample.source_mask.labels == sample.class_id).astype(np.uint8),
        sample.source_mask.spacing, sample.source_mask.origin,
    )
    sample.tgt_fg = SegmentationMask(
        (sample.target_mask.labels == sample.class_id).astype(np.uint8),
        sample.target_mask.spacing, sample.target_mask.origin,
    )
    sample.loss_terms, _ = loss_node_terms(sample.src_fg, sample.tgt_fg, grid, ls)
    return sample


def joint_feature(sample, labeling):
    """Psi(labeling): per-metric unary sums plus the unweighted pairwise sum."""
    labeling = np.asarray(labeling)
    V = sample.features.shape[0]
    unary = sample.features[np.arange(V), labeling, :].sum(axis=0)
    pair = 0.0
    if len(sample.edges):
        pair = float(sample.pairwise_table[
            labeling[sample.edges[:, 0]], labeling[sample.edges[:, 1]]
        ].sum())
    return np.concatenate([unary, [pair]])


def loss_augmented_instance(sample, w, sign, scale):
    """Registration MRF with the surrogate loss folded into the unaries.

    Imputation, prediction and the separation oracle differ only here.
    """
    w = np.asarray(w, dtype=np.float64)
    n = sample.features.shape[2]
    unaries = sample.features @ w[:n]
    if scale != 0.0:
        unaries = unaries + float(sign) * float(scale) * sample.loss_terms
    return MrfInstance(unaries, float(w[n]), sample.pairwise_table, sample.edges)


def warped_loss(sample, labeling):
    """Exact Dice loss of the class mask deformed by the labeling's FFD field."""
    sparse = sample.label_space.displacements[np.asarray(labeling)]
    fld = interpolate_dense(sample.grid, sparse, sample.src_fg)
    warped = warp_mask(sample.src_fg, fld)
    return dice_loss(warped, sample.tgt_fg, sample.grid)


def impute_latent(sample, w, config):
    """Segmentation-consistent registration: argmin w'Psi + eta * loss."""
    if not sample.prepared:
        prepare_sample(sample, config)
    inst = loss_augmented_instance(sample, w, +1.0, config.eta)
    return solve(inst)


def most_violated(sample, w, config):
    """Separation oracle: argmin w'Psi - loss.

    Returns:
        (labeling, psi, loss) where loss is the exact warped-mask Dice loss
        stored with the constraint.
    """
    if not sample.prepared:
        prepare_sample(sample, config)
    inst = loss_augmented_instance(sample, w, -1.0, 1.0)
    labeling = solve(inst)
    return labeling, joint_feature(sample, labeling), warped_loss(sample, labeling)


# ---------------------------------------------------------------------------
# quadratic program
# ---------------------------------------------------------------------------

def solve_qp(working_sets, imputed_psis, w0_full, C, alpha, x0=None, wp_min=0.0,
             nonneg=False):
    """Solve the margin-rescaled SSVM QP over the stored constraints.

    minimize 0.5||w||^2 + alpha||w - w0||^2 + (C/N) sum_i xi_i
    s.t.     w'psi_hat_i <= w'psi_bar - loss + xi_i   for stored (psi_bar, loss)
             xi_i >= 0, w_p >= wp_min (>= 0); with nonneg also w >= 0
             (a dissimilarity aggregation with negative weights rewards
             mismatches, which destabilizes the pyramidal predictor)

    The pairwise feature is a mm-scale sum over all edges, orders of
    magnitude larger than the metric sums, which makes w_p the cheapest
    slack lever; wp_min lets callers keep it in the band where the
    pyramidal predictor stays stable.

    Returns:
        (w, xi, converged): slacks are recomputed from the constraints at
        the returned w, so every stored inequality holds exactly.
    """
    w0_full = np.asarray(w0_full, dtype=np.float64)
    nw = len(w0_full)
    N = len(working_sets)
    wp_min = max(0.0, float(wp_min))
    rows = []       # (sample index, a = psi_bar - psi_hat, b = loss)
    for i, ws in enumerate(working_sets):
        for (_, psi_bar, loss) in ws:
            rows.append((i, np.asarray(psi_bar) - np.asarray(imputed_psis[i]), float(loss)))

    if not rows:
        w = (2.0 * alpha / (1.0 + 2.0 * alpha)) * w0_full if alpha > 0 else np.zeros(nw)
        if nonneg:
            w = np.maximum(w, 0.0)
        w[-1] = max(w[-1], wp_min)
        return w, np.zeros(N), True

    A = np.stack([r[1] for r in rows])
    b = np.array([r[2] for r in rows])
    sidx = np.array([r[0] for r in rows])

    def objective(z):
        w = z[:nw]
        xi = z[nw:]
        dw = w - w0_full
        return 0.5 * w @ w + alpha * (dw @ dw) + (C / N) * xi.sum()

    def grad(z):
        w = z[:nw]
        g = np.empty_like(z)
        g[:nw] = w + 2.0 * alpha * (w - w0_full)
        g[nw:] = C / N
        return g

    A_full = np.concatenate(
        [A, (sidx[:, None] == np.arange(N)[None, :]).astype(float)], axis=1
    )
    cons = {
        "type": "ineq",
        "fun": lambda z: A_full @ z - b,
        "jac": lambda z: A_full,
    }
    lo = 0.0 if nonneg else None
    bounds = [(lo, None)] * (nw - 1) + [(wp_min, None)] + [(0.0, None)] * N
    if x0 is None:
        x0 = np.concatenate([w0_full, np.zeros(N)])
        viol = b - A @ w0_full
        for i in range(N):
            m = sidx == i
            if m.any():
                x0[nw + i] = max(0.0, float(viol[m].max()))

    def slacks_for(w):
        out = np.zeros(N)
        margins = b - A @ w
        for i in range(N):
            m = sidx == i
            if m.any():
                out[i] = max(0.0, float(margins[m].max()))
        return out

    def feasible_objective(z):
        w = z[:nw].copy()
        if nonneg:
            w = np.maximum(w, 0.0)
        w[-1] = max(w[-1], wp_min)
        return objective(np.concatenate([w, slacks_for(w)])), w

    res = minimize(
        objective, x0, jac=grad, bounds=bounds, constraints=[cons],
        method="SLSQP", options={"ftol": 1e-12, "maxiter": 500},
    )
    best_obj, best_w = feasible_objective(res.x)
    converged = bool(res.success)
    if not converged:
        # SLSQP occasionally stalls in its line search; the interior-point
        # solver is slower but dependable on these tiny problems
        from scipy.optimize import LinearConstraint

        res2 = minimize(
            objective, x0, jac=grad, bounds=bounds,
            constraints=[LinearConstraint(A_full, b, np.inf)],
            method="trust-constr", options={"gtol": 1e-10, "xtol": 1e-13, "maxiter": 3000},
        )
        obj2, w2 = feasible_objective(res2.x)
        if obj2 < best_obj:
            best_obj, best_w = obj2, w2
        converged = bool(res.success or res2.success)
    return best_w, slacks_for(best_w), converged


def _outer_objective(w, xi, w0_full, C, alpha):
    dw = w - w0_full
    return float(0.5 * w @ w + alpha * (dw @ dw) + (C / len(xi)) * np.sum(xi))


# ---------------------------------------------------------------------------
# CCCP trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    class_id: int
    w_c: np.ndarray
    w_p: float
    history: list
    manifest_rows: list = field(default_factory=list)
    converged: bool = True
    warning: str = ""


def train_class(samples, config=None):
    """CCCP with latent imputation and cutting planes for one class.

    Outer loop: impute latent labelings at the current w and reset the
    working sets. Inner loop: add each sample's most violated constraint
    while the violation exceeds the current slack by slack_tol, re-solving
    the QP after each round. Stops when the outer objective decreases by
    less than epsilon (relative); an iteration cap returns best-so-far with
    a warning.
    """
    config = config or TrainConfig()
    if not samples:
        raise ValueError("train_class needs at least one sample")
    for s in samples:
        if s.class_id != samples[0].class_id:
            raise ValueError("all samples must target the same class")
        if not s.prepared:
            prepare_sample(s, config)

    w0_full = config.w0_full()
    N = len(samples)
    w = w0_full.copy()
    history = []
    manifest = []
    prev = None            # (w, objective) of the best iterate so far
    stall = 0
    warning = ""
    converged = False

    for t in range(config.max_cccp):
        psis_hat = []
        for s in samples:
            lab = impute_latent(s, w, config)
            psis_hat.append(joint_feature(s, lab))

        wsets = [[] for _ in range(N)]
        xi = np.zeros(N)
        for _ in range(config.max_cutting):
            grew = False
            for i, s in enumerate(samples):
                lab, psi_bar, loss = most_violated(s, w, config)
                slack_new = max(0.0, loss - float(w @ psi_bar) + float(w @ psis_hat[i]))
                duplicate = any(np.array_equal(lab, st[0]) for st in wsets[i])
                if not duplicate and slack_new > xi[i] + config.slack_tol:
                    wsets[i].append((lab, psi_bar, loss))
                    grew = True
            if not grew:
                break
            w, xi, qp_ok = solve_qp(wsets, psis_hat, w0_full, config.C, config.alpha,
                                        wp_min=config.wp_min, nonneg=config.nonneg)
            if not qp_ok:
                warning = "QP did not converge"
        else:
            warning = warning or "cutting-plane iteration cap reached"

        obj = _outer_objective(w, xi, w0_full, config.C, config.alpha)
        # the eta-relaxed imputation is not an exact bound minimizer, so a
        # re-imputation can raise the objective; such iterates are kept as
        # exploration (the violator search at the new w exposes its own bad
        # basins) but the retained model is always the best so far, and the
        # recorded history tracks the retained-model objective
        improved = prev is None or obj < prev[1]
        manifest.append({
            "cccp_iter": t,
            "outer_objective": obj,
            "retained": bool(improved),
            "slacks": [float(v) for v in xi],
            "working_set_sizes": [len(ws) for ws in wsets],
        })
        if improved:
            small = prev is not None and prev[1] - obj < config.epsilon * max(1.0, abs(prev[1]))
            prev = (w.copy(), obj)
            history.append(obj)
            stall = 0
            if small:
                converged = True
                break
        else:
            stall += 1
            if stall >= 2:
                converged = True
                break
    w = prev[0]
    if not converged:
        warning = warning or "CCCP iteration cap reached"

    n = len(config.w0)
    return TrainResult(
        class_id=samples[0].class_id,
        w_c=w[:n].copy(), w_p=float(w[n]),
        history=history, manifest_rows=manifest,
        converged=converged, warning=warning,
    )


def assemble_model(results, config=None):
    """Combine per-class results into a weight matrix, columns in class-id
    order. With several classes a background column (class 0) handles
    all-background patches; it is set to the trainer's no-constraint
    solution.

    Classes are trained independently, so their absolute column magnitudes
    are not calibrated against each other; at prediction a node could buy a
    cheaper-column class by displacing its patch. Columns (with their
    pairwise weights) are therefore rescaled to a common aggregate
    magnitude, which preserves each class's learned metric proportions and
    its unary/pairwise balance. The wp_min floor is re-applied afterwards.
    """
    config = config or TrainConfig()
    by_class = {r.class_id: r for r in results}
    if len(by_class) != len(results):
        raise ValueError("duplicate class ids in training results")
    if 0 in by_class:
        raise ValueError("class 0 is reserved for background")
    ids = sorted(by_class)
    if len(ids) == 1:
        res = by_class[ids[0]]
        return me.WeightMatrix(
            res.w_c.reshape(-1, 1), np.asarray([max(res.w_p, config.wp_min)]),
            tuple(ids), me.METRIC_NAMES, config.scales,
        )
    target = float(np.abs(np.asarray(config.w0)).sum())
    cols = []
    pws = []
    for c in ids:
        res = by_class[c]
        mag = float(np.abs(res.w_c).sum())
        gamma = target / mag if mag > 0 else 1.0
        cols.append(gamma * res.w_c)
        pws.append(max(gamma * res.w_p, config.wp_min))
    # untrained background: hand-tuned proportions at the common magnitude,
    # stiffness typical of the trained classes
    ids = [0] + ids
    cols.insert(0, np.asarray(config.w0, dtype=np.float64))
    pws.insert(0, float(np.mean(pws)))
    return me.WeightMatrix(
        np.stack(cols, axis=1), np.asarray(pws), tuple(ids),
        me.METRIC_NAMES, config.scales,
    )


def write_model(path, wmat, config, extra_meta=None):
    """Model file: the weight-matrix format plus a config echo."""
    meta = {
        "C": repr(config.C), "alpha": repr(config.alpha), "eta": repr(config.eta),
        "epsilon": repr(config.epsilon), "spacing_mm": repr(config.spacing_mm),
        "labels": str(config.labels), "mi_bins": str(config.mi_bins),
    }
    meta.update(extra_meta or {})
    me.write_weights(path, wmat, meta)


def read_model(path):
    return me.read_weights(path)


def write_training_manifest(path, results):
    """Plain-text log: one line per (class, cccp_iter)."""
    lines = ["class cccp_iter outer_objective slacks working_set_sizes"]
    for r in results:
        for row in r.manifest_rows:
            slacks = ",".join(f"{v:.6g}" for v in row["slacks"])
            sizes = ",".join(str(v) for v in row["working_set_sizes"])
            tag = "" if row.get("retained", True) else " explored"
            lines.append(
                f"{r.class_id} {row['cccp_iter']} {row['outer_objective']:.9g} {slacks} {sizes}{tag}"
            )
        if r.warning:
            lines.append(f"# class {r.class_id}: {r.warning}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
