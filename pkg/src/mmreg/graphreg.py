"""Discrete MRF energy construction and minimization over the control grid.

The registration energy couples per-node data costs (class-weighted metric
aggregations) with an L1 smoothness term between neighbouring control-point
displacements. Minimization uses move-making expansion steps, each solved
exactly as a min-cut; the L1 pairwise term is a metric, so every expansion
move is submodular.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, coo_matrix
from scipy.sparse.csgraph import maximum_flow, breadth_first_order

from . import metrics as me
from .volume import (
    DeformationField,
    LabelSpace,
    Volume,
    build_pyramid,
    ffd_evaluate,
    interpolate_dense,
    make_control_grid,
    sample_field,
    warp,
    warp_mask,
)


@dataclass(frozen=True)
class PyramidConfig:
    """Pyramidal schedule parameters.

    Displacement labels are bounded by bound_factor x control spacing, which
    keeps the composed field diffeomorphic; after every step the label
    catalog shrinks by refine_factor.
    """
    levels: int = 2
    steps_per_level: int = 5
    labels_per_level: int = 125
    finest_spacing_mm: float = 25.0
    bound_factor: float = 0.4
    refine_factor: float = 0.7

    def __post_init__(self):
        if self.levels < 1 or self.steps_per_level < 1:
            raise ValueError("levels and steps_per_level must be >= 1")
        if not (0.0 < self.bound_factor <= 0.4):
            raise ValueError(f"bound_factor must be in (0, 0.4], got {self.bound_factor}")
        if not (0.0 < self.refine_factor < 1.0):
            raise ValueError(f"refine_factor must be in (0, 1), got {self.refine_factor}")


@dataclass(frozen=True)
class MrfInstance:
    """Pairwise MRF over the control grid.

    unaries: (|V|, |L|) node costs.
    pairwise_weight: scalar w_p applied to every edge unless edge_weights
        provides a per-edge value (used when w_p varies by dominant class).
    pairwise_table: (|L|, |L|) L1 distances (mm) between displacement labels.
    """
    unaries: np.ndarray
    pairwise_weight: float
    pairwise_table: np.ndarray
    edges: np.ndarray
    edge_weights: np.ndarray = None

    def __post_init__(self):
        u = np.ascontiguousarray(self.unaries, dtype=np.float64)
        t = np.ascontiguousarray(self.pairwise_table, dtype=np.float64)
        e = np.ascontiguousarray(self.edges, dtype=np.int64)
        object.__setattr__(self, "unaries", u)
        object.__setattr__(self, "pairwise_table", t)
        object.__setattr__(self, "edges", e)
        if self.edge_weights is not None:
            w = np.ascontiguousarray(self.edge_weights, dtype=np.float64)
            if w.shape != (len(e),):
                raise ValueError("edge_weights must have one entry per edge")
            object.__setattr__(self, "edge_weights", w)

    @property
    def n_nodes(self):
        return self.unaries.shape[0]

    @property
    def n_labels(self):
        return self.unaries.shape[1]

    def edge_weight_array(self):
        if self.edge_weights is not None:
            return self.edge_weights
        return np.full(len(self.edges), float(self.pairwise_weight))

    def energy(self, labeling):
        labeling = np.asarray(labeling)
        e = float(self.unaries[np.arange(self.n_nodes), labeling].sum())
        if len(self.edges):
            li = labeling[self.edges[:, 0]]
            lj = labeling[self.edges[:, 1]]
            e += float((self.edge_weight_array() * self.pairwise_table[li, lj]).sum())
        return e


def pairwise_l1_table(label_space):
    """(|L|, |L|) matrix of L1 distances between displacement vectors, in mm."""
    d = label_space.displacements
    return np.abs(d[:, None, :] - d[None, :, :]).sum(axis=2)


# ---------------------------------------------------------------------------
# label spaces
# ---------------------------------------------------------------------------

def initialize_label_space(config, spacing_at_level_mm):
    """Dense cubic displacement catalog for one pyramid level.

    k^3 = labels_per_level displacements with per-axis values uniformly
    spaced in [-bound*spacing, +bound*spacing]; k must be odd so the zero
    vector is included (and listed first).
    """
    k = round(config.labels_per_level ** (1.0 / 3.0))
    if k ** 3 != config.labels_per_level or k % 2 == 0:
        raise ValueError(
            f"labels_per_level must be the cube of an odd base, got {config.labels_per_level}"
        )
    spacing = np.asarray(spacing_at_level_mm, dtype=np.float64)
    if spacing.size == 1:
        spacing = np.full(3, float(spacing))
    axes = [np.linspace(-config.bound_factor * s, config.bound_factor * s, k) for s in spacing]
    dz, dy, dx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    disp = np.stack([dx.ravel(), dy.ravel(), dz.ravel()], axis=1)
    zero = np.nonzero(np.all(disp == 0.0, axis=1))[0][0]
    order = np.concatenate([[zero], np.delete(np.arange(len(disp)), zero)])
    disp = disp[order]
    return LabelSpace(disp, float(config.bound_factor * spacing.max()))


def refine_label_space(label_space, factor=0.7):
    """Shrink every displacement (and the norm bound) by `factor`."""
    return LabelSpace(label_space.displacements * factor, label_space.max_norm_mm * factor)


# ---------------------------------------------------------------------------
# instance construction
# ---------------------------------------------------------------------------

def build_instance(src, tgt, src_mask, wmat, grid, label_space, cfg=None):
    """Assemble the registration MRF.

    Unary (i, l): the metric feature vector for the displaced source patch
    vs the undisplaced target patch, weighted by the column of the dominant
    class of the displaced source-mask patch. The per-node pairwise weight
    comes from the zero-label dominant class; each edge uses the mean of its
    endpoint weights so the pairwise term stays label-pair-separable.

    With a single-column weight matrix the mask is optional and the lone
    column applies everywhere.
    """
    cfg = cfg or wmat.metric_config()
    feats = me.feature_table(src, tgt, grid, label_space, cfg)
    V, L, n = feats.shape
    edges = grid.edges
    table = pairwise_l1_table(label_space)

    if wmat.n_classes == 1:
        unaries = feats @ wmat.weights[:, 0]
        return MrfInstance(unaries, float(wmat.pairwise[0]), table, edges)

    if src_mask is None:
        raise ValueError("multi-class weight matrix requires a source mask")
    if not src_mask.aligned_with(src):
        raise ValueError("source mask is not aligned with the source volume")
    max_class = max(wmat.class_ids)
    cls = me.dominant_class_table(src_mask, grid, label_space, max_class)   # (V, L)
    # a label whose patches are empty gets the sentinel feature vector; pin
    # such labels to the node's zero-label class so the constant sentinel
    # cannot be discounted by switching to a lighter weight column
    empty = me.empty_feature_rows(feats, cfg)
    cls = np.where(empty, cls[:, :1], cls)
    col_of = np.zeros(max_class + 1, dtype=np.int64)
    for c in range(max_class + 1):
        col_of[c] = wmat.column_index(c) if c in wmat.class_ids else wmat.column_index(0)
    cols = col_of[cls]                                    # (V, L) column indices
    unaries = np.einsum("vln,nvl->vl", feats, wmat.weights[:, cols])
    node_wp = wmat.pairwise[cols[:, 0]]                   # zero-label dominant class
    edge_w = 0.5 * (node_wp[edges[:, 0]] + node_wp[edges[:, 1]]) if len(edges) else np.zeros(0)
    return MrfInstance(unaries, float(node_wp.mean()), table, edges, edge_w)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

# scipy's maximum_flow mishandles single capacities above int32 range even
# for int64 graphs, so float costs are quantized to stay below 2^31
_FLOW_CAP_MAX = (1 << 31) - 64


def _expansion_cut(instance, labeling, alpha, edge_w):
    """Optimal alpha-expansion move via min-cut; returns the move mask."""
    V = instance.n_nodes
    table = instance.pairwise_table
    theta = instance.unaries[:, alpha] - instance.unaries[np.arange(V), labeling]

    cap_rows = []
    cap_cols = []
    cap_vals = []
    if len(instance.edges):
        i = instance.edges[:, 0]
        j = instance.edges[:, 1]
        li = labeling[i]
        lj = labeling[j]
        A = edge_w * table[li, lj]
        B = edge_w * table[li, alpha]
        C = edge_w * table[alpha, lj]
        # submodular pairwise split: delta_i = C - A, delta_j = -C, arc = B + C - A
        np.add.at(theta, i, C - A)
        np.add.at(theta, j, -C)
        beta = B + C - A
        keep = beta > 0
        cap_rows.append(i[keep])
        cap_cols.append(j[keep])
        cap_vals.append(beta[keep])

    s = V
    t = V + 1
    pos = theta > 0
    neg = theta < 0
    cap_rows.append(np.full(pos.sum(), s, dtype=np.int64))
    cap_cols.append(np.nonzero(pos)[0])
    cap_vals.append(theta[pos])
    cap_rows.append(np.nonzero(neg)[0])
    cap_cols.append(np.full(neg.sum(), t, dtype=np.int64))
    cap_vals.append(-theta[neg])

    rows = np.concatenate(cap_rows)
    cols = np.concatenate(cap_cols)
    vals = np.concatenate(cap_vals)
    if len(vals) == 0:
        return np.zeros(V, dtype=bool)

    scale = float(_FLOW_CAP_MAX) / max(vals.max(), 1e-300)
    ivals = np.floor(vals * scale).astype(np.int64)
    keep = ivals > 0
    rows, cols, ivals = rows[keep], cols[keep], ivals[keep]
    if len(ivals) == 0:
        return np.zeros(V, dtype=bool)

    n = V + 2
    graph = csr_matrix(
        coo_matrix((ivals, (rows, cols)), shape=(n, n), dtype=np.int64)
    )
    res = maximum_flow(graph, s, t)
    residual = graph - res.flow
    residual = residual.tocoo()
    mask = residual.data > 0
    adj = csr_matrix(
        (np.ones(mask.sum(), dtype=np.int8), (residual.row[mask], residual.col[mask])),
        shape=(n, n),
    )
    reach = breadth_first_order(adj, s, directed=True, return_predecessors=False)
    reachable = np.zeros(n, dtype=bool)
    reachable[reach] = True
    return ~reachable[:V]


def _icm_pass(instance, labeling, neighbor_lists):
    """One exact single-node sweep; returns number of changed nodes."""
    changed = 0
    for i in range(instance.n_nodes):
        nbrs, ws = neighbor_lists[i]
        costs = instance.unaries[i].copy()
        for j, w in zip(nbrs, ws):
            costs += w * instance.pairwise_table[:, labeling[j]]
        best = int(np.argmin(costs))
        if best != labeling[i]:
            labeling[i] = best
            changed += 1
    return changed


def _neighbor_lists(instance):
    out = [([], []) for _ in range(instance.n_nodes)]
    ew = instance.edge_weight_array()
    for k, (i, j) in enumerate(instance.edges):
        out[i][0].append(j)
        out[i][1].append(ew[k])
        out[j][0].append(i)
        out[j][1].append(ew[k])
    return out


def solve(instance, max_sweeps=20):
    """Approximately minimize the MRF energy by expansion moves.

    Starts from the all-zero labeling, sweeps the label catalog until no
    expansion move improves the energy, then polishes with exact
    single-node descent. The result never exceeds the zero-labeling energy
    and is locally optimal under single-node changes; with zero pairwise
    weight it equals the per-node argmin exactly.
    """
    V = instance.n_nodes
    L = instance.n_labels
    labeling = np.zeros(V, dtype=np.int64)
    if L == 1:
        return labeling
    edge_w = instance.edge_weight_array()
    if len(instance.edges) == 0 or np.all(edge_w == 0.0):
        return np.argmin(instance.unaries, axis=1).astype(np.int64)

    energy = instance.energy(labeling)
    for _ in range(max_sweeps):
        improved = False
        for alpha in range(L):
            move = _expansion_cut(instance, labeling, alpha, edge_w)
            if not move.any():
                continue
            candidate = np.where(move, alpha, labeling)
            cand_energy = instance.energy(candidate)
            if cand_energy < energy:
                labeling = candidate
                energy = cand_energy
                improved = True
        if not improved:
            break

    nbrs = _neighbor_lists(instance)
    for _ in range(50):
        if _icm_pass(instance, labeling, nbrs) == 0:
            break
    return labeling


def solve_bruteforce(instance, limit=10_000_000):
    """Exact minimum by enumeration; ties break to the lexicographically
    smallest labeling (node 0 most significant)."""
    V = instance.n_nodes
    L = instance.n_labels
    total = L ** V
    if total > limit:
        raise ValueError(f"{L}^{V} labelings exceed the enumeration limit {limit}")
    ew = instance.edge_weight_array()
    edges = instance.edges
    best_energy = np.inf
    best_index = -1
    chunk = 1 << 18
    powers = L ** (V - 1 - np.arange(V, dtype=np.int64))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % L       # (chunk, V)
        e = instance.unaries[np.arange(V)[None, :], digits].sum(axis=1)
        if len(edges):
            li = digits[:, edges[:, 0]]
            lj = digits[:, edges[:, 1]]
            e += (ew[None, :] * instance.pairwise_table[li, lj]).sum(axis=1)
        k = int(np.argmin(e))
        if e[k] < best_energy:
            best_energy = float(e[k])
            best_index = int(idx[k])
    digits = (best_index // powers) % L
    return digits.astype(np.int64)


# ---------------------------------------------------------------------------
# pyramidal registration
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    level: int
    step: int
    label_max_norm_mm: float
    energy_zero: float
    energy_accepted: float
    max_sparse_component_mm: float
    bound_mm: float
    runtime_s: float


@dataclass
class Diagnostics:
    steps: list = field(default_factory=list)

    def to_text(self):
        lines = ["level step max_label_norm_mm energy_before energy_after"]
        for r in self.steps:
            lines.append(
                f"{r.level} {r.step} {r.label_max_norm_mm:.6g} "
                f"{r.energy_zero:.9g} {r.energy_accepted:.9g}"
            )
        return "\n".join(lines) + "\n"


def register(src, tgt, src_mask, wmat, config=None, cfg=None):
    """Pyramidal multi-metric registration (coarse to fine).

    Per level: build the label catalog, then repeatedly (a) warp the source
    by the accumulated field, (b) build and solve the MRF, (c) compose the
    step field into the accumulated dense field, (d) shrink the labels.

    Returns:
        (DeformationField with the dense composed field, Diagnostics).
    """
    config = config or PyramidConfig()
    cfg = cfg or wmat.metric_config()
    vol_pyr = {"src": build_pyramid(src, config.levels), "tgt": build_pyramid(tgt, config.levels)}
    mask_pyr = build_pyramid(src_mask, config.levels) if src_mask is not None else None

    dims = src.dims
    centers = np.stack(
        np.meshgrid(*src.voxel_centers_mm(), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    acc = np.zeros((len(centers), 3), dtype=np.float64)
    diag = Diagnostics()

    for level in range(config.levels - 1, -1, -1):
        s_lvl = vol_pyr["src"][level]
        t_lvl = vol_pyr["tgt"][level]
        m_lvl = mask_pyr[level] if mask_pyr is not None else None
        spacing = tuple(config.finest_spacing_mm * (2 ** level) for _ in range(3))
        grid = make_control_grid(s_lvl, spacing)
        ls = initialize_label_space(config, spacing)

        for step in range(config.steps_per_level):
            t0 = time.perf_counter()
            acc_field = DeformationField(
                dense=acc.reshape(dims + (3,)), spacing=src.spacing, origin=src.origin
            )
            if level == 0:
                lvl_disp = acc.reshape(dims + (3,))
            else:
                lvl_pts = np.stack(
                    np.meshgrid(*s_lvl.voxel_centers_mm(), indexing="ij"), axis=-1
                ).reshape(-1, 3)
                lvl_disp = sample_field(acc_field, lvl_pts).reshape(s_lvl.dims + (3,))
            lvl_field = DeformationField(dense=lvl_disp, spacing=s_lvl.spacing, origin=s_lvl.origin)
            warped = warp(s_lvl, lvl_field)
            warped_mask = warp_mask(m_lvl, lvl_field) if m_lvl is not None else None

            inst = build_instance(warped, t_lvl, warped_mask, wmat, grid, ls, cfg)
            labeling = solve(inst)
            e_zero = inst.energy(np.zeros(inst.n_nodes, dtype=np.int64))
            e_acc = inst.energy(labeling)

            sparse = ls.displacements[labeling]
            bound = config.bound_factor * max(spacing)
            max_comp = float(np.abs(sparse).max()) if len(sparse) else 0.0

            step_disp = ffd_evaluate(grid, sparse, centers + acc)
            acc = acc + step_disp

            diag.steps.append(StepRecord(
                level=level, step=step,
                label_max_norm_mm=float(np.abs(ls.displacements).max()),
                energy_zero=e_zero, energy_accepted=e_acc,
                max_sparse_component_mm=max_comp, bound_mm=bound,
                runtime_s=time.perf_counter() - t0,
            ))
            ls = refine_label_space(ls, config.refine_factor)

    final = DeformationField(
        dense=acc.reshape(dims + (3,)), spacing=src.spacing, origin=src.origin
    )
    return final, diag
