import numpy as np
import pytest

from mmreg import graphreg as gr
from mmreg import metrics as me
from mmreg.volume import LabelSpace, SegmentationMask, Volume, make_control_grid, warp_mask
from mmreg.synth import SynthSpec, synth_dataset


def grid_edges_2d(nx, ny):
    e = []
    for y in range(ny):
        for x in range(nx):
            i = x + nx * y
            if x + 1 < nx:
                e.append([i, i + 1])
            if y + 1 < ny:
                e.append([i, i + nx])
    return np.array(e)


def registration_like_instance(seed, n_nodes=6, n_labels=4, edges=None,
                               wp_range=(0.0, 1.0)):
    """Random instance with the structure the registration produces: labels
    are displacement candidates, unaries grow with the distance to a smooth
    per-node preferred displacement, pairwise is the L1 label metric."""
    rng = np.random.default_rng(seed)
    disp = np.vstack([[0.0, 0.0, 0.0], rng.uniform(-8, 8, (n_labels - 1, 3))])
    ls = LabelSpace(disp, 8.0)
    table = gr.pairwise_l1_table(ls)
    base = rng.uniform(-8, 8, 3)
    unaries = np.zeros((n_nodes, n_labels))
    for i in range(n_nodes):
        target = base + rng.normal(0, 2.0, 3)
        unaries[i] = 0.8 * np.abs(disp - target).sum(axis=1) + rng.normal(0, 1.0, n_labels)
    unaries -= unaries.min()
    wp = rng.uniform(*wp_range)
    if edges is None:
        edges = grid_edges_2d(2, 3)
    return gr.MrfInstance(unaries, wp, table, edges)


class TestLabelSpaces:
    def test_paper_defaults_125_at_25mm(self):
        cfg = gr.PyramidConfig()
        ls = gr.initialize_label_space(cfg, (25.0, 25.0, 25.0))
        assert ls.n_labels == 125
        vals = np.unique(ls.displacements[:, 0])
        assert np.allclose(vals, [-10.0, -5.0, 0.0, 5.0, 10.0])

    def test_27_labels_at_10mm(self):
        cfg = gr.PyramidConfig(labels_per_level=27)
        ls = gr.initialize_label_space(cfg, (10.0, 10.0, 10.0))
        assert np.allclose(np.unique(ls.displacements[:, 1]), [-4.0, 0.0, 4.0])

    def test_zero_vector_exactly_once_and_first(self):
        cfg = gr.PyramidConfig()
        ls = gr.initialize_label_space(cfg, (25.0, 25.0, 25.0))
        zero_rows = np.all(ls.displacements == 0.0, axis=1)
        assert zero_rows.sum() == 1 and zero_rows[0]

    def test_non_cube_count_rejected(self):
        with pytest.raises(ValueError):
            gr.initialize_label_space(gr.PyramidConfig(labels_per_level=100), (25.0,) * 3)
        with pytest.raises(ValueError):
            gr.initialize_label_space(gr.PyramidConfig(labels_per_level=64), (25.0,) * 3)

    def test_refine_scales_by_factor(self):
        cfg = gr.PyramidConfig()
        ls = gr.initialize_label_space(cfg, (25.0,) * 3)
        ref = gr.refine_label_space(ls, 0.7)
        assert np.allclose(np.unique(ref.displacements[:, 0]), [-7.0, -3.5, 0.0, 3.5, 7.0])
        assert ref.max_norm_mm == pytest.approx(0.7 * ls.max_norm_mm)
        five = ls
        for _ in range(5):
            five = gr.refine_label_space(five, 0.7)
        assert np.abs(five.displacements).max() == pytest.approx(10.0 * 0.7 ** 5)

    def test_pairwise_table_is_a_metric(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            disp = np.vstack([[0, 0, 0], rng.uniform(-10, 10, (7, 3))])
            table = gr.pairwise_l1_table(LabelSpace(disp, 10.0))
            assert np.allclose(table, table.T)
            assert np.all(np.diag(table) == 0.0)
            n = len(table)
            tri = table[:, :, None] + table[None, :, :]   # d(i,k) + d(k,j)
            assert np.all(table[:, None, :] <= tri.transpose(0, 2, 1) + 1e-12)

    def test_bound_factor_validation(self):
        with pytest.raises(ValueError):
            gr.PyramidConfig(bound_factor=0.5)
        with pytest.raises(ValueError):
            gr.PyramidConfig(refine_factor=1.0)


class TestSolve:
    def test_two_node_chain_hand_case(self):
        inst = gr.MrfInstance(
            np.array([[0.0, 5.0], [5.0, 0.0]]), 1.0,
            np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[0, 1]]),
        )
        lab = gr.solve(inst)
        assert inst.energy(lab) == pytest.approx(1.0)
        assert np.array_equal(lab, [0, 1])
        assert np.array_equal(gr.solve_bruteforce(inst), [0, 1])

    def test_zero_pairwise_equals_argmin(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            un = rng.uniform(0, 10, (6, 4))
            inst = gr.MrfInstance(un, 0.0, np.zeros((4, 4)), grid_edges_2d(2, 3))
            assert np.array_equal(gr.solve(inst), np.argmin(un, axis=1))

    def test_single_label(self):
        inst = gr.MrfInstance(np.zeros((4, 1)), 1.0, np.zeros((1, 1)), grid_edges_2d(2, 2))
        assert np.array_equal(gr.solve(inst), np.zeros(4))

    def test_never_worse_than_zero_labeling(self):
        for seed in range(30):
            inst = registration_like_instance(seed, wp_range=(0.0, 2.0))
            lab = gr.solve(inst)
            assert inst.energy(lab) <= inst.energy(np.zeros(6, dtype=int)) + 1e-12

    def test_single_node_local_optimality(self):
        for seed in range(20):
            inst = registration_like_instance(seed)
            lab = gr.solve(inst)
            e = inst.energy(lab)
            for i in range(inst.n_nodes):
                for l in range(inst.n_labels):
                    cand = lab.copy()
                    cand[i] = l
                    assert inst.energy(cand) >= e - 1e-9

    def test_matches_bruteforce_on_seeded_instances(self):
        worst = 1.0
        for seed in range(100):
            inst = registration_like_instance(seed)
            e1 = inst.energy(gr.solve(inst))
            e2 = inst.energy(gr.solve_bruteforce(inst))
            assert e1 <= 1.05 * e2 + 1e-12
            worst = max(worst, e1 / max(e2, 1e-12))
        assert worst <= 1.05

    def test_bruteforce_lexicographic_ties(self):
        # all-equal unaries, zero pairwise: every labeling optimal
        inst = gr.MrfInstance(np.zeros((3, 3)), 0.0, np.zeros((3, 3)), np.zeros((0, 2), dtype=int))
        assert np.array_equal(gr.solve_bruteforce(inst), [0, 0, 0])

    def test_bruteforce_limit(self):
        inst = gr.MrfInstance(np.zeros((30, 10)), 0.0, np.zeros((10, 10)), np.zeros((0, 2), dtype=int))
        with pytest.raises(ValueError):
            gr.solve_bruteforce(inst)

    def test_edge_weight_array_variants(self):
        inst = registration_like_instance(3)
        assert np.allclose(inst.edge_weight_array(), inst.pairwise_weight)
        inst2 = gr.MrfInstance(inst.unaries, 0.0, inst.pairwise_table, inst.edges,
                               np.linspace(0, 1, len(inst.edges)))
        lab = gr.solve(inst2)
        assert inst2.energy(lab) <= inst2.energy(np.zeros(6, dtype=int)) + 1e-12


@pytest.fixture(scope="module")
def small_pair():
    spec = SynthSpec(
        dims=(20, 18, 16), spacing_mm=(2.0, 2.0, 2.0), n_pairs=1,
        organ_radii_mm=(7.0,), organ_centers_frac=((0.5, 0.5, 0.5),),
        center_jitter_mm=0.0, radius_jitter_mm=0.0,
        base_levels=(0.25, 0.7), texture_amp=(0.05, 0.08),
        remap_region_x_frac=1.0, noise_sigma=0.01,
        gt_mode="identity", max_gt_disp_mm=8.0,
    )
    return synth_dataset(spec, 0)[0]


class TestBuildInstance:
    def test_unaries_match_straight_loop(self, small_pair):
        p = small_pair
        grid = make_control_grid(p.source, 12.0)
        cfgp = gr.PyramidConfig(levels=1, steps_per_level=1, labels_per_level=27,
                                finest_spacing_mm=12.0)
        ls = gr.initialize_label_space(cfgp, (12.0,) * 3)
        rng = np.random.default_rng(0)
        wmat = me.WeightMatrix(rng.uniform(0.1, 2.0, (4, 2)), np.array([0.3, 0.6]), (0, 1))
        cfg = me.MetricConfig()
        inst = gr.build_instance(p.source, p.target, p.source_mask, wmat, grid, ls, cfg)

        empties = me.empty_feature_rows(
            me.feature_table(p.source, p.target, grid, ls, cfg), cfg
        )
        checked = 0
        for node in range(0, grid.n_nodes, 17):
            for lab in range(0, ls.n_labels, 5):
                if empties[node, lab]:
                    continue
                u = me.unary_features(p.source, p.target, grid, ls, node, lab, cfg)
                c = me.dominant_class(p.source_mask, grid, ls, node, lab, 1)
                expected = me.aggregated_unary(u, wmat, c)
                assert inst.unaries[node, lab] == pytest.approx(expected, rel=1e-9)
                checked += 1
        assert checked > 10

    def test_self_match_zero_label_dominates(self, small_pair):
        p = small_pair
        grid = make_control_grid(p.source, 12.0)
        cfgp = gr.PyramidConfig(levels=1, steps_per_level=1, labels_per_level=27,
                                finest_spacing_mm=12.0)
        ls = gr.initialize_label_space(cfgp, (12.0,) * 3)
        w = me.single_metric_weights("SAD", 1.0, 0.0)
        inst = gr.build_instance(p.source, p.source, None, w, grid, ls)
        wins = 0
        total = 0
        for node in range(grid.n_nodes):
            row = inst.unaries[node]
            if np.all(row == row[0]):
                continue                      # empty patches, uninformative
            total += 1
            if row[0] <= row.min() + 1e-12:
                wins += 1
        assert total > 0 and wins / total >= 0.9

    def test_single_label_energy_is_unary_sum(self, small_pair):
        p = small_pair
        grid = make_control_grid(p.source, 12.0)
        ls = LabelSpace(np.zeros((1, 3)), 0.0)
        w = me.single_metric_weights("SAD", 1.0, 0.5)
        inst = gr.build_instance(p.source, p.target, None, w, grid, ls)
        lab = np.zeros(grid.n_nodes, dtype=int)
        assert inst.energy(lab) == pytest.approx(inst.unaries[:, 0].sum())

    def test_multiclass_requires_mask(self, small_pair):
        p = small_pair
        grid = make_control_grid(p.source, 12.0)
        ls = LabelSpace(np.zeros((1, 3)), 0.0)
        wmat = me.WeightMatrix(np.ones((4, 2)), np.zeros(2), (0, 1))
        with pytest.raises(ValueError):
            gr.build_instance(p.source, p.target, None, wmat, grid, ls)


class TestRegister:
    def test_self_registration(self, small_pair):
        p = small_pair
        w = me.WeightMatrix(np.array([[0.1], [10.0], [10.0], [10.0]]), np.array([0.4]), (0,))
        cfg = gr.PyramidConfig(levels=2, steps_per_level=3, labels_per_level=27,
                               finest_spacing_mm=12.0)
        fld, diag = gr.register(p.source, p.source, p.source_mask, w, cfg)
        assert np.abs(fld.dense).mean() < 0.5
        for rec in diag.steps:
            assert rec.energy_accepted <= rec.energy_zero + 1e-9

    def test_translation_recovery_small(self):
        spec = SynthSpec(
            dims=(24, 20, 18), spacing_mm=(2.0, 2.0, 2.0), n_pairs=1,
            organ_radii_mm=(7.0,), organ_centers_frac=((0.45, 0.5, 0.5),),
            center_jitter_mm=0.0, radius_jitter_mm=0.0,
            base_levels=(0.25, 0.7), texture_amp=(0.05, 0.08),
            remap_region_x_frac=1.0, noise_sigma=0.01,
            gt_mode="translate", gt_translate_mm=(4.0, 0.0, 0.0), max_gt_disp_mm=8.0,
        )
        p = synth_dataset(spec, 1)[0]
        w = me.WeightMatrix(np.array([[0.1], [10.0], [10.0], [10.0]]), np.array([0.4]), (0,))
        cfg = gr.PyramidConfig(levels=1, steps_per_level=4, labels_per_level=27,
                               finest_spacing_mm=12.0)
        fld, _ = gr.register(p.source, p.target, p.source_mask, w, cfg)
        fg = p.target_mask.labels > 0
        err = np.linalg.norm(fld.dense - p.gt_field.dense, axis=3)[fg]
        assert err.mean() <= 2.4      # half of one initial label step

    def test_diffeomorphism_bound_per_step(self, small_pair):
        p = small_pair
        w = me.WeightMatrix(np.array([[0.1], [10.0], [10.0], [10.0]]), np.array([0.2]), (0,))
        cfg = gr.PyramidConfig(levels=2, steps_per_level=3, labels_per_level=27,
                               finest_spacing_mm=12.0)
        _, diag = gr.register(p.source, p.target, p.source_mask, w, cfg)
        assert len(diag.steps) == cfg.levels * cfg.steps_per_level
        for rec in diag.steps:
            assert rec.max_sparse_component_mm <= rec.bound_mm + 1e-9

    def test_diagnostics_text(self, small_pair):
        p = small_pair
        w = me.single_metric_weights("SAD", 0.1, 0.01)
        cfg = gr.PyramidConfig(levels=1, steps_per_level=2, labels_per_level=27,
                               finest_spacing_mm=12.0)
        _, diag = gr.register(p.source, p.target, None, w, cfg)
        text = diag.to_text()
        assert text.startswith("level step")
        assert len(text.strip().splitlines()) == 3
