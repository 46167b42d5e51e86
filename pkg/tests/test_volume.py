import os

import numpy as np
import pytest

from mmreg.volume import (
    DeformationField,
    FormatError,
    LabelSpace,
    SegmentationMask,
    Volume,
    build_pyramid,
    extract_patch,
    ffd_evaluate,
    interpolate_dense,
    make_control_grid,
    read_field,
    read_mask,
    read_volume,
    tile_slices,
    warp,
    warp_mask,
    write_field,
    write_mask,
    write_volume,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vol(rng):
    return Volume(rng.random((10, 9, 8)).astype(np.float32), (2.0, 2.0, 2.0))


def zero_field(vol):
    return DeformationField(
        dense=np.zeros(vol.dims + (3,)), spacing=vol.spacing, origin=vol.origin
    )


def constant_field(vol, d):
    dense = np.broadcast_to(np.asarray(d, dtype=np.float64), vol.dims + (3,)).copy()
    return DeformationField(dense=dense, spacing=vol.spacing, origin=vol.origin)


class TestContainers:
    def test_volume_validation(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            Volume(np.zeros((4, 4, 4), dtype=np.float32), spacing=(1, 0, 1))

    def test_mask_classes(self):
        m = SegmentationMask(np.array([[[0, 1], [2, 2]]], dtype=np.uint8))
        assert m.class_ids() == [1, 2]
        assert m.binary(2).sum() == 2

    def test_grid_edge_count(self, vol):
        grid = make_control_grid(vol, 6.0)
        gx, gy, gz = grid.grid_dims
        expected = (gx - 1) * gy * gz + gx * (gy - 1) * gz + gx * gy * (gz - 1)
        assert len(grid.edges) == expected

    def test_grid_covers_volume(self, vol):
        grid = make_control_grid(vol, 6.0)
        lo, hi = vol.extent_mm()
        pts = grid.points
        assert np.all(pts.min(axis=0) <= lo)
        assert np.all(pts.max(axis=0) >= hi)

    def test_label_space_zero_first(self):
        with pytest.raises(ValueError):
            LabelSpace(np.array([[1.0, 0, 0], [0, 0, 0]]), 1.0)


class TestFfdInterpolation:
    def test_zero_field(self, vol):
        grid = make_control_grid(vol, 8.0)
        fld = interpolate_dense(grid, np.zeros((grid.n_nodes, 3)), vol)
        assert np.all(fld.dense == 0.0)

    def test_partition_of_unity(self, vol):
        grid = make_control_grid(vol, 8.0)
        sparse = np.tile([5.0, -3.0, 2.0], (grid.n_nodes, 1))
        fld = interpolate_dense(grid, sparse, vol)
        assert np.abs(fld.dense - [5.0, -3.0, 2.0]).max() < 1e-6

    def test_single_point_central_weight(self):
        # geometry chosen so one control point coincides with voxel (8,8,8)
        vol = Volume(np.zeros((17, 17, 17), dtype=np.float32), (1.0, 1.0, 1.0))
        grid = make_control_grid(vol, 4.0)
        pts = grid.points
        node = int(np.nonzero(np.all(pts == [8.0, 8.0, 8.0], axis=1))[0][0])
        sparse = np.zeros((grid.n_nodes, 3))
        sparse[node] = [3.0, 0.0, 0.0]
        fld = interpolate_dense(grid, sparse, vol)
        expected = _bspline_tensor_oracle(grid, sparse, np.array([8.0, 8.0, 8.0]))
        assert fld.dense[8, 8, 8, 0] == pytest.approx(expected[0], abs=1e-12)
        assert expected[0] == pytest.approx((2.0 / 3.0) ** 3 * 3.0, abs=1e-12)

    def test_matches_pointwise_oracle(self, vol, rng):
        grid = make_control_grid(vol, 8.0)
        sparse = rng.uniform(-3, 3, (grid.n_nodes, 3))
        fld = interpolate_dense(grid, sparse, vol)
        for _ in range(20):
            idx = tuple(rng.integers(0, d) for d in vol.dims)
            p = np.array([vol.origin[a] + idx[a] * vol.spacing[a] for a in range(3)])
            expected = _bspline_tensor_oracle(grid, sparse, p)
            assert np.allclose(fld.dense[idx], expected, atol=1e-10)

    def test_ffd_evaluate_matches_dense(self, vol, rng):
        grid = make_control_grid(vol, 8.0)
        sparse = rng.uniform(-3, 3, (grid.n_nodes, 3))
        fld = interpolate_dense(grid, sparse, vol)
        pts = np.stack(np.meshgrid(*vol.voxel_centers_mm(), indexing="ij"), axis=-1).reshape(-1, 3)
        out = ffd_evaluate(grid, sparse, pts).reshape(vol.dims + (3,))
        assert np.allclose(out, fld.dense, atol=1e-10)

    def test_length_mismatch(self, vol):
        grid = make_control_grid(vol, 8.0)
        with pytest.raises(ValueError):
            interpolate_dense(grid, np.zeros((grid.n_nodes - 1, 3)), vol)


def _bspline_tensor_oracle(grid, sparse, point_mm):
    """Independent scalar evaluation: explicit basis polynomials, full sum."""

    def basis(u):
        return [
            (1 - u) ** 3 / 6.0,
            (3 * u ** 3 - 6 * u ** 2 + 4) / 6.0,
            (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6.0,
            u ** 3 / 6.0,
        ]

    gx, gy, gz = grid.grid_dims
    out = np.zeros(3)
    cells = []
    ws = []
    for a in range(3):
        t = (point_mm[a] - grid.origin_mm[a]) / grid.spacing_mm[a]
        c = int(np.floor(t))
        cells.append(c)
        ws.append(basis(t - c))
    for i in range(4):
        for j in range(4):
            for k in range(4):
                node = (
                    (cells[0] - 1 + i)
                    + gx * ((cells[1] - 1 + j) + gy * (cells[2] - 1 + k))
                )
                out += ws[0][i] * ws[1][j] * ws[2][k] * sparse[node]
    return out


class TestWarp:
    def test_zero_field_identity(self, vol):
        assert np.array_equal(warp(vol, zero_field(vol)).data, vol.data)

    def test_integral_shift(self, vol):
        fld = constant_field(vol, (2.0, 0.0, 0.0))   # exactly one voxel
        out = warp(vol, fld)
        assert np.allclose(out.data[:-1], vol.data[1:], atol=1e-6)
        assert np.all(out.data[-1] == 0.0)

    def test_fill_value(self, vol):
        fld = constant_field(vol, (2.0, 0.0, 0.0))
        out = warp(vol, fld, fill_value=-7.0)
        assert np.all(out.data[-1] == -7.0)

    def test_half_voxel_against_oracle(self, vol):
        fld = constant_field(vol, (1.0, 0.0, 0.0))   # half a voxel
        out = warp(vol, fld)
        data = vol.data.astype(np.float64)
        expected = 0.5 * (data[:-1] + data[1:])
        assert np.allclose(out.data[:-1], expected, atol=1e-6)

    def test_random_field_against_pointwise_oracle(self, vol, rng):
        dense = rng.uniform(-3, 3, vol.dims + (3,))
        fld = DeformationField(dense=dense, spacing=vol.spacing, origin=vol.origin)
        out = warp(vol, fld)
        data = vol.data.astype(np.float64)
        for _ in range(30):
            idx = tuple(rng.integers(0, d) for d in vol.dims)
            c = [idx[a] + dense[idx][a] / vol.spacing[a] for a in range(3)]
            if any(c[a] < 0 or c[a] > vol.dims[a] - 1 for a in range(3)):
                assert out.data[idx] == 0.0
                continue
            lo = [min(int(np.floor(c[a])), vol.dims[a] - 2) for a in range(3)]
            f = [c[a] - lo[a] for a in range(3)]
            acc = 0.0
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        wgt = (
                            (f[0] if dx else 1 - f[0])
                            * (f[1] if dy else 1 - f[1])
                            * (f[2] if dz else 1 - f[2])
                        )
                        acc += wgt * data[lo[0] + dx, lo[1] + dy, lo[2] + dz]
            assert out.data[idx] == pytest.approx(acc, abs=1e-5)

    def test_missing_dense_field(self, vol):
        with pytest.raises(ValueError):
            warp(vol, DeformationField(sparse=np.zeros((8, 3))))

    def test_dim_mismatch(self, vol):
        small = Volume(np.zeros((4, 4, 4), dtype=np.float32), vol.spacing)
        with pytest.raises(ValueError):
            warp(vol, zero_field(small))


class TestWarpMask:
    def test_zero_field_identity(self, rng):
        mask = SegmentationMask((rng.random((6, 7, 8)) > 0.5).astype(np.uint8) * 3, (1, 1, 1))
        out = warp_mask(mask, zero_field(mask))
        assert np.array_equal(out.labels, mask.labels)

    def test_integral_shift(self, rng):
        mask = SegmentationMask(rng.integers(0, 3, (6, 7, 8)).astype(np.uint8), (2, 2, 2))
        out = warp_mask(mask, constant_field(mask, (2.0, 0.0, 0.0)))
        assert np.array_equal(out.labels[:-1], mask.labels[1:])
        assert np.all(out.labels[-1] == 0)

    def test_label_closure(self, rng):
        mask = SegmentationMask((rng.random((6, 7, 8)) > 0.6).astype(np.uint8) * 2, (2, 2, 2))
        dense = rng.uniform(-4, 4, mask.dims + (3,))
        fld = DeformationField(dense=dense, spacing=mask.spacing, origin=mask.origin)
        out = warp_mask(mask, fld)
        assert set(np.unique(out.labels)) <= {0, 2}


class TestExtractPatch:
    def test_center_extent_zero(self, vol):
        center = [vol.origin[a] + 4 * vol.spacing[a] for a in range(3)]
        p = extract_patch(vol, center, 0)
        assert p.n_voxels == 1
        assert p.data[0, 0, 0] == vol.data[4, 4, 4]

    def test_corner_crop(self, vol):
        p = extract_patch(vol, vol.origin, 3)
        assert p.data.shape == (4, 4, 4)
        assert p.left == (0, 0, 0) and p.right == (3, 3, 3)

    def test_near_face_crop(self, vol):
        nx = vol.dims[0]
        center = [vol.origin[0] + (nx - 3) * vol.spacing[0], vol.origin[1] + 8.0, vol.origin[2] + 8.0]
        p = extract_patch(vol, center, 3)
        assert p.data.shape[0] == 6       # 3 left + center + 2 right

    def test_outside_is_empty(self, vol):
        p = extract_patch(vol, (-5.0, 0.0, 0.0), 2)
        assert p.is_empty

    def test_exhaustive_crop_arithmetic(self):
        vol = Volume(np.zeros((8, 8, 8), dtype=np.float32), (1.0, 1.0, 1.0))
        for ext in (0, 1, 2, 3):
            for cx in range(8):
                for cy in range(8):
                    p = extract_patch(vol, (cx, cy, 4.0), ext)
                    wx = min(cx + ext, 7) - max(cx - ext, 0) + 1
                    wy = min(cy + ext, 7) - max(cy - ext, 0) + 1
                    wz = min(4 + ext, 7) - max(4 - ext, 0) + 1
                    assert p.n_voxels == wx * wy * wz


class TestTiles:
    def test_tiles_partition_volume(self, vol):
        grid = make_control_grid(vol, 7.0)
        cover = np.zeros(vol.dims, dtype=int)
        for sl in tile_slices(grid, vol):
            cover[sl] += 1
        assert np.all(cover == 1)


class TestPyramid:
    def test_downsample_dims_spacing(self, vol):
        pyr = build_pyramid(vol, 2)
        assert pyr[1].dims == tuple(-(-d // 2) for d in vol.dims)
        assert pyr[1].spacing == tuple(2 * s for s in vol.spacing)

    def test_mask_pyramid_labels(self, rng):
        mask = SegmentationMask(rng.integers(0, 4, (9, 8, 7)).astype(np.uint8), (1, 1, 1))
        pyr = build_pyramid(mask, 2)
        assert set(np.unique(pyr[1].labels)) <= set(np.unique(mask.labels))


class TestRawFileFormat:
    def test_volume_roundtrip(self, tmp_path, vol):
        path = os.path.join(tmp_path, "vol.vol")
        write_volume(path, vol)
        back = read_volume(path)
        assert np.array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing and back.origin == vol.origin

    def test_payload_is_x_fastest(self, tmp_path, vol):
        path = os.path.join(tmp_path, "vol.vol")
        write_volume(path, vol)
        raw = np.fromfile(os.path.join(tmp_path, "vol.raw"), dtype="<f4")
        # first nx entries run along x at y=z=0
        assert np.array_equal(raw[: vol.dims[0]], vol.data[:, 0, 0])

    def test_mask_roundtrip(self, tmp_path, rng):
        mask = SegmentationMask(rng.integers(0, 5, (5, 6, 7)).astype(np.uint8), (1, 2, 3), (0, -4, 2))
        path = os.path.join(tmp_path, "m.msk")
        write_mask(path, mask)
        back = read_mask(path)
        assert np.array_equal(back.labels, mask.labels)
        assert back.spacing == mask.spacing and back.origin == mask.origin

    def test_field_roundtrip(self, tmp_path, vol, rng):
        dense = rng.uniform(-5, 5, vol.dims + (3,)).astype(np.float32).astype(np.float64)
        fld = DeformationField(dense=dense, spacing=vol.spacing, origin=vol.origin)
        path = os.path.join(tmp_path, "f.fld")
        write_field(path, fld)
        back = read_field(path)
        assert np.array_equal(back.dense, dense)

    def test_missing_header_key(self, tmp_path):
        path = os.path.join(tmp_path, "bad.vol")
        with open(path, "w") as f:
            f.write("dims: 2 2 2\nspacing: 1 1 1\ndtype: f32\ndata: bad.raw\n")
        with pytest.raises(FormatError):
            read_volume(path)

    def test_wrong_payload_size(self, tmp_path):
        path = os.path.join(tmp_path, "bad.vol")
        with open(path, "w") as f:
            f.write("dims: 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\ndtype: f32\ndata: bad.raw\n")
        np.zeros(5, dtype="<f4").tofile(os.path.join(tmp_path, "bad.raw"))
        with pytest.raises(FormatError):
            read_volume(path)
