import numpy as np
import pytest

from refseg3d import autodiff as ad
from refseg3d.autodiff import Tape, Tensor
from refseg3d.errors import ContractError, DegenerateInputError, ShapeError
from refseg3d.gradcheck import finite_difference_check
from refseg3d.sparse import (
    SparseUNet,
    SparseVoxelTensor,
    build_kernel_map,
    devoxelize,
    load_point_cloud,
    save_point_cloud,
    sparse_conv,
    upsample_features,
    voxelize,
)


def dense_conv_oracle(vol: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Plain-loop 3D cross-correlation with zero padding.

    vol is (D, D, D, Cin), kernel is (3, 3, 3, Cin, Cout).  Deliberately
    written with explicit Python loops so it shares no code with the
    sparse implementation.
    """
    d = vol.shape[0]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    out = np.zeros((d, d, d, c_out))
    for x in range(d):
        for y in range(d):
            for z in range(d):
                for dx in (-1, 0, 1):
                    for dy in (-1, 0, 1):
                        for dz in (-1, 0, 1):
                            xx, yy, zz = x + dx, y + dy, z + dz
                            if not (0 <= xx < d and 0 <= yy < d and 0 <= zz < d):
                                continue
                            for ci in range(c_in):
                                for co in range(c_out):
                                    out[x, y, z, co] += (vol[xx, yy, zz, ci]
                                                         * kernel[dx + 1, dy + 1, dz + 1, ci, co])
    return out


def dense_block(rng, d: int, c: int) -> tuple[SparseVoxelTensor, np.ndarray]:
    """Fully-active d^3 cube with random features, plus the dense volume."""
    coords = np.array([(x, y, z) for x in range(d) for y in range(d) for z in range(d)],
                      dtype=np.int64)
    vol = rng.normal(size=(d, d, d, c))
    feats = vol[coords[:, 0], coords[:, 1], coords[:, 2]]
    return SparseVoxelTensor(1, coords, Tensor(feats)), vol


class TestVoxelize:
    def test_single_cell_mean(self):
        pts = np.array([[0.1, 0.1, 0.1, 1.0, 0.0, 0.0],
                        [0.9, 0.9, 0.9, 0.0, 1.0, 0.0]])
        sv, vmap = voxelize(pts, 1.0)
        assert sv.num_voxels == 1
        assert sv.stride == 1
        np.testing.assert_array_equal(sv.coords, [[0, 0, 0]])
        np.testing.assert_allclose(sv.features.data, pts.mean(axis=0, keepdims=True))
        np.testing.assert_array_equal(vmap.point_to_voxel, [0, 0])

    def test_floor_semantics_negative(self):
        pts = np.array([[-0.1, 0.0, 0.0, 0.5, 0.5, 0.5]])
        sv, _ = voxelize(pts, 1.0)
        np.testing.assert_array_equal(sv.coords, [[-1, 0, 0]])

    def test_recomputation_oracle(self):
        rng = np.random.default_rng(7)
        pts = np.column_stack([rng.uniform(-2, 2, size=(1000, 3)),
                               rng.uniform(0, 1, size=(1000, 3))])
        sv, vmap = voxelize(pts, 0.05)
        expected = np.floor(pts[:, :3] / 0.05).astype(np.int64)
        np.testing.assert_array_equal(sv.coords[vmap.point_to_voxel], expected)
        # the two maps must be mutual inverses
        seen = np.zeros(1000, dtype=bool)
        for v, members in enumerate(vmap.voxel_to_points):
            assert len(members) > 0
            assert not seen[members].any()
            seen[members] = True
            np.testing.assert_array_equal(vmap.point_to_voxel[members], v)
        assert seen.all()
        for v in range(sv.num_voxels):
            member_mean = pts[vmap.voxel_to_points[v]].mean(axis=0)
            np.testing.assert_allclose(sv.features.data[v], member_mean, atol=1e-12)

    def test_permutation_invariance_bitexact(self):
        rng = np.random.default_rng(11)
        pts = np.column_stack([rng.uniform(-1, 1, size=(500, 3)),
                               rng.uniform(0, 1, size=(500, 3))])
        sv_a, _ = voxelize(pts, 0.3)
        sv_b, _ = voxelize(pts[rng.permutation(500)], 0.3)
        np.testing.assert_array_equal(sv_a.coords, sv_b.coords)
        assert np.array_equal(sv_a.features.data, sv_b.features.data)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ContractError, match="empty"):
            voxelize(np.zeros((0, 6)), 1.0)

    def test_nonfinite_rejected(self):
        pts = np.ones((3, 6))
        pts[1, 2] = np.nan
        with pytest.raises(ContractError, match="finite"):
            voxelize(pts, 1.0)

    def test_bad_voxel_size_rejected(self):
        with pytest.raises(ContractError, match="positive"):
            voxelize(np.ones((2, 6)), 0.0)

    def test_wrong_width_rejected(self):
        with pytest.raises(ShapeError):
            voxelize(np.ones((4, 5)), 1.0)


class TestSparseConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        coords = np.array([[0, 0, 0], [2, 0, 1], [5, 5, 5]])
        feats = rng.normal(size=(3, 4))
        kernel = np.zeros((3, 3, 3, 4, 4))
        kernel[1, 1, 1] = np.eye(4)
        out = sparse_conv(SparseVoxelTensor(1, coords, Tensor(feats)), Tensor(kernel))
        np.testing.assert_array_equal(out.coords, coords)
        np.testing.assert_allclose(out.features.data, feats, atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_dense_cube_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        sv, vol = dense_block(rng, 8, 2)
        kernel = rng.normal(size=(3, 3, 3, 2, 3))
        out = sparse_conv(sv, Tensor(kernel))
        expected = dense_conv_oracle(vol, kernel)
        got = expected.copy()
        got[out.coords[:, 0], out.coords[:, 1], out.coords[:, 2]] = out.features.data
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_submanifold_preserves_active_set(self):
        rng = np.random.default_rng(3)
        coords = np.unique(rng.integers(-4, 4, size=(30, 3)), axis=0)
        sv = SparseVoxelTensor(1, coords, Tensor(rng.normal(size=(coords.shape[0], 2))))
        out = sparse_conv(sv, Tensor(rng.normal(size=(3, 3, 3, 2, 2))))
        np.testing.assert_array_equal(out.coords, sv.coords)
        assert out.stride == sv.stride

    def test_strided_pools_coordinates(self):
        coords = np.array([[0, 0, 0], [1, 1, 1]])
        sv = SparseVoxelTensor(1, coords, Tensor(np.ones((2, 1))))
        out = sparse_conv(sv, Tensor(np.zeros((3, 3, 3, 1, 1))), mode="strided")
        np.testing.assert_array_equal(out.coords, [[0, 0, 0]])
        assert out.stride == 2

    def test_strided_floor_on_negative_coords(self):
        coords = np.array([[-1, 0, 0], [-2, 0, 0]])
        sv = SparseVoxelTensor(1, coords, Tensor(np.ones((2, 1))))
        out = sparse_conv(sv, Tensor(np.zeros((3, 3, 3, 1, 1))), mode="strided")
        np.testing.assert_array_equal(out.coords, [[-1, 0, 0]])

    def test_strided_sums_children(self):
        # kernel = all-ones center-only would miss offsets; use delta at each
        # offset so output(0,0,0) collects every child of the 2^3 block
        coords = np.array([(x, y, z) for x in range(2) for y in range(2) for z in range(2)])
        feats = np.arange(8, dtype=np.float64).reshape(8, 1)
        kernel = np.ones((3, 3, 3, 1, 1))
        sv = SparseVoxelTensor(1, coords, Tensor(feats))
        out = sparse_conv(sv, Tensor(kernel), mode="strided")
        # children of output cell (0,0,0) live at 2*(0,0,0)+d, d in {-1,0,1}^3,
        # so only coords in {-1,0,1}^3 contribute: those are the 8 cells of
        # the block that fall inside the offset range
        contributing = [i for i, c in enumerate(coords) if np.all(np.abs(c) <= 1)]
        np.testing.assert_allclose(out.features.data,
                                   [[feats[contributing].sum()]], atol=1e-12)

    def test_channel_mismatch_rejected(self):
        sv = SparseVoxelTensor(1, np.zeros((1, 3), dtype=np.int64), Tensor(np.ones((1, 4))))
        with pytest.raises(ShapeError, match="4 channels"):
            sparse_conv(sv, Tensor(np.zeros((3, 3, 3, 2, 2))))

    def test_bad_kernel_shape_rejected(self):
        sv = SparseVoxelTensor(1, np.zeros((1, 3), dtype=np.int64), Tensor(np.ones((1, 2))))
        with pytest.raises(ShapeError, match="kernel"):
            sparse_conv(sv, Tensor(np.zeros((2, 2, 2, 2, 2))))

    def test_empty_input_rejected(self):
        sv = SparseVoxelTensor(1, np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, 2))))
        with pytest.raises(DegenerateInputError):
            sparse_conv(sv, Tensor(np.zeros((3, 3, 3, 2, 2))))

    def test_kernel_map_reuse_matches_fresh(self):
        rng = np.random.default_rng(9)
        coords = np.unique(rng.integers(0, 5, size=(40, 3)), axis=0)
        sv = SparseVoxelTensor(1, coords, Tensor(rng.normal(size=(coords.shape[0], 3))))
        kernel = Tensor(rng.normal(size=(3, 3, 3, 3, 2)))
        kmap = build_kernel_map(sv, "submanifold")
        fresh = sparse_conv(sv, kernel)
        reused = sparse_conv(sv, kernel, kmap=kmap)
        assert np.array_equal(fresh.features.data, reused.features.data)

    def test_kernel_gradient_finite_difference(self):
        rng = np.random.default_rng(21)
        coords = np.unique(rng.integers(0, 4, size=(20, 3)), axis=0)
        feats = Tensor(rng.normal(size=(coords.shape[0], 2)), requires_grad=True)
        kernel = Tensor(rng.normal(size=(3, 3, 3, 2, 3)) * 0.3, requires_grad=True)

        def fn():
            sv = SparseVoxelTensor(1, coords, feats)
            out = sparse_conv(sv, kernel)
            return ad.sum_(ad.mul(out.features, out.features))

        err = finite_difference_check(fn, [feats, kernel], sample=60, rng=rng)
        assert err < 1e-4


class TestUpsampleDevoxelize:
    def test_parent_copy(self):
        coarse = SparseVoxelTensor(2, np.array([[0, 0, 0], [1, 0, 0]]),
                                   Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])))
        fine_coords = np.array([[0, 0, 1], [1, 1, 0], [3, 0, 0], [2, 1, 1]])
        up = upsample_features(coarse, fine_coords)
        np.testing.assert_allclose(up.data, [[1, 2], [1, 2], [3, 4], [3, 4]])

    def test_missing_parent_rejected(self):
        coarse = SparseVoxelTensor(2, np.array([[0, 0, 0]]), Tensor(np.ones((1, 2))))
        with pytest.raises(ContractError, match="parent"):
            upsample_features(coarse, np.array([[5, 5, 5]]))

    def test_devoxelize_broadcast(self):
        pts = np.array([[0.1, 0.1, 0.1, 0.0, 0.0, 0.0],
                        [0.2, 0.2, 0.2, 1.0, 1.0, 1.0],
                        [0.3, 0.3, 0.3, 0.5, 0.5, 0.5]])
        sv, vmap = voxelize(pts, 1.0)
        out = devoxelize(sv.features, vmap)
        assert out.shape == (3, 6)
        np.testing.assert_allclose(out.data, np.tile(sv.features.data, (3, 1)))

    def test_devoxelize_identity_when_one_point_per_voxel(self):
        pts = np.column_stack([np.arange(5, dtype=np.float64)[:, None] * np.ones(3),
                               np.full((5, 3), 0.5)])
        sv, vmap = voxelize(pts, 1.0)
        out = devoxelize(sv.features, vmap)
        np.testing.assert_allclose(out.data[np.argsort(vmap.point_to_voxel)],
                                   sv.features.data)

    def test_devoxelize_gradient_is_point_count(self):
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(0, 2, size=(50, 3)),
                               rng.uniform(0, 1, size=(50, 3))])
        sv, vmap = voxelize(pts, 0.7)
        feats = Tensor(sv.features.data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(devoxelize(feats, vmap))
            tape.backward(loss)
        counts = np.array([len(v) for v in vmap.voxel_to_points], dtype=np.float64)
        np.testing.assert_allclose(feats.grad, np.tile(counts[:, None], (1, 6)))

    def test_devoxelize_row_mismatch_rejected(self):
        pts = np.ones((4, 6)) * 0.5
        _, vmap = voxelize(pts, 1.0)
        with pytest.raises(ShapeError):
            devoxelize(Tensor(np.ones((3, 2))), vmap)


class TestSparseUNet:
    def make_unet(self, seed=0, **kw):
        return SparseUNet(np.random.default_rng(seed), **kw)

    def test_shape_propagation(self):
        rng = np.random.default_rng(1)
        sv, _ = dense_block(rng, 8, 6)
        unet = self.make_unet()
        levels, out = unet.forward(sv)
        assert [lv.features.shape[1] for lv in levels] == [16, 32, 48, 64, 80]
        assert [lv.stride for lv in levels] == [1, 2, 4, 8, 16]
        assert out.features.shape == (sv.num_voxels, 64)
        assert out.stride == 1

    def test_output_active_set_round_trip(self):
        rng = np.random.default_rng(2)
        sv, _ = dense_block(rng, 8, 6)
        _, out = self.make_unet().forward(sv)
        np.testing.assert_array_equal(out.coords, sv.coords)

    def test_fuse_zero_is_bitexact_identity(self):
        rng = np.random.default_rng(3)
        sv, _ = dense_block(rng, 6, 6)
        unet = self.make_unet(seed=4)
        _, plain = unet.forward(sv)
        _, fused = unet.forward(sv, fuse=lambda i, f: ad.add(f, Tensor(np.zeros(f.shape))))
        assert np.array_equal(plain.features.data, fused.features.data)

    def test_fuse_receives_every_stage(self):
        rng = np.random.default_rng(5)
        sv, _ = dense_block(rng, 8, 6)
        seen = []
        self.make_unet().forward(sv, fuse=lambda i, f: (seen.append((i, f.shape)), f)[1])
        assert [s[0] for s in seen] == [0, 1, 2, 3, 4]
        assert [s[1][1] for s in seen] == [16, 32, 48, 64, 80]

    def test_fuse_shape_change_rejected(self):
        rng = np.random.default_rng(6)
        sv, _ = dense_block(rng, 6, 6)
        with pytest.raises(ShapeError, match="stage 1"):
            self.make_unet().forward(sv, fuse=lambda i, f: ad.concat([f, f], axis=1))

    def test_empty_input_names_stage(self):
        sv = SparseVoxelTensor(1, np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, 6))))
        with pytest.raises(DegenerateInputError, match="stage 1"):
            self.make_unet().forward(sv)

    def test_deterministic_across_instances(self):
        rng = np.random.default_rng(7)
        pts = np.column_stack([rng.uniform(0, 1.5, size=(200, 3)),
                               rng.uniform(0, 1, size=(200, 3))])
        sv, _ = voxelize(pts, 0.12)
        _, a = self.make_unet(seed=8).forward(sv)
        _, b = self.make_unet(seed=8).forward(sv)
        assert np.array_equal(a.features.data, b.features.data)

    def test_gradient_reaches_all_parameters(self):
        rng = np.random.default_rng(9)
        pts = np.column_stack([rng.uniform(0, 1.0, size=(60, 3)),
                               rng.uniform(0, 1, size=(60, 3))])
        sv, _ = voxelize(pts, 0.2)
        unet = self.make_unet(seed=10)
        with Tape() as tape:
            _, out = unet.forward(sv)
            tape.backward(ad.sum_(out.features))
        for name, p in unet.params.items():
            assert p.grad is not None, name
            assert np.any(p.grad != 0.0), name

    def test_small_unet_finite_difference(self):
        rng = np.random.default_rng(11)
        pts = np.column_stack([rng.uniform(0, 0.9, size=(25, 3)),
                               rng.uniform(0, 1, size=(25, 3))])
        sv, _ = voxelize(pts, 0.3)
        unet = self.make_unet(seed=12, channels=(2, 3, 3, 2, 2), out_channels=2)

        def fn():
            _, out = unet.forward(sv)
            return ad.sum_(ad.mul(out.features, out.features))

        err = finite_difference_check(fn, list(unet.params.values()),
                                      sample=40, rng=rng)
        assert err < 1e-4

    def test_bad_channel_count_rejected(self):
        with pytest.raises(ContractError, match="5"):
            self.make_unet(channels=(8, 16))


class TestPointCloudFiles:
    def test_text_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        pts = np.column_stack([rng.normal(size=(40, 3)), rng.uniform(0, 1, (40, 3))])
        path = tmp_path / "cloud.txt"
        save_point_cloud(path, pts)
        np.testing.assert_array_equal(load_point_cloud(path), pts)

    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        pts = np.column_stack([rng.normal(size=(64, 3)), rng.uniform(0, 1, (64, 3))])
        path = tmp_path / "cloud.bin"
        save_point_cloud(path, pts, binary=True)
        np.testing.assert_array_equal(load_point_cloud(path), pts)

    def test_binary_header_names_layout(self, tmp_path):
        path = tmp_path / "cloud.bin"
        save_point_cloud(path, np.zeros((2, 6)), binary=True)
        assert path.read_bytes().startswith(b"2 6 f8le\n")

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("3 7\n")
        with pytest.raises(ContractError, match="header"):
            load_point_cloud(path)

    def test_wrong_shape_rejected(self, tmp_path):
        with pytest.raises(ShapeError):
            save_point_cloud(tmp_path / "x.txt", np.zeros((3, 5)))
