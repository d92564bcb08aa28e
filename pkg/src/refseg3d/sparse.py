"""Voxel hash grid, sparse 3D convolution, and the U-shaped feature network.

Point clouds are plain (N, 6) float arrays of x, y, z (meters) and r, g, b
(in [0, 1]).  Voxelization floors coordinates onto an integer grid anchored
at the world origin; active cells are kept in lexicographic coordinate
order so every downstream pass is deterministic.

Convolutions use a fixed 3x3x3 kernel.  ``submanifold`` mode keeps the
active set unchanged; ``strided`` mode pools coordinates to floor(c/2) and
doubles the stride.  Kernel offset d along each axis maps to kernel index
d+1, i.e. ``out[c] += kernel[dx+1, dy+1, dz+1] . in[c + d]`` (zero padding
implied by missing neighbors), matching an ordinary dense cross-correlation
restricted to active cells.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, ShapeError

OFFSETS = [np.array(d, dtype=np.int64)
           for d in itertools.product((-1, 0, 1), repeat=3)]


@dataclass
class VoxelPointMap:
    """Mutually consistent point->voxel and voxel->points index maps."""

    point_to_voxel: np.ndarray          # (N,) int64
    voxel_to_points: list[np.ndarray]   # per-voxel ascending point indices


class SparseVoxelTensor:
    """Active voxel coordinates with one feature row per cell."""

    def __init__(self, stride: int, coords: np.ndarray, features: Tensor):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeError(f"coords must be (V, 3), got {coords.shape}")
        if features.shape[0] != coords.shape[0]:
            raise ShapeError(f"{coords.shape[0]} coords vs "
                             f"{features.shape[0]} feature rows")
        self.stride = int(stride)
        self.coords = coords
        self.features = features
        self.coord_index: dict[tuple[int, int, int], int] = {
            tuple(c): i for i, c in enumerate(coords.tolist())
        }

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def replace_features(self, features: Tensor) -> "SparseVoxelTensor":
        out = SparseVoxelTensor.__new__(SparseVoxelTensor)
        out.stride = self.stride
        out.coords = self.coords
        out.coord_index = self.coord_index
        if features.shape[0] != self.coords.shape[0]:
            raise ShapeError(f"{self.coords.shape[0]} coords vs "
                             f"{features.shape[0]} feature rows")
        out.features = features
        return out


def voxelize(points: np.ndarray, voxel_size: float) -> tuple[SparseVoxelTensor, VoxelPointMap]:
    """Bin points onto the integer grid; voxel feature = mean of member rows.

    Accumulation runs over rows pre-sorted by (voxel, full attribute
    tuple), so the result is bit-identical under any permutation of the
    input points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 6:
        raise ShapeError(f"point cloud must be (N, 6), got {points.shape}")
    if points.shape[0] == 0:
        raise ContractError("empty point cloud")
    if not np.all(np.isfinite(points)):
        raise ContractError("point cloud contains non-finite values")
    if not voxel_size > 0:
        raise ContractError(f"voxel_size must be positive, got {voxel_size}")

    cells = np.floor(points[:, :3] / voxel_size).astype(np.int64)
    coords, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=coords.shape[0])

    order = np.lexsort((points[:, 5], points[:, 4], points[:, 3],
                        points[:, 2], points[:, 1], points[:, 0], inverse))
    starts = np.zeros(coords.shape[0], dtype=np.int64)
    starts[1:] = np.cumsum(counts)[:-1]
    sums = np.add.reduceat(points[order], starts, axis=0)
    feats = Tensor(sums / counts[:, None])

    by_voxel = np.argsort(inverse, kind="stable")
    voxel_to_points = np.split(by_voxel, np.cumsum(counts)[:-1])
    vmap = VoxelPointMap(point_to_voxel=inverse,
                         voxel_to_points=[np.sort(v) for v in voxel_to_points])
    return SparseVoxelTensor(1, coords, feats), vmap


# ---------------------------------------------------------------------------
# kernel maps


@dataclass
class KernelMap:
    """Gather/scatter index pairs per kernel offset for one conv geometry."""

    pairs: list[tuple[np.ndarray, np.ndarray]]  # per offset: (in_rows, out_rows)
    out_coords: np.ndarray
    out_stride: int


def _lookup(index: dict, coords: np.ndarray) -> np.ndarray:
    get = index.get
    return np.fromiter((get(t, -1) for t in map(tuple, coords.tolist())),
                       dtype=np.int64, count=coords.shape[0])


def build_kernel_map(x: SparseVoxelTensor, mode: str) -> KernelMap:
    if mode == "submanifold":
        out_coords, out_stride = x.coords, x.stride
        base = x.coords
        scale_out = 1
    elif mode == "strided":
        out_coords = np.unique(x.coords // 2, axis=0)
        out_stride = x.stride * 2
        base = out_coords
        scale_out = 2
    else:
        raise ContractError(f"unknown conv mode {mode!r}")

    pairs = []
    out_rows_all = np.arange(out_coords.shape[0], dtype=np.int64)
    for off in OFFSETS:
        neighbor = base * scale_out + off if mode == "strided" else base + off
        rows = _lookup(x.coord_index, neighbor)
        hit = rows >= 0
        pairs.append((rows[hit], out_rows_all[hit]))
    return KernelMap(pairs=pairs, out_coords=out_coords, out_stride=out_stride)


def sparse_conv(x: SparseVoxelTensor, kernel: Tensor, mode: str = "submanifold",
                kmap: KernelMap | None = None) -> SparseVoxelTensor:
    """3x3x3 sparse convolution; kernel shape (3, 3, 3, Cin, Cout)."""
    if x.num_voxels == 0:
        raise DegenerateInputError("sparse_conv on an empty voxel set")
    if len(kernel.shape) != 5 or kernel.shape[:3] != (3, 3, 3):
        raise ShapeError(f"kernel must be (3, 3, 3, Cin, Cout), got {kernel.shape}")
    c_in = kernel.shape[3]
    if x.features.shape[1] != c_in:
        raise ShapeError(f"input has {x.features.shape[1]} channels, "
                         f"kernel expects {c_in}")
    if kmap is None:
        kmap = build_kernel_map(x, mode)

    c_out = kernel.shape[4]
    n_out = kmap.out_coords.shape[0]
    flat = ad.reshape(kernel, (27, c_in, c_out))
    out = None
    for i, (in_rows, out_rows) in enumerate(kmap.pairs):
        if in_rows.size == 0:
            continue
        contrib = ad.scatter_rows(
            ad.matmul(ad.gather_rows(x.features, in_rows), ad.take(flat, i)),
            out_rows, n_out)
        out = contrib if out is None else ad.add(out, contrib)
    if out is None:
        out = Tensor(np.zeros((n_out, c_out)))
    return SparseVoxelTensor(kmap.out_stride, kmap.out_coords, out)


def upsample_features(coarse: SparseVoxelTensor, fine_coords: np.ndarray) -> Tensor:
    """Copy each fine cell's parent (floor(c/2)) feature row down a level."""
    parents = _lookup(coarse.coord_index, fine_coords // 2)
    if np.any(parents < 0):
        raise ContractError("fine cell without an active parent")
    return ad.gather_rows(coarse.features, parents)


def devoxelize(voxel_feats: Tensor, vmap: VoxelPointMap) -> Tensor:
    """Broadcast voxel features back to points; backward scatter-adds."""
    if voxel_feats.shape[0] != len(vmap.voxel_to_points):
        raise ShapeError(f"{voxel_feats.shape[0]} voxel rows vs map of "
                         f"{len(vmap.voxel_to_points)}")
    return ad.gather_rows(voxel_feats, vmap.point_to_voxel)


# ---------------------------------------------------------------------------
# the U-shaped network


def _conv_kernel(rng: np.random.Generator, c_in: int, c_out: int) -> Tensor:
    std = 1.0 / np.sqrt(27.0 * c_in)
    return Tensor(rng.normal(0.0, std, (3, 3, 3, c_in, c_out)), requires_grad=True)


class SparseUNet:
    """Five-stage encoder with per-stage fusion hook, symmetric decoder.

    Each encoder stage runs two submanifold convs (ReLU after each), then
    the fusion callback, then a strided downsample into the next stage
    (except after the last).  The decoder walks back up: parent-copy
    upsampling, concat with the fused skip, one submanifold conv per level
    (ReLU except at the base level, whose conv emits the final features).
    """

    def __init__(self, rng: np.random.Generator, in_channels: int = 6,
                 channels: tuple[int, ...] = (16, 32, 48, 64, 80),
                 out_channels: int = 64):
        if len(channels) != 5:
            raise ContractError(f"expected 5 stage widths, got {len(channels)}")
        self.channels = tuple(channels)
        self.out_channels = out_channels
        self.params: dict[str, Tensor] = {}
        prev = in_channels
        for i, ch in enumerate(channels):
            self.params[f"enc{i}.conv1"] = _conv_kernel(rng, prev, ch)
            self.params[f"enc{i}.conv2"] = _conv_kernel(rng, ch, ch)
            if i < 4:
                self.params[f"down{i}"] = _conv_kernel(rng, ch, channels[i + 1])
            prev = channels[i + 1] if i < 4 else ch
        for i in range(3, -1, -1):
            c_in = channels[i + 1] + channels[i]
            c_out = channels[i] if i > 0 else out_channels
            self.params[f"dec{i}"] = _conv_kernel(rng, c_in, c_out)

    def forward(self, x: SparseVoxelTensor,
                fuse: Callable[[int, Tensor], Tensor] | None = None
                ) -> tuple[list[SparseVoxelTensor], SparseVoxelTensor]:
        """Return the five fused stage features and the base-stride output."""
        levels: list[SparseVoxelTensor] = []
        kmaps: list[KernelMap] = []
        cur = x
        for i in range(5):
            if cur.num_voxels == 0:
                raise DegenerateInputError(f"encoder stage {i + 1} has no active voxels")
            kmap = build_kernel_map(cur, "submanifold")
            kmaps.append(kmap)
            f = sparse_conv(cur, self.params[f"enc{i}.conv1"], kmap=kmap)
            f = f.replace_features(ad.relu(f.features))
            f = sparse_conv(f, self.params[f"enc{i}.conv2"], kmap=kmap)
            f = f.replace_features(ad.relu(f.features))
            if fuse is not None:
                fused = fuse(i, f.features)
                if fused.shape != f.features.shape:
                    raise ShapeError(f"fusion callback changed stage {i + 1} shape "
                                     f"{f.features.shape} -> {fused.shape}")
                f = f.replace_features(fused)
            levels.append(f)
            if i < 4:
                down = sparse_conv(f, self.params[f"down{i}"], mode="strided")
                cur = down.replace_features(ad.relu(down.features))

        top = levels[4]
        for i in range(3, -1, -1):
            fine = levels[i]
            up = upsample_features(top, fine.coords)
            merged = ad.concat([up, fine.features], axis=1)
            out = sparse_conv(fine.replace_features(merged),
                              self.params[f"dec{i}"], kmap=kmaps[i])
            feats = ad.relu(out.features) if i > 0 else out.features
            top = out.replace_features(feats)
        return levels, top


# ---------------------------------------------------------------------------
# point cloud files

_BINARY_TAG = "f8le"


def save_point_cloud(path, points: np.ndarray, binary: bool = False) -> None:
    """Write an (N, 6) table; binary payload is little-endian float64."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 6:
        raise ShapeError(f"point cloud must be (N, 6), got {points.shape}")
    if binary:
        with open(path, "wb") as fh:
            fh.write(f"{points.shape[0]} 6 {_BINARY_TAG}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(points, dtype="<f8").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"{points.shape[0]} 6\n")
            for row in points:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_point_cloud(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) < 2 or header[1] != "6":
            raise ContractError(f"bad point cloud header in {path}")
        n = int(header[0])
        if len(header) > 2 and header[2] == _BINARY_TAG:
            data = np.frombuffer(fh.read(n * 6 * 8), dtype="<f8")
            points = data.reshape(n, 6).astype(np.float64)
        else:
            points = np.loadtxt(fh, dtype=np.float64).reshape(n, 6)
    return points
