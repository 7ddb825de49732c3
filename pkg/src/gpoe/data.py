"""Synthetic two-modality crossmodal task with controllable corruption.

Each sample is a small articulated chain of keypoints in the unit square.
Three aligned modalities are derived from it:

* ``grids`` — a flattened g x g occupancy rendering of the keypoints, the
  primary input modality (an "image" stand-in);
* ``points`` — the keypoint coordinates plus a small fixed jitter, the
  auxiliary modality (a "point cloud" stand-in);
* ``keypoints`` — the ground-truth coordinates, the prediction target.

Two noise injectors mimic sensor corruption: ``corrupt_pixels`` replaces a
fraction of grid cells with uniform random values, and
``add_gaussian_noise`` perturbs point coordinates. ``apply_noise`` marks a
fraction of samples and corrupts both of their input modalities, recording
per-sample flags so evaluation can stratify clean vs corrupted rows.

Datasets serialize to a binary ``GPD1`` container with a key=value sidecar
manifest.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import ContractError, FormatError
from .ioutils import atomic_write_bytes, write_manifest
from .validation import check_in_range, check_positive

DATASET_MAGIC = b"GPD1"

#: Jitter applied to the auxiliary point modality at generation time.
POINT_JITTER_SIGMA = 0.01


@dataclass(frozen=True)
class NoiseSpec:
    """How much corruption to inject, and into what fraction of samples.

    ``pixel_fraction`` is the share of grid cells replaced with random
    values; ``gaussian_sigma`` the standard deviation added to point
    coordinates; ``data_fraction`` the share of samples corrupted at all.
    """

    data_fraction: float = 0.0
    pixel_fraction: float = 0.0
    gaussian_sigma: float = 0.0

    def __post_init__(self):
        check_in_range(self.data_fraction, "data_fraction", 0.0, 1.0)
        check_in_range(self.pixel_fraction, "pixel_fraction", 0.0, 1.0)
        check_positive(self.gaussian_sigma, "gaussian_sigma", strict=False)

    @property
    def is_noop(self) -> bool:
        return self.data_fraction == 0.0 or (
            self.pixel_fraction == 0.0 and self.gaussian_sigma == 0.0
        )


@dataclass
class ToyDataset:
    """Columnar container of aligned toy scenes.

    ``keypoints`` and ``points`` are (n, 2k) flat coordinate arrays,
    ``grids`` is (n, g*g), ``corrupted`` is a boolean flag per sample
    recording noise provenance.
    """

    keypoints: np.ndarray
    grids: np.ndarray
    points: np.ndarray
    corrupted: np.ndarray
    n_keypoints: int
    grid_size: int

    def __post_init__(self):
        n = self.keypoints.shape[0]
        expected = {
            "keypoints": (n, 2 * self.n_keypoints),
            "grids": (n, self.grid_size * self.grid_size),
            "points": (n, 2 * self.n_keypoints),
            "corrupted": (n,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ContractError(
                    f"dataset field {name} has shape {arr.shape}, expected {shape}"
                )

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def keypoints_xy(self) -> np.ndarray:
        """Keypoints reshaped to (n, k, 2)."""
        return self.keypoints.reshape(len(self), self.n_keypoints, 2)


def render_grid(keypoints: np.ndarray, grid_size: int) -> np.ndarray:
    """Render keypoints into a flattened g x g occupancy grid.

    Each keypoint is splatted as a bilinear 2x2 footprint around its
    continuous cell coordinate (cell centers at (i + 0.5) / g); values are
    clamped to [0, 1]. A keypoint exactly on a cell center puts 1.0 in that
    cell, and whole-cell translations shift the rendering by whole cells.
    """
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if kp.shape[0] == 0:
        raise ContractError("render_grid requires at least one keypoint")
    if kp.min() < 0.0 or kp.max() > 1.0:
        raise ContractError(
            f"keypoints must lie in the unit square, range was "
            f"[{kp.min()}, {kp.max()}]"
        )
    g = int(grid_size)
    if g < 4:
        raise ContractError(f"grid size must be >= 4, got {g}")
    grid = np.zeros((g, g))
    # Continuous cell coordinates; the 2x2 footprint spans floor(u)..floor(u)+1.
    u = kp * g - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    for (bx, by), (fx, fy) in zip(base, frac):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            for dy, wy in ((0, 1.0 - fy), (1, fy)):
                ix, iy = bx + dx, by + dy
                if 0 <= ix < g and 0 <= iy < g:
                    grid[iy, ix] += wx * wy
    return np.minimum(grid, 1.0).ravel()


def generate_dataset(
    n: int, k: int = 5, g: int = 16, seed: int = 0
) -> ToyDataset:
    """Generate ``n`` articulated-chain scenes, reproducible from ``seed``.

    Keypoints are the joints of an anchored chain of k segments with
    smoothly varying headings, clipped to the unit square. The grid is the
    rendered keypoints, the point modality is the keypoints plus a small
    seeded jitter.
    """
    if n < 1:
        raise ContractError(f"sample count must be >= 1, got {n}")
    if k < 1:
        raise ContractError(f"keypoint count must be >= 1, got {k}")
    if g < 4:
        raise ContractError(f"grid size must be >= 4, got {g}")
    rng = np.random.default_rng(seed)

    anchors = rng.uniform(0.3, 0.7, size=(n, 2))
    headings = rng.uniform(0.0, 2.0 * math.pi, size=(n, 1))
    turns = rng.uniform(-0.9, 0.9, size=(n, k))
    lengths = rng.uniform(0.05, 0.13, size=(n, k))

    angles = headings + np.cumsum(turns, axis=1)
    steps = np.stack(
        [lengths * np.cos(angles), lengths * np.sin(angles)], axis=-1
    )  # (n, k, 2)
    joints = anchors[:, None, :] + np.cumsum(steps, axis=1)
    joints = np.clip(joints, 0.0, 1.0)

    keypoints = joints.reshape(n, 2 * k)
    grids = np.stack([render_grid(joints[i], g) for i in range(n)])
    points = keypoints + POINT_JITTER_SIGMA * rng.standard_normal(keypoints.shape)
    return ToyDataset(
        keypoints=keypoints,
        grids=grids,
        points=points,
        corrupted=np.zeros(n, dtype=bool),
        n_keypoints=k,
        grid_size=g,
    )


def corrupt_pixels(
    grid: np.ndarray, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Replace floor(fraction * len) grid cells with uniform [0, 1] values.

    Positions are drawn uniformly without replacement; untouched cells are
    bit-identical to the input.
    """
    check_in_range(fraction, "fraction", 0.0, 1.0)
    grid = np.asarray(grid, dtype=np.float64)
    out = grid.copy()
    count = int(math.floor(fraction * grid.size))
    if count == 0:
        return out
    positions = rng.choice(grid.size, size=count, replace=False)
    out.reshape(-1)[positions] = rng.uniform(0.0, 1.0, size=count)
    return out


def add_gaussian_noise(
    points: np.ndarray, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """Add i.i.d. Gaussian noise of scale ``sigma`` to every coordinate."""
    check_positive(sigma, "sigma", strict=False)
    points = np.asarray(points, dtype=np.float64)
    if sigma == 0.0:
        return points.copy()
    return points + sigma * rng.standard_normal(points.shape)


def _sample_rng(master: int, index: int) -> np.random.Generator:
    # Counter-based per-sample stream: order-independent reproducibility.
    return np.random.default_rng([master, index])


def corrupt_columns(
    values: dict[str, np.ndarray],
    kinds: dict[str, str],
    spec: NoiseSpec,
    rng: np.random.Generator,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Corrupt a seeded subset of rows across aligned columnar modalities.

    Exactly floor(data_fraction * n) rows are marked. Within each marked
    row, grid-kind columns get pixel corruption and point-kind columns get
    Gaussian noise, in dict order, drawn from a per-sample stream split off
    the master seed so per-sample work is order-independent. Returns the
    corrupted copies and the boolean row flags.
    """
    n = next(iter(values.values())).shape[0]
    count = int(math.floor(spec.data_fraction * n))
    marked = rng.choice(n, size=count, replace=False) if count else np.empty(0, int)
    master = int(rng.integers(0, 2**32))

    out = {name: arr.copy() for name, arr in values.items()}
    flags = np.zeros(n, dtype=bool)
    for i in marked:
        sample_rng = _sample_rng(master, int(i))
        for name, arr in out.items():
            if kinds[name] == "grid":
                arr[i] = corrupt_pixels(arr[i], spec.pixel_fraction, sample_rng)
            else:
                arr[i] = add_gaussian_noise(arr[i], spec.gaussian_sigma, sample_rng)
        flags[i] = True
    return out, flags


def apply_noise(
    dataset: ToyDataset, spec: NoiseSpec, rng: np.random.Generator
) -> ToyDataset:
    """Corrupt a seeded subset of samples per ``spec``; returns a new dataset.

    Marked samples get pixel corruption on their grid and Gaussian noise on
    their points; keypoints (the target) are never touched. Corruption
    flags accumulate into ``corrupted``.
    """
    out, flags = corrupt_columns(
        {"grid": dataset.grids, "points": dataset.points},
        {"grid": "grid", "points": "point"},
        spec,
        rng,
    )
    return replace(
        dataset,
        grids=out["grid"],
        points=out["points"],
        corrupted=dataset.corrupted | flags,
    )


# ---------------------------------------------------------------------------
# GPD1 serialization

_HEADER = struct.Struct("<4sIII")  # magic, n, k, g


def _record_dtype(k: int, g: int) -> np.dtype:
    return np.dtype(
        [
            ("keypoints", "<f8", (2 * k,)),
            ("grid", "<f8", (g * g,)),
            ("points", "<f8", (2 * k,)),
            ("flag", "u1"),
        ]
    )


def save_dataset(path, dataset: ToyDataset) -> None:
    """Write the ``GPD1`` binary container (atomic rename into place)."""
    n, k, g = len(dataset), dataset.n_keypoints, dataset.grid_size
    records = np.zeros(n, dtype=_record_dtype(k, g))
    records["keypoints"] = dataset.keypoints
    records["grid"] = dataset.grids
    records["points"] = dataset.points
    records["flag"] = dataset.corrupted.astype(np.uint8)
    atomic_write_bytes(path, _HEADER.pack(DATASET_MAGIC, n, k, g) + records.tobytes())


def load_dataset(path) -> ToyDataset:
    """Read a ``GPD1`` container, validating magic and exact length."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("file too short for a GPD1 header", offset=len(blob))
    magic, n, k, g = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise FormatError(
            f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0
        )
    dtype = _record_dtype(k, g)
    expected = _HEADER.size + n * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"truncated or oversized GPD1 file: have {len(blob)} bytes, "
            f"expected {expected}",
            offset=min(len(blob), expected),
        )
    records = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    return ToyDataset(
        keypoints=records["keypoints"].astype(np.float64),
        grids=records["grid"].astype(np.float64),
        points=records["points"].astype(np.float64),
        corrupted=records["flag"].astype(bool),
        n_keypoints=int(k),
        grid_size=int(g),
    )


def dataset_manifest(
    dataset: ToyDataset, seed: int, noise: NoiseSpec | None = None
) -> dict:
    entries = {
        "n": len(dataset),
        "k": dataset.n_keypoints,
        "g": dataset.grid_size,
        "seed": seed,
        "n_corrupted": int(dataset.corrupted.sum()),
    }
    spec = noise if noise is not None else NoiseSpec()
    entries["noise.data_fraction"] = repr(spec.data_fraction)
    entries["noise.pixel_fraction"] = repr(spec.pixel_fraction)
    entries["noise.gaussian_sigma"] = repr(spec.gaussian_sigma)
    return entries


def save_dataset_with_manifest(
    path, dataset: ToyDataset, seed: int, noise: NoiseSpec | None = None
) -> None:
    save_dataset(path, dataset)
    write_manifest(str(path) + ".manifest", dataset_manifest(dataset, seed, noise))
