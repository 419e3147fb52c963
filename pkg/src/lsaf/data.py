"""Scene loading, PCA spectral reduction, patch extraction, splitting, and
synthetic scene generation.

Everything here is a pure function over numpy arrays; autodiff tensors only
appear once patches reach the model. Pixel order is row-major throughout, so
parallel implementations of any step must preserve that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import storage
from .errors import ConfigError, RegistrationError, ShapeError

DEFAULT_PATCH = 11
DEFAULT_PCA_DIMS = 30


# ----------------------------------------------------------------------
# scene container


@dataclass
class RasterPair:
    """One co-registered scene: spectral cube, elevation raster, label map.

    `hsi` is (bands, H, W) reflectance, `lidar` is (1, H, W) elevation in
    meters, `labels` is (H, W) with 0 marking unlabeled pixels and 1..K the
    classes.
    """

    hsi: np.ndarray
    lidar: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.hsi.ndim != 3:
            raise ShapeError(f"hsi must be (bands, H, W), got {self.hsi.shape}")
        if self.lidar.ndim != 3 or self.lidar.shape[0] != 1:
            raise ShapeError(f"lidar must be (1, H, W), got {self.lidar.shape}")
        if self.labels.ndim != 2:
            raise ShapeError(f"labels must be (H, W), got {self.labels.shape}")
        grid = self.hsi.shape[1:]
        if self.lidar.shape[1:] != grid or self.labels.shape != grid:
            raise RegistrationError(
                "rasters disagree on the pixel grid: "
                f"hsi {self.hsi.shape[1:]}, lidar {self.lidar.shape[1:]}, "
                f"labels {self.labels.shape}"
            )
        if self.labels.min() < 0:
            raise ShapeError("labels must be non-negative (0 = unlabeled)")

    @property
    def bands(self) -> int:
        return self.hsi.shape[0]

    @property
    def height(self) -> int:
        return self.hsi.shape[1]

    @property
    def width(self) -> int:
        return self.hsi.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max())


def load_raster(hsi_path, lidar_path, labels_path) -> RasterPair:
    """Load the three scene files and validate their co-registration."""
    hsi = storage.read_raster(hsi_path)
    lidar = storage.read_raster(lidar_path)
    labels = storage.read_labels(labels_path).astype(np.int64)
    return RasterPair(hsi=hsi, lidar=lidar, labels=labels)


def save_raster(pair: RasterPair, hsi_path, lidar_path, labels_path) -> None:
    storage.write_raster(hsi_path, pair.hsi)
    storage.write_raster(lidar_path, pair.lidar)
    storage.write_labels(labels_path, pair.labels)


# ----------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    """Orthogonal spectral projection fitted on scene pixels.

    `components` columns are orthonormal eigenvectors of the band covariance
    matrix, ordered by non-increasing `explained_variance`.
    """

    mean: np.ndarray  # (bands,)
    components: np.ndarray  # (bands, r)
    explained_variance: np.ndarray  # (r,)

    @property
    def bands(self) -> int:
        return self.components.shape[0]

    @property
    def dims(self) -> int:
        return self.components.shape[1]


def pca_fit(hsi: np.ndarray, r: int, labels: np.ndarray | None = None) -> PcaModel:
    """Fit PCA on scene pixels; restrict to labeled pixels when `labels` given.

    The sign of each component is fixed by making its largest-magnitude
    entry positive, so fits are deterministic across runs and platforms.
    """
    bands = hsi.shape[0]
    if not 1 <= r <= bands:
        raise ConfigError(f"pca dimensions must lie in 1..{bands}, got {r}")
    pixels = hsi.reshape(bands, -1).T.astype(np.float64)
    if labels is not None:
        mask = np.asarray(labels).reshape(-1) != 0
        if not mask.any():
            raise ConfigError("pca fit restricted to labeled pixels, but none are labeled")
        pixels = pixels[mask]
    if pixels.shape[0] < 2:
        raise ConfigError("pca fit needs at least 2 pixels")

    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / (pixels.shape[0] - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:r]
    components = eigenvectors[:, order]
    variance = np.maximum(eigenvalues[order], 0.0)

    anchor = np.abs(components).argmax(axis=0)
    signs = np.sign(components[anchor, np.arange(r)])
    signs[signs == 0] = 1.0
    components = components * signs

    return PcaModel(mean=mean, components=np.ascontiguousarray(components),
                    explained_variance=variance)


def pca_transform(model: PcaModel, hsi: np.ndarray) -> np.ndarray:
    """Project a (bands, H, W) cube to (r, H, W)."""
    if hsi.shape[0] != model.bands:
        raise ShapeError(
            f"pca model fitted on {model.bands} bands, input has {hsi.shape[0]}"
        )
    spatial = hsi.shape[1:]
    pixels = hsi.reshape(model.bands, -1).T.astype(np.float64)
    projected = (pixels - model.mean) @ model.components
    return projected.T.reshape((model.dims,) + spatial)


def pca_inverse(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    """Map a (r, H, W) projection back to band space."""
    if reduced.shape[0] != model.dims:
        raise ShapeError(
            f"pca model produces {model.dims} dims, input has {reduced.shape[0]}"
        )
    spatial = reduced.shape[1:]
    pixels = reduced.reshape(model.dims, -1).T.astype(np.float64)
    restored = pixels @ model.components.T + model.mean
    return restored.T.reshape((model.bands,) + spatial)


# ----------------------------------------------------------------------
# normalization and patches


def normalize(raster: np.ndarray) -> np.ndarray:
    """Min-max scale each band of a (bands, H, W) raster to [0, 1];
    constant bands map to zero."""
    flat = raster.reshape(raster.shape[0], -1).astype(np.float64)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    scaled = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.0)
    return scaled.reshape(raster.shape)


@dataclass
class PatchSet:
    """Centered patches for every labeled pixel, in row-major pixel order."""

    hsi: np.ndarray  # (n, r, s, s)
    lidar: np.ndarray  # (n, 1, s, s)
    labels: np.ndarray  # (n,) values in 1..K
    pixels: np.ndarray  # (n, 2) source (row, col) of each patch center

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.hsi.shape[0] != n or self.lidar.shape[0] != n or self.pixels.shape[0] != n:
            raise ShapeError("patch arrays disagree on sample count")
        if n and self.labels.min() < 1:
            raise ShapeError("patch labels must be in 1..K; unlabeled pixels are not samples")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def patch(self) -> int:
        return self.hsi.shape[-1]

    def take(self, idx: np.ndarray) -> "PatchSet":
        return PatchSet(self.hsi[idx], self.lidar[idx], self.labels[idx], self.pixels[idx])


def extract_patches(pair: RasterPair, s: int = DEFAULT_PATCH) -> PatchSet:
    """Cut one s×s patch per labeled pixel, mirror-padded at scene borders.

    HSI and LiDAR patches come from identical coordinates; sample order is
    row-major over the label map.
    """
    _check_patch_size(s, pair.height, pair.width)
    half = s // 2
    coords = np.argwhere(pair.labels != 0)
    hsi_pad = np.pad(pair.hsi, ((0, 0), (half, half), (half, half)), mode="reflect")
    lidar_pad = np.pad(pair.lidar, ((0, 0), (half, half), (half, half)), mode="reflect")

    n = coords.shape[0]
    hsi_patches = np.empty((n, pair.bands, s, s), dtype=pair.hsi.dtype)
    lidar_patches = np.empty((n, 1, s, s), dtype=pair.lidar.dtype)
    for i, (row, col) in enumerate(coords):
        hsi_patches[i] = hsi_pad[:, row : row + s, col : col + s]
        lidar_patches[i] = lidar_pad[:, row : row + s, col : col + s]
    labels = pair.labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    return PatchSet(hsi=hsi_patches, lidar=lidar_patches, labels=labels, pixels=coords)


def _check_patch_size(s: int, height: int, width: int) -> None:
    if s % 2 == 0 or s < 1:
        raise ConfigError(f"patch size must be odd and positive, got {s}")
    if s > 2 * min(height, width):
        raise ConfigError(
            f"patch size {s} exceeds twice the smaller scene side ({min(height, width)})"
        )


# ----------------------------------------------------------------------
# train/test split


def split_indices(labels: np.ndarray, fraction: float, seed: int):
    """Stratified index split: per class, a seeded shuffle then a
    `fraction` cut (at least one sample lands on each side)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise ConfigError(
                f"class {int(cls)} has {idx.size} sample(s); stratified split needs >= 2"
            )
        shuffled = idx[rng.permutation(idx.size)]
        n_train = int(round(fraction * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        train_parts.append(shuffled[:n_train])
        test_parts.append(shuffled[n_train:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def split(patches: PatchSet, fraction: float, seed: int):
    """Split a PatchSet into stratified (train, test) subsets."""
    train_idx, test_idx = split_indices(patches.labels, fraction, seed)
    return patches.take(train_idx), patches.take(test_idx)


# ----------------------------------------------------------------------
# synthetic scenes


def synth_generate(
    num_classes: int,
    height: int,
    width: int,
    bands: int,
    seed: int,
    noise: float = 0.02,
) -> RasterPair:
    """Generate a Voronoi-region scene where fusion demonstrably matters.

    Each class owns a few Voronoi cells, a Gaussian-bump spectral signature,
    and a mean elevation. Two class pairs are deliberately degenerate:
    classes 1 and 2 share their elevation (HSI separates them), and classes
    3 and 4 share their spectral signature (LiDAR separates them, needs
    K >= 4). Every pixel is labeled.
    """
    if num_classes < 2:
        raise ConfigError(f"synthetic scenes need at least 2 classes, got {num_classes}")
    if bands < 2 or height < 4 or width < 4:
        raise ConfigError(f"scene too small: bands={bands}, H={height}, W={width}")
    rng = np.random.default_rng(seed)

    # Jittered-grid Voronoi sites, classes dealt round-robin after a shuffle
    # so every class holds the same number of cells.
    sites_per_class = 3
    n_sites = num_classes * sites_per_class
    grid_cols = int(np.ceil(np.sqrt(n_sites * width / height)))
    grid_rows = int(np.ceil(n_sites / grid_cols))
    cell_h, cell_w = height / grid_rows, width / grid_cols
    cells = [(i, j) for i in range(grid_rows) for j in range(grid_cols)][:n_sites]
    site_rc = np.array(
        [
            (
                (i + 0.5) * cell_h + rng.uniform(-0.3, 0.3) * cell_h,
                (j + 0.5) * cell_w + rng.uniform(-0.3, 0.3) * cell_w,
            )
            for i, j in cells
        ]
    )
    site_class = np.tile(np.arange(num_classes), sites_per_class)[:n_sites]
    site_class = site_class[rng.permutation(n_sites)]

    rows, cols = np.mgrid[0:height, 0:width]
    d2 = (rows[..., None] - site_rc[:, 0]) ** 2 + (cols[..., None] - site_rc[:, 1]) ** 2
    labels = site_class[d2.argmin(axis=-1)] + 1  # classes are 1..K

    # Spectral signatures: one Gaussian bump per class, distinct centers.
    centers = bands * (np.arange(num_classes) + 1.0) / (num_classes + 1.0)
    widths = np.maximum(bands / (num_classes + 2.0), 1.5)
    amps = 0.5 + 0.5 * rng.random(num_classes)
    base = 0.1 + 0.05 * rng.random(num_classes)
    band_axis = np.arange(bands)
    signatures = base[:, None] + amps[:, None] * np.exp(
        -((band_axis[None, :] - centers[:, None]) ** 2) / (2.0 * widths ** 2)
    )

    # Elevations: well separated class means.
    elevations = 2.0 + 1.5 * np.arange(num_classes) + rng.uniform(-0.2, 0.2, num_classes)

    # Degenerate pairs: 1&2 share elevation, 3&4 share spectra.
    elevations[1] = elevations[0]
    if num_classes >= 4:
        signatures[3] = signatures[2]

    cls_idx = labels - 1
    hsi = signatures[cls_idx].transpose(2, 0, 1) + rng.normal(0.0, noise, (bands, height, width))
    lidar = elevations[cls_idx][None] + rng.normal(0.0, 0.05, (1, height, width))

    return RasterPair(
        hsi=hsi.astype(np.float32),
        lidar=lidar.astype(np.float32),
        labels=labels.astype(np.int64),
    )
