"""Synthetic per-pixel segmentation data with controllable ambiguity and label noise.

Each image is a Voronoi partition of the pixel grid into classes; per-pixel
features are drawn from class Gaussians whose means sit on a circle. Pixels
near a class boundary draw their features from a mixture over the classes in
their neighbourhood, which makes them genuinely ambiguous. Ground truth for
the unlabeled split plus the boundary masks live behind an evaluation-only
accessor so the training path cannot touch them.

Generation is pure and fully determined by the spec's seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

_DATASET_MAGIC = "PIXELDATASET 1"
_EVAL_MAGIC = "PIXELDATASET-EVAL 1"
EVAL_SUFFIX = ".eval"


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    d_in: int = 8
    height: int = 32
    width: int = 32
    mean_radius: float = 2.0
    spread: float = 1.0
    boundary_blend: float = 1.5
    n_labeled: int = 4
    n_unlabeled: int = 60
    p_flip: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.d_in < 2:
            raise ValueError("d_in must be at least 2 (class means span two dimensions)")
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be positive")
        if self.num_classes > self.height * self.width:
            raise ValueError(f"cannot place {self.num_classes} classes on a {self.height}x{self.width} grid")
        if self.spread < 0.0 or self.mean_radius < 0.0 or self.boundary_blend < 0.0:
            raise ValueError("mean_radius, spread, and boundary_blend must be nonnegative")
        if self.n_labeled < 1 or self.n_unlabeled < 0:
            raise ValueError("need at least one labeled image and a nonnegative unlabeled count")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class LabeledImage:
    features: np.ndarray  # (H, W, d_in) float64
    labels: np.ndarray  # (H, W) uint16


@dataclass(frozen=True, eq=False)
class UnlabeledImage:
    features: np.ndarray  # (H, W, d_in) float64


@dataclass(eq=False)
class EvalInfo:
    """Ground truth withheld from training: unlabeled labels and boundary masks."""

    unlabeled_labels: list[np.ndarray]
    labeled_boundary: list[np.ndarray]
    unlabeled_boundary: list[np.ndarray]


class PixelDataset:
    """Labeled image/label pairs plus unlabeled features.

    The `evaluation` property is the only route to the unlabeled split's true
    labels and to the boundary masks; training code must not read it.
    """

    def __init__(self, labeled, unlabeled, spec: DatasetSpec, eval_info: EvalInfo | None = None):
        self.labeled: list[LabeledImage] = list(labeled)
        self.unlabeled: list[UnlabeledImage] = list(unlabeled)
        self.spec = spec
        self._eval = eval_info

    @property
    def has_evaluation(self) -> bool:
        return self._eval is not None

    @property
    def evaluation(self) -> EvalInfo:
        if self._eval is None:
            raise RuntimeError("no evaluation labels available for this dataset")
        return self._eval


def class_means(spec: DatasetSpec) -> np.ndarray:
    """Class feature means on a circle of radius mean_radius in the first two dims."""
    means = np.zeros((spec.num_classes, spec.d_in))
    angles = 2.0 * math.pi * np.arange(spec.num_classes) / spec.num_classes
    means[:, 0] = spec.mean_radius * np.cos(angles)
    means[:, 1] = spec.mean_radius * np.sin(angles)
    return means


def _disk_offsets(radius: float) -> list[tuple[int, int]]:
    r = int(math.floor(radius))
    out = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if (dy, dx) != (0, 0) and dy * dy + dx * dx <= radius * radius:
                out.append((dy, dx))
    return out


def _boundary_mask(labels: np.ndarray, radius: float) -> np.ndarray:
    """Pixels having a differently labeled pixel within the given euclidean radius."""
    mask = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    for dy, dx in _disk_offsets(radius):
        ys = slice(max(0, dy), min(h, h + dy))
        xs = slice(max(0, dx), min(w, w + dx))
        ys_src = slice(max(0, -dy), min(h, h - dy))
        xs_src = slice(max(0, -dx), min(w, w - dx))
        mask[ys_src, xs_src] |= labels[ys_src, xs_src] != labels[ys, xs]
    return mask


def _generate_image(spec: DatasetSpec, means: np.ndarray, rng: np.random.Generator):
    h, w, k = spec.height, spec.width, spec.num_classes
    sites = rng.choice(h * w, size=k, replace=False)
    sy, sx = np.divmod(sites, w)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist2 = (yy[None] - sy[:, None, None]) ** 2 + (xx[None] - sx[:, None, None]) ** 2
    labels = np.argmin(dist2, axis=0).astype(np.uint16)

    boundary = _boundary_mask(labels, spec.boundary_blend)
    sample_class = labels.astype(np.int64)
    offsets = _disk_offsets(spec.boundary_blend)
    for y, x in zip(*np.nonzero(boundary)):
        nearby = {int(labels[y, x])}
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                nearby.add(int(labels[ny, nx]))
        choices = sorted(nearby)
        sample_class[y, x] = choices[rng.integers(len(choices))]

    features = means[sample_class] + spec.spread * rng.standard_normal((h, w, spec.d_in))
    return features, labels, boundary


def generate(spec: DatasetSpec) -> PixelDataset:
    """Build the dataset described by the spec, deterministically from its seed."""
    means = class_means(spec)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_labeled + spec.n_unlabeled)
    labeled, unlabeled = [], []
    eval_info = EvalInfo([], [], [])
    for i, child in enumerate(children):
        features, labels, boundary = _generate_image(spec, means, np.random.default_rng(child))
        if i < spec.n_labeled:
            labeled.append(LabeledImage(features, labels))
            eval_info.labeled_boundary.append(boundary)
        else:
            unlabeled.append(UnlabeledImage(features))
            eval_info.unlabeled_labels.append(labels)
            eval_info.unlabeled_boundary.append(boundary)
    return PixelDataset(labeled, unlabeled, spec, eval_info)


def corrupt_labels(labels: np.ndarray, p_flip: float, num_classes: int, seed: int):
    """Independently flip each label to a uniformly random different class.

    Returns (corrupted, flip_mask); masked positions are exactly the changed ones.
    """
    if not 0.0 <= p_flip <= 1.0:
        raise ValueError("p_flip must lie in [0, 1]")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    mask = rng.random(labels.shape) < p_flip
    offsets = rng.integers(1, num_classes, size=labels.shape)
    corrupted = np.where(mask, (labels.astype(np.int64) + offsets) % num_classes, labels)
    return corrupted.astype(labels.dtype), mask


def augment(features: np.ndarray, strength: float, spread: float, seed: int) -> np.ndarray:
    """Add seeded Gaussian jitter with standard deviation strength * spread."""
    if strength < 0.0:
        raise ValueError("strength must be nonnegative")
    features = np.asarray(features, dtype=np.float64)
    if strength == 0.0:
        return features.copy()
    rng = np.random.default_rng(seed)
    return features + strength * spread * rng.standard_normal(features.shape)


def _spec_to_header(spec: DatasetSpec) -> str:
    lines = [_DATASET_MAGIC]
    for f in fields(DatasetSpec):
        lines.append(f"{f.name}={getattr(spec, f.name)!r}")
    lines.append("END_HEADER")
    return "\n".join(lines) + "\n"


def _spec_from_header(lines: list[str]) -> DatasetSpec:
    kwargs = {}
    types = {f.name: f.type for f in fields(DatasetSpec)}
    for line in lines:
        key, _, raw = line.partition("=")
        if key not in types:
            raise ValueError(f"unknown dataset header field {key!r}")
        kwargs[key] = float(raw) if types[key] == "float" else int(raw)
    return DatasetSpec(**kwargs)


def save_dataset(ds: PixelDataset, path) -> None:
    """Write the dataset file plus the separate evaluation-only label file.

    Layout after the text header: labeled features then labels per image, then
    unlabeled features, all little-endian (float64 features, uint16 labels).
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_spec_to_header(ds.spec).encode("ascii"))
        for img in ds.labeled:
            fh.write(np.ascontiguousarray(img.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(img.labels, dtype="<u2").tobytes())
        for img in ds.unlabeled:
            fh.write(np.ascontiguousarray(img.features, dtype="<f8").tobytes())
    if ds.has_evaluation:
        ev = ds.evaluation
        with open(path.with_name(path.name + EVAL_SUFFIX), "wb") as fh:
            fh.write((_EVAL_MAGIC + "\n").encode("ascii"))
            for labels in ev.unlabeled_labels:
                fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())
            for masks in (ev.labeled_boundary, ev.unlabeled_boundary):
                for m in masks:
                    fh.write(np.ascontiguousarray(m, dtype="u1").tobytes())


def load_dataset(path) -> PixelDataset:
    """Read a dataset file; evaluation labels are attached only if their file exists."""
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").rstrip("\n")
        if first != _DATASET_MAGIC:
            raise ValueError(f"not a dataset file: bad magic {first!r}")
        header_lines = []
        while True:
            line = fh.readline().decode("ascii").rstrip("\n")
            if line == "END_HEADER":
                break
            if not line:
                raise ValueError("dataset header truncated")
            header_lines.append(line)
        spec = _spec_from_header(header_lines)
        h, w, d = spec.height, spec.width, spec.d_in

        def read_array(dtype, shape):
            count = int(np.prod(shape))
            raw = fh.read(count * np.dtype(dtype).itemsize)
            if len(raw) != count * np.dtype(dtype).itemsize:
                raise ValueError("dataset payload truncated")
            return np.frombuffer(raw, dtype=dtype).reshape(shape)

        labeled = []
        for _ in range(spec.n_labeled):
            features = read_array("<f8", (h, w, d)).astype(np.float64)
            labels = read_array("<u2", (h, w)).astype(np.uint16)
            labeled.append(LabeledImage(features, labels))
        unlabeled = [
            UnlabeledImage(read_array("<f8", (h, w, d)).astype(np.float64))
            for _ in range(spec.n_unlabeled)
        ]

    eval_path = path.with_name(path.name + EVAL_SUFFIX)
    eval_info = None
    if eval_path.exists():
        with open(eval_path, "rb") as fh:
            first = fh.readline().decode("ascii").rstrip("\n")
            if first != _EVAL_MAGIC:
                raise ValueError(f"not an evaluation label file: bad magic {first!r}")

            def read_plane(dtype):
                count = h * w
                raw = fh.read(count * np.dtype(dtype).itemsize)
                if len(raw) != count * np.dtype(dtype).itemsize:
                    raise ValueError("evaluation file truncated")
                return np.frombuffer(raw, dtype=dtype).reshape((h, w))

            eval_info = EvalInfo(
                unlabeled_labels=[read_plane("<u2").astype(np.uint16) for _ in range(spec.n_unlabeled)],
                labeled_boundary=[read_plane("u1").astype(bool) for _ in range(spec.n_labeled)],
                unlabeled_boundary=[read_plane("u1").astype(bool) for _ in range(spec.n_unlabeled)],
            )
    return PixelDataset(labeled, unlabeled, spec, eval_info)
