"""Seeded synthetic multi-modal Gaussian-cluster datasets.

Class ``k`` of modality ``m`` is centred at ``separation_m * q_k`` where the
``q_k`` are orthonormal directions (QR of a seeded Gaussian ``d_m x K``
matrix), and samples are ``scale_m * (mu + sigma_m * N(0, I))``.  A large
separation and scale on one modality and a small separation on the other
produce the modality-preference setting.

File format (version ``crmt-ds-1``): line 1 is a JSON manifest, every further
line is ``label,m1_0,...,m2_0,...`` with floats written by ``repr``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import PortableRNG

FORMAT_VERSION = "crmt-ds-1"


class DatasetError(ValueError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class RowParseError(DatasetError):
    def __init__(self, row: int, msg: str):
        super().__init__(f"row {row}: {msg}")
        self.row = row


class ValidationError(DatasetError):
    pass


@dataclass
class GenSpec:
    K: int = 4
    dims: list = field(default_factory=lambda: [8, 8])
    separation: list = field(default_factory=lambda: [4.0, 4.0])
    noise_sigma: list = field(default_factory=lambda: [1.0, 1.0])
    scale: list = field(default_factory=lambda: [1.0, 1.0])
    n_train: int = 800
    n_test: int = 1000
    seed: int = 0

    def validate(self):
        l = len(self.dims)
        if self.K < 2:
            raise DatasetError("K must be >= 2")
        if l < 2:
            raise DatasetError("need at least two modalities")
        for name in ("separation", "noise_sigma", "scale"):
            if len(getattr(self, name)) != l:
                raise DatasetError(f"{name} needs one entry per modality")
        if any(d < 2 for d in self.dims):
            raise DatasetError("every modality needs dim >= 2")
        if any(d < self.K for d in self.dims):
            raise DatasetError(f"dims {self.dims} cannot hold {self.K} orthogonal class means")
        if any(s < 0 for s in self.separation) or any(s < 0 for s in self.noise_sigma):
            raise DatasetError("separations and noise levels must be >= 0")
        if self.n_train < self.K or self.n_test < self.K:
            raise DatasetError("sample counts must be >= K")


PRESETS = {
    "balanced": GenSpec(separation=[4.0, 4.0], scale=[1.0, 1.0]),
    "skewed": GenSpec(separation=[4.0, 1.5], scale=[3.0, 1.0]),
    "no-signal": GenSpec(separation=[4.0, 0.0], scale=[1.0, 1.0]),
}


def preset(name: str, **overrides) -> GenSpec:
    if name not in PRESETS:
        raise DatasetError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values = asdict(PRESETS[name])
    values.update(overrides)
    return GenSpec(**values)


@dataclass
class BiModalDataset:
    """Labelled samples, one array per modality (the name predates l > 2)."""

    xs: list
    y: np.ndarray
    K: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.y = np.asarray(self.y, dtype=np.int64)
        if any(x.shape[0] != self.y.size for x in self.xs):
            raise ValidationError("modality blocks and labels differ in length")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise ValidationError(f"labels must lie in [0, {self.K})")

    def __len__(self):
        return int(self.y.size)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.xs]

    def subset(self, rows) -> "BiModalDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return BiModalDataset([x[rows] for x in self.xs], self.y[rows], self.K, dict(self.manifest))

    def __eq__(self, other):
        return (isinstance(other, BiModalDataset) and self.K == other.K
                and np.array_equal(self.y, other.y) and len(self.xs) == len(other.xs)
                and all(np.array_equal(a, b) for a, b in zip(self.xs, other.xs)))


def class_means(spec: GenSpec) -> list[np.ndarray]:
    """Per-modality ``K x d`` matrices of class means."""
    means = []
    for m, d in enumerate(spec.dims):
        rng = PortableRNG(spec.seed, stream=0xD00 + m)
        q, _ = np.linalg.qr(rng.normal((d, spec.K)))
        means.append(spec.separation[m] * q.T)
    return means


def _draw(spec, means, n, stream):
    labels = np.arange(n) % spec.K
    labels = labels[PortableRNG(spec.seed, stream=stream).permutation(n)]
    xs = []
    for m, d in enumerate(spec.dims):
        noise = PortableRNG(spec.seed, stream=stream + 1 + m).normal((n, d))
        xs.append(spec.scale[m] * (means[m][labels] + spec.noise_sigma[m] * noise))
    return xs, labels


def generate(spec: GenSpec) -> tuple[BiModalDataset, BiModalDataset]:
    """Train and test splits drawn around shared class means."""
    spec.validate()
    means = class_means(spec)
    manifest = {"version": FORMAT_VERSION, "spec": asdict(spec)}
    out = []
    for split, n, stream in (("train", spec.n_train, 0x100), ("test", spec.n_test, 0x200)):
        xs, y = _draw(spec, means, n, stream)
        out.append(BiModalDataset(xs, y, spec.K, dict(manifest, split=split)))
    return out[0], out[1]


def save(dataset: BiModalDataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest, version=FORMAT_VERSION, K=dataset.K,
                    dims=dataset.dims, n_samples=len(dataset))
    lines = [json.dumps(manifest, sort_keys=True)]
    for i in range(len(dataset)):
        values = [repr(float(v)) for x in dataset.xs for v in x[i]]
        lines.append(",".join([str(int(dataset.y[i]))] + values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load(path) -> BiModalDataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text:
        raise TruncatedFileError(f"{path}: empty file")
    try:
        manifest = json.loads(text[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: bad manifest line: {exc}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {manifest.get('version')!r}, "
                                   f"expected {FORMAT_VERSION!r}")
    K, dims, n = int(manifest["K"]), [int(d) for d in manifest["dims"]], int(manifest["n_samples"])
    rows = [r for r in text[1:] if r.strip()]
    if len(rows) < n:
        raise TruncatedFileError(f"{path}: manifest declares {n} rows, found {len(rows)}")
    if len(rows) > n:
        raise DatasetError(f"{path}: manifest declares {n} rows, found {len(rows)}")
    width = 1 + sum(dims)
    labels = np.empty(n, dtype=np.int64)
    flat = np.empty((n, sum(dims)))
    for i, row in enumerate(rows):
        cells = row.split(",")
        if len(cells) != width:
            raise RowParseError(i + 1, f"expected {width} fields, found {len(cells)}")
        try:
            labels[i] = int(cells[0])
            flat[i] = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise RowParseError(i + 1, str(exc)) from None
    if n and (labels.min() < 0 or labels.max() >= K):
        bad = int(labels[(labels < 0) | (labels >= K)][0])
        raise ValidationError(f"{path}: label {bad} outside [0, {K})")
    xs = np.split(flat, np.cumsum(dims)[:-1], axis=1)
    keep = {k: v for k, v in manifest.items() if k not in ("K", "dims", "n_samples")}
    return BiModalDataset([x.copy() for x in xs], labels, K, keep)


def split(dataset: BiModalDataset, fraction: float, seed: int):
    """Stratified split; class ``k`` contributes ``round(fraction * n_k)`` rows to the first part."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError("fraction must lie strictly between 0 and 1")
    first, second = [], []
    for k in range(dataset.K):
        rows = np.flatnonzero(dataset.y == k)
        rows = rows[PortableRNG(seed, stream=0x5B + k).permutation(rows.size)]
        cut = int(round(fraction * rows.size))
        first.append(rows[:cut])
        second.append(rows[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return dataset.subset(a), dataset.subset(b)
