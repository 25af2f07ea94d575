"""Multi-domain datasets: synthetic generation with a rotation-controlled
domain shift, CSV ingestion of precomputed embeddings, and seeded sampling.

The synthetic task draws one set of Gaussian class means shared by all
domains; each domain then rotates every sample by its own angle through a
common random sequence of coordinate 2-planes. Angle 0 means no shift, and
larger angles move a domain's class-conditional distribution further from
the others while keeping labels intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod

ROLES = ("source", "target-train", "target-test")

CSV_UNLABELED = -1


class DomainCsvError(ValueError):
    """Malformed domain CSV; the message names the offending line."""


@dataclass
class DomainDataset:
    """One domain: sample matrix, optional labels, and its split role.

    ``y`` is None for a fully unlabeled domain; otherwise an integer vector
    where ``-1`` marks individual unlabeled rows.
    """

    domain_id: str
    x: np.ndarray
    y: np.ndarray | None
    role: str

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("sample matrix must be 2-d with at least one row")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("sample matrix contains non-finite entries")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError("labels length does not match sample count")
            if self.y.min() < CSV_UNLABELED:
                raise ValueError("labels must be >= -1")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def fully_labeled(self) -> bool:
        return self.y is not None and bool(self.y.min() >= 0)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic multi-domain task."""

    dim: int = 20
    classes: int = 5
    mean_scale: float = 3.0
    noise_sigma: float = 1.0
    source_angles_deg: tuple[float, ...] = (15.0, 30.0, 45.0, 60.0)
    target_angle_deg: float = 75.0
    samples_per_source: int = 2000
    target_train_samples: int = 1024
    target_test_samples: int = 1000
    rotation_planes: int = 4

    def __post_init__(self) -> None:
        if self.dim < 2 or self.classes < 2:
            raise ValueError("need dim >= 2 and classes >= 2")
        if not self.source_angles_deg:
            raise ValueError("need at least one source domain")
        for a in (*self.source_angles_deg, self.target_angle_deg):
            if not 0.0 <= a < 180.0:
                raise ValueError("angles must lie in [0, 180) degrees")
        if min(
            self.samples_per_source,
            self.target_train_samples,
            self.target_test_samples,
        ) < 1:
            raise ValueError("sample counts must be positive")
        if not 1 <= self.rotation_planes <= self.dim // 2:
            raise ValueError("rotation_planes must be in [1, dim // 2]")
        if self.mean_scale <= 0 or self.noise_sigma <= 0:
            raise ValueError("scales must be positive")

    @property
    def num_sources(self) -> int:
        return len(self.source_angles_deg)


def rotate_planes(
    x: np.ndarray, planes: list[tuple[int, int]], angle_deg: float
) -> np.ndarray:
    """Apply a Givens rotation of the given angle in each listed 2-plane.

    The composition is orthogonal, so row norms are preserved.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    for p, q in planes:
        xp = out[:, p].copy()
        xq = out[:, q]
        out[:, p] = c * xp - s * xq
        out[:, q] = s * xp + c * xq
    return out


def generate_synthetic_domains(spec: SyntheticSpec, seed: int) -> list[DomainDataset]:
    """Sources first (labeled), then the unlabeled target-train split and the
    labeled target-test split. Deterministic in (spec, seed)."""
    means_rng = rng_mod.stream(seed, 0)
    planes_rng = rng_mod.stream(seed, 1)
    means = means_rng.normal(0.0, spec.mean_scale, size=(spec.classes, spec.dim))
    axes = planes_rng.permutation(spec.dim)
    planes = [
        (int(axes[2 * i]), int(axes[2 * i + 1])) for i in range(spec.rotation_planes)
    ]

    def draw(domain_rng: np.random.Generator, n: int, angle: float):
        y = domain_rng.integers(0, spec.classes, size=n)
        x = means[y] + domain_rng.normal(0.0, spec.noise_sigma, size=(n, spec.dim))
        return rotate_planes(x, planes, angle), y

    domains: list[DomainDataset] = []
    for d, angle in enumerate(spec.source_angles_deg):
        x, y = draw(rng_mod.stream(seed, 2, d), spec.samples_per_source, angle)
        domains.append(DomainDataset(f"source{d + 1}", x, y, "source"))
    n_train, n_test = spec.target_train_samples, spec.target_test_samples
    x, y = draw(rng_mod.stream(seed, 3), n_train + n_test, spec.target_angle_deg)
    domains.append(DomainDataset("target", x[:n_train], None, "target-train"))
    domains.append(DomainDataset("target", x[n_train:], y[n_train:], "target-test"))
    return domains


def split_domains(
    domains: list[DomainDataset],
) -> tuple[list[DomainDataset], DomainDataset, DomainDataset]:
    """Pick apart a domain list into (sources, target-train, target-test)."""
    sources = [d for d in domains if d.role == "source"]
    train = [d for d in domains if d.role == "target-train"]
    test = [d for d in domains if d.role == "target-test"]
    if not sources or len(train) != 1 or len(test) != 1:
        raise ValueError(
            "need at least one source, exactly one target-train and one target-test"
        )
    return sources, train[0], test[0]


# ---------------------------------------------------------------------------
# CSV ingestion / emission

def load_domain_csv(path, domain_id: str | None = None, role: str | None = None) -> DomainDataset:
    """Parse a domain CSV (header ``label,f0,...,f{V-1}``; label -1 means
    unlabeled). Errors name the offending line, counted from 1."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DomainCsvError(f"{path}: empty file")
    header = [c.strip() for c in lines[0].split(",")]
    if header[0] != "label" or len(header) < 2:
        raise DomainCsvError(f"{path}: line 1: header must be 'label,f0,...'")
    for j, name in enumerate(header[1:]):
        if name != f"f{j}":
            raise DomainCsvError(
                f"{path}: line 1: expected column 'f{j}', found {name!r}"
            )
    width = len(header) - 1
    xs: list[list[float]] = []
    ys: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width + 1:
            raise DomainCsvError(
                f"{path}: line {lineno}: expected {width + 1} fields, found {len(cells)}"
            )
        try:
            label = int(cells[0])
            row = [float(c) for c in cells[1:]]
        except ValueError as exc:
            raise DomainCsvError(f"{path}: line {lineno}: {exc}") from exc
        if label < CSV_UNLABELED:
            raise DomainCsvError(f"{path}: line {lineno}: label must be >= -1")
        if not all(math.isfinite(v) for v in row):
            raise DomainCsvError(f"{path}: line {lineno}: non-finite feature value")
        ys.append(label)
        xs.append(row)
    if not xs:
        raise DomainCsvError(f"{path}: no samples")
    y = np.asarray(ys, dtype=np.int64)
    labels = None if bool(np.all(y == CSV_UNLABELED)) else y
    if domain_id is None:
        domain_id = path.stem
    if role is None:
        role = "source" if labels is not None and labels.min() >= 0 else "target-train"
    return DomainDataset(domain_id, np.asarray(xs, dtype=np.float64), labels, role)


def write_domain_csv(dataset: DomainDataset, path) -> None:
    width = dataset.n_features
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label," + ",".join(f"f{j}" for j in range(width)) + "\n")
        y = dataset.y
        for i in range(len(dataset)):
            label = CSV_UNLABELED if y is None else int(y[i])
            fh.write(str(label) + "," + ",".join(repr(float(v)) for v in dataset.x[i]) + "\n")


def write_manifest(entries: list[tuple[str, str, str]], path) -> None:
    """Manifest CSV of (domain_id, path, role); paths are manifest-relative."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("domain_id,path,role\n")
        for domain_id, rel, role in entries:
            fh.write(f"{domain_id},{rel},{role}\n")


def load_manifest(path) -> list[DomainDataset]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "domain_id,path,role":
        raise DomainCsvError(f"{path}: line 1: manifest header must be 'domain_id,path,role'")
    domains = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 3:
            raise DomainCsvError(f"{path}: line {lineno}: expected 3 fields")
        domain_id, rel, role = cells
        if role not in ROLES:
            raise DomainCsvError(f"{path}: line {lineno}: unknown role {role!r}")
        domains.append(load_domain_csv(path.parent / rel, domain_id=domain_id, role=role))
    return domains


# ---------------------------------------------------------------------------
# sampling

def sample_batch(dataset: DomainDataset, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` row indices without replacement from the caller's stream.

    Chunk the result in draw order to get the round's mini-batches.
    """
    if n > len(dataset):
        raise ValueError(f"cannot draw {n} samples from {len(dataset)}")
    return rng.permutation(len(dataset))[:n]


def iter_batches(indices: np.ndarray, batch_size: int):
    """Chunk a drawn index pool into consecutive batches, in draw order."""
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def logistic_probe_accuracy(
    train: DomainDataset, test: DomainDataset, max_iter: int = 100, seed: int = 0
) -> float:
    """Accuracy of a plain logistic-regression probe trained on one domain
    and scored on another; the brute-force yardstick for task difficulty."""
    from sklearn.linear_model import LogisticRegression

    if not train.fully_labeled or not test.fully_labeled:
        raise ValueError("probe needs fully labeled domains")
    clf = LogisticRegression(max_iter=max_iter, random_state=seed)
    clf.fit(train.x, train.y)
    return float(np.mean(clf.predict(test.x) == test.y))
