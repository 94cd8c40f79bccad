"""Time-series dataset ingestion, stratified re-splitting, and synthetic corpora.

File format (one record per line, '#' lines are skipped):

    <label><TAB>v1<TAB>v2<TAB>...<TAB>vL

Labels are remapped to contiguous 0-based ids in order of first appearance,
so archives with arbitrary integer labels (e.g. {-1, 1}) load uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

DTYPE = np.float32


@dataclass
class SeriesSet:
    """A batch of equal-length labeled series."""
    values: np.ndarray  # [n, L] float32
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    train: SeriesSet
    test: SeriesSet
    num_classes: int
    length: int


def load_tsv(path) -> SeriesSet:
    """Parse a label+values TSV file; raises ParseError naming the bad line."""
    path = Path(path)
    raw_labels: list[float] = []
    rows: list[np.ndarray] = []
    expected_len = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.replace(",", "\t").split()
            try:
                fields = [float(tok) for tok in tokens]
            except ValueError as exc:
                raise ParseError(f"{path.name}:{lineno}: non-numeric token ({exc})") from None
            if len(fields) < 2:
                raise ParseError(f"{path.name}:{lineno}: need a label and at least one value")
            label, values = fields[0], fields[1:]
            if expected_len is None:
                expected_len = len(values)
            elif len(values) != expected_len:
                raise ParseError(
                    f"{path.name}:{lineno}: {len(values)} values, expected {expected_len}")
            if not all(math.isfinite(v) for v in fields):
                raise ParseError(f"{path.name}:{lineno}: non-finite value")
            raw_labels.append(label)
            rows.append(np.asarray(values, dtype=DTYPE))
    if not rows:
        raise ParseError(f"{path.name}: no records")
    remap: dict[float, int] = {}
    for lab in raw_labels:
        if lab not in remap:
            remap[lab] = len(remap)
    labels = np.array([remap[lab] for lab in raw_labels], dtype=np.int64)
    return SeriesSet(values=np.stack(rows), labels=labels)


def write_tsv(path, series: SeriesSet, header_lines: list[str] | None = None) -> None:
    """Write a SeriesSet in the load_tsv format; header lines go in as comments."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        for label, row in zip(series.labels, series.values):
            vals = "\t".join(f"{float(v):.9g}" for v in row)
            fh.write(f"{int(label)}\t{vals}\n")


def znormalize(values: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-series zero mean / unit variance; constant series map to zeros."""
    values = np.asarray(values, dtype=DTYPE)
    mean = values.mean(axis=-1, keepdims=True)
    centered = values - mean
    std = centered.std(axis=-1, keepdims=True)
    return np.where(std > eps, centered / np.where(std > eps, std, 1.0), 0.0).astype(DTYPE)


def znormalize_set(series: SeriesSet) -> SeriesSet:
    return SeriesSet(values=znormalize(series.values), labels=series.labels.copy())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_resplit(all_series: SeriesSet, train_fraction: float, seed: int) -> Dataset:
    """Per-class split preserving proportions within one sample.

    Per class: round-half-up of train_fraction * n_c, clamped so both sides
    stay nonempty; the largest classes are then adjusted +-1 to hit the
    global round(train_fraction * n) count exactly.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    labels = all_series.labels
    classes = np.unique(labels)
    counts = {int(c): int((labels == c).sum()) for c in classes}
    for c, n_c in counts.items():
        if n_c < 2:
            raise ValueError(f"class {c} has {n_c} sample(s); need >= 2 to stratify")
    take = {c: min(max(_round_half_up(train_fraction * n_c), 1), n_c - 1)
            for c, n_c in counts.items()}
    target = _round_half_up(train_fraction * len(all_series))
    by_size = sorted(counts, key=lambda c: (-counts[c], c))
    while sum(take.values()) != target:
        delta = 1 if sum(take.values()) < target else -1
        for c in by_size:
            new = take[c] + delta
            if 1 <= new <= counts[c] - 1:
                take[c] = new
                break
        else:
            break  # no legal adjustment left; proportions still hold within 1
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        order = rng.permutation(len(members))
        k = take[int(c)]
        train_idx.append(np.sort(members[order[:k]]))
        test_idx.append(np.sort(members[order[k:]]))
    tr = np.concatenate(train_idx)
    te = np.concatenate(test_idx)
    return Dataset(
        train=SeriesSet(all_series.values[tr].copy(), all_series.labels[tr].copy()),
        test=SeriesSet(all_series.values[te].copy(), all_series.labels[te].copy()),
        num_classes=len(classes),
        length=all_series.length,
    )


def _sine_bank(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    t = np.arange(length) / length
    freqs = rng.uniform(1.0, 4.0, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])


def _square_bank(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    return np.sign(_sine_bank(rng, n, length)) * 1.0


def _two_patterns_bank(rng: np.random.Generator, n: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat series with two rectangular pulses; pulse order defines the class."""
    width = max(length // 8, 4)
    values = np.zeros((n, length), dtype=np.float64)
    labels = np.arange(n, dtype=np.int64) % 2
    first_lo, first_hi = int(0.05 * length), int(0.40 * length)
    second_lo, second_hi = int(0.55 * length), int(0.90 * length) - width
    for i in range(n):
        p1 = int(rng.integers(first_lo, first_hi))
        p2 = int(rng.integers(second_lo, max(second_hi, second_lo + 1)))
        sign = 1.0 if labels[i] == 0 else -1.0
        values[i, p1:p1 + width] = sign
        values[i, p2:p2 + width] = -sign
    return values, labels


def make_synthetic(kind: str, n: int, length: int, noise_std: float, seed: int,
                   train_fraction: float = 0.8) -> Dataset:
    """Build a deterministic synthetic dataset and stratify-split it."""
    if n < 4 or length < 16:
        raise ValueError("make_synthetic requires n >= 4 and length >= 16")
    rng = np.random.default_rng(seed)
    if kind == "sine":
        values = _sine_bank(rng, n, length)
        labels = np.zeros(n, dtype=np.int64)
    elif kind == "square":
        values = _square_bank(rng, n, length)
        labels = np.zeros(n, dtype=np.int64)
    elif kind == "two_patterns":
        values, labels = _two_patterns_bank(rng, n, length)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; use sine, square, or two_patterns")
    if noise_std > 0:
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    pool = SeriesSet(values=znormalize(values), labels=labels)
    if len(np.unique(labels)) == 1:
        # single-class corpora split by size only
        k = min(max(_round_half_up(train_fraction * n), 1), n - 1)
        order = rng.permutation(n)
        tr, te = np.sort(order[:k]), np.sort(order[k:])
        return Dataset(
            train=SeriesSet(pool.values[tr], pool.labels[tr]),
            test=SeriesSet(pool.values[te], pool.labels[te]),
            num_classes=1,
            length=length,
        )
    return stratified_resplit(pool, train_fraction, seed)


def class_histogram(labels: np.ndarray) -> dict[int, int]:
    uniq, counts = np.unique(labels, return_counts=True)
    return {int(c): int(k) for c, k in zip(uniq, counts)}
