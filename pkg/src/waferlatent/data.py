"""Wafer maps: synthetic generation, JSONL I/O, balancing, splitting, encoding.

Die states are 0 (off wafer), 1 (pass) and 2 (fail). Class indices follow
the WM-811K convention used throughout the package::

    0 Center  1 Donut  2 Edge-Loc  3 Edge-Ring  4 Loc
    5 Random  6 Scratch  7 Near-full  8 None
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, ParseError

CLASS_NAMES = ("Center", "Donut", "Edge-Loc", "Edge-Ring", "Loc", "Random", "Scratch",
               "Near-full", "None")
NUM_CLASSES = len(CLASS_NAMES)
CENTER, DONUT, EDGE_LOC, EDGE_RING, LOC, RANDOM, SCRATCH, NEAR_FULL, NONE = range(NUM_CLASSES)

OFF, PASS, FAIL = 0, 1, 2
DEFAULT_SIZE = 27
MIN_SIZE, MAX_SIZE = 15, 255

# WM-811K labeled-set skew: None 85%, Donut 0.3%, Near-full 0.1%; the other six
# classes share the remainder evenly.
WM811K_SKEW = tuple(
    {NONE: 0.85, DONUT: 0.003, NEAR_FULL: 0.001}.get(c, (1.0 - 0.85 - 0.003 - 0.001) / 6)
    for c in range(NUM_CLASSES)
)


@dataclass(eq=False)
class WaferMap:
    grid: np.ndarray
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int8)
        if self.grid.ndim != 2:
            raise InvalidArgumentError(f"wafer grid must be 2-D, got shape {self.grid.shape}")
        if self.label is not None:
            self.label = int(self.label)
            if not 0 <= self.label < NUM_CLASSES:
                raise InvalidArgumentError(f"label {self.label} outside 0..{NUM_CLASSES - 1}")

    def __eq__(self, other):
        if not isinstance(other, WaferMap):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.grid, other.grid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def with_label(self, label: Optional[int]) -> "WaferMap":
        return WaferMap(self.grid, label, self.id)


@dataclass
class DatasetSplit:
    labeled: list[WaferMap]
    unlabeled: list[WaferMap]
    test: list[WaferMap]
    seed: int
    # true labels of the unlabeled portion; read only by evaluation code
    _hidden_labels: dict[str, int] = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# geometry


def disk_mask(size: int) -> np.ndarray:
    r, c = _polar(size)[:2]
    return r <= 1.0


def _polar(size: int):
    """Normalized radius, angle and the disk radius in dies for a size x size grid."""
    center = (size - 1) / 2.0
    radius = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - center, xx - center
    return np.hypot(dy, dx) / radius, np.arctan2(dy, dx), radius


def _check_size(size: int) -> None:
    if not isinstance(size, (int, np.integer)) or size % 2 == 0 or not MIN_SIZE <= size <= MAX_SIZE:
        raise InvalidArgumentError(f"size must be an odd integer in [{MIN_SIZE}, {MAX_SIZE}], got {size}")


def _angle_diff(a, b):
    return np.abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def _pattern_mask(pattern: int, size: int, rng: np.random.Generator) -> np.ndarray:
    d, theta, radius = _polar(size)
    inside = d <= 1.0
    if pattern == CENTER:
        return inside & (d <= rng.uniform(0.25, 0.35))
    if pattern == DONUT:
        inner = rng.uniform(0.35, 0.40)
        outer = rng.uniform(0.55, 0.60)
        return inside & (d >= inner) & (d <= outer)
    if pattern == EDGE_LOC:
        span = np.deg2rad(rng.uniform(30, 90))
        mid = rng.uniform(-np.pi, np.pi)
        depth = rng.uniform(0.15, 0.3)
        return inside & (d >= 1.0 - depth) & (_angle_diff(theta, mid) <= span / 2)
    if pattern == EDGE_RING:
        width = rng.integers(2, 4)
        return inside & ((1.0 - d) * radius < width)
    if pattern == LOC:
        blob = rng.uniform(0.1, 0.2)
        dist = rng.uniform(0.3, 0.6)
        phi = rng.uniform(-np.pi, np.pi)
        cy = (size - 1) / 2.0 + dist * radius * np.sin(phi)
        cx = (size - 1) / 2.0 + dist * radius * np.cos(phi)
        yy, xx = np.mgrid[0:size, 0:size]
        return inside & (np.hypot(yy - cy, xx - cx) <= max(blob * radius, 1.0))
    if pattern == RANDOM:
        return inside & (rng.random((size, size)) < rng.uniform(0.15, 0.3))
    if pattern == SCRATCH:
        return inside & _scratch(size, radius, rng)
    if pattern == NEAR_FULL:
        return inside & (rng.random((size, size)) < rng.uniform(0.6, 0.8))
    return np.zeros((size, size), dtype=bool)


def _scratch(size: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    center = (size - 1) / 2.0
    length = rng.uniform(0.5, 1.2) * radius
    start_r = rng.uniform(0.0, 0.5) * radius
    start_phi = rng.uniform(-np.pi, np.pi)
    y = center + start_r * np.sin(start_phi)
    x = center + start_r * np.cos(start_phi)
    heading = rng.uniform(-np.pi, np.pi)
    drift = rng.uniform(-0.05, 0.05)
    for _ in range(int(np.ceil(length / 0.5))):
        iy, ix = int(round(y)), int(round(x))
        if 0 <= iy < size and 0 <= ix < size:
            mask[iy, ix] = True
        heading += drift + rng.normal(0.0, 0.03)
        y += 0.5 * np.sin(heading)
        x += 0.5 * np.cos(heading)
    return mask


def generate(pattern: int, size: int = DEFAULT_SIZE, noise_rate: float = 0.02,
             rng_seed: int | np.random.Generator = 0, id: str | None = None) -> WaferMap:
    """Draw one synthetic wafer map of class ``pattern``.

    Shape parameters are sampled per call, so repeated seeds give varied maps
    within the class. Salt noise flips pass dies to fail with ``noise_rate``.
    """
    if not isinstance(pattern, (int, np.integer)) or not 0 <= pattern < NUM_CLASSES:
        raise InvalidArgumentError(f"pattern must be a class index 0..8, got {pattern!r}")
    _check_size(size)
    if not 0.0 <= noise_rate <= 0.2:
        raise InvalidArgumentError(f"noise_rate must lie in [0, 0.2], got {noise_rate}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    inside = disk_mask(size)
    fail = _pattern_mask(int(pattern), size, rng)
    if noise_rate > 0:
        fail |= inside & (rng.random((size, size)) < noise_rate)
    grid = np.where(inside, PASS, OFF).astype(np.int8)
    grid[fail & inside] = FAIL
    if id is None:
        id = f"syn-{CLASS_NAMES[pattern]}-{rng_seed if not isinstance(rng_seed, np.random.Generator) else 'g'}"
    return WaferMap(grid, int(pattern), id)


def class_counts_for(total: int, weights: Sequence[float]) -> list[int]:
    """Integer class counts summing to ``total`` (largest-remainder rounding)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,) or np.any(w < 0) or w.sum() <= 0:
        raise InvalidArgumentError("class weights must be 9 non-negative numbers with a positive sum")
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts.tolist()


def generate_dataset(total: int, weights: Sequence[float] | None = None, size: int = DEFAULT_SIZE,
                     noise_rate: float = 0.02, seed: int = 0) -> list[WaferMap]:
    """A labeled synthetic corpus with exact per-class counts, shuffled deterministically."""
    counts = class_counts_for(total, weights if weights is not None else [1.0] * NUM_CLASSES)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(NUM_CLASSES), counts)
    rng.shuffle(labels)
    child_seeds = rng.integers(0, 2**63 - 1, size=total)
    return [generate(int(lab), size, noise_rate, np.random.default_rng(int(s)), id=f"w{seed}-{i:06d}")
            for i, (lab, s) in enumerate(zip(labels, child_seeds))]


# ---------------------------------------------------------------------------
# JSONL I/O


def export(maps: Iterable[WaferMap], path) -> None:
    lines = []
    for m in maps:
        rec = {"id": m.id, "grid": m.grid.tolist()}
        if m.label is not None:
            rec["label"] = m.label
        lines.append(json.dumps(rec, separators=(",", ":")))
    Path(path).write_text("".join(line + "\n" for line in lines))


def ingest(path, format: str = "jsonl") -> list[WaferMap]:
    """Parse a JSON-lines wafer file.

    Extra per-record metadata (lot, wafer index, die size) is accepted and
    ignored. Records without an ``id`` get ``<file stem>:<line>``.
    """
    if format != "jsonl":
        raise InvalidArgumentError(f"unsupported format {format!r}")
    path = Path(path)
    maps: list[WaferMap] = []
    seen: set[str] = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            m = _parse_record(line, lineno, path.stem)
            if m.id in seen:
                raise ParseError(f"duplicate id {m.id!r}", lineno)
            seen.add(m.id)
            maps.append(m)
    return maps


def _parse_record(line: str, lineno: int, stem: str) -> WaferMap:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise ParseError("record is not an object", lineno)
    if "grid" not in rec:
        raise ParseError("missing 'grid'", lineno)
    grid = rec["grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(row, list) for row in grid):
        raise ParseError("'grid' must be a non-empty array of arrays", lineno)
    width = len(grid[0])
    for r, row in enumerate(grid):
        if len(row) != width:
            raise ParseError(f"row {r} has {len(row)} cells, expected {width}", lineno)
        for c, v in enumerate(row):
            if isinstance(v, bool) or v not in (OFF, PASS, FAIL):
                raise ParseError(f"cell (row {r}, col {c}) has value {v!r}; expected 0, 1 or 2", lineno)
    label = rec.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)
                              or not 0 <= label < NUM_CLASSES):
        raise ParseError(f"label {label!r} outside 0..{NUM_CLASSES - 1}", lineno)
    ident = rec.get("id", f"{stem}:{lineno}")
    return WaferMap(np.array(grid, dtype=np.int8), label, str(ident))


# ---------------------------------------------------------------------------
# balancing and splitting


def dihedral(grid: np.ndarray, k: int) -> np.ndarray:
    """The k-th of the 8 square symmetries: rotate by 90*(k % 4), then transpose if k >= 4."""
    out = np.rot90(grid, k % 4)
    return np.ascontiguousarray(out.T if k >= 4 else out)


def balance(examples: Sequence[WaferMap], target_per_class: int, rng_seed: int = 0) -> list[WaferMap]:
    """Resample to exactly ``target_per_class`` maps per class.

    Large classes are subsampled without replacement. Small classes keep
    every original and add duplicates drawn with replacement, each under a
    random non-identity dihedral transform.
    """
    if target_per_class < 1:
        raise InvalidArgumentError("target_per_class must be positive")
    by_class: dict[int, list[WaferMap]] = defaultdict(list)
    for m in examples:
        if m.label is None:
            raise InvalidArgumentError(f"balance needs labeled maps; {m.id} has no label")
        by_class[m.label].append(m)
    missing = [c for c in range(NUM_CLASSES) if not by_class[c]]
    if missing:
        names = ", ".join(f"{c} ({CLASS_NAMES[c]})" for c in missing)
        raise InvalidArgumentError(f"cannot balance: no examples for classes {names}")
    rng = np.random.default_rng(rng_seed)
    out: list[WaferMap] = []
    for c in range(NUM_CLASSES):
        pool = by_class[c]
        if len(pool) >= target_per_class:
            idx = rng.choice(len(pool), size=target_per_class, replace=False)
            out.extend(pool[i] for i in idx)
            continue
        out.extend(pool)
        extra = target_per_class - len(pool)
        picks = rng.integers(0, len(pool), size=extra)
        transforms = rng.integers(1, 8, size=extra)
        for j, (i, k) in enumerate(zip(picks, transforms)):
            src = pool[i]
            out.append(WaferMap(dihedral(src.grid, int(k)), c, f"{src.id}#aug{j}"))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def split(maps: Sequence[WaferMap], fractions: tuple[float, float, float] = (0.2, 0.6, 0.2),
          rng_seed: int = 0) -> DatasetSplit:
    """Shuffle and cut into labeled / unlabeled / test portions.

    Unlabeled maps lose their label; the true values are kept on the split
    for evaluation only.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    ids = [m.id for m in maps]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError("split: map ids must be unique")
    n = len(maps)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(n)
    n_lab = int(round(fractions[0] * n))
    n_test = int(round(fractions[2] * n))
    n_unl = n - n_lab - n_test
    if n_unl < 0:
        raise InvalidArgumentError("split: fractions leave no room for the unlabeled portion")
    shuffled = [maps[i] for i in order]
    labeled = shuffled[:n_lab]
    unl_src = shuffled[n_lab:n_lab + n_unl]
    test = shuffled[n_lab + n_unl:]
    hidden = {m.id: m.label for m in unl_src if m.label is not None}
    return DatasetSplit(labeled=list(labeled), unlabeled=[m.with_label(None) for m in unl_src],
                        test=list(test), seed=rng_seed, _hidden_labels=hidden)


def class_histogram(maps: Iterable[WaferMap]) -> dict[int, int]:
    counts = Counter(m.label for m in maps if m.label is not None)
    return {c: counts.get(c, 0) for c in range(NUM_CLASSES)}


# ---------------------------------------------------------------------------
# encoding


def to_array(maps: WaferMap | Sequence[WaferMap]) -> np.ndarray:
    """One-hot die-state encoding: (3, H, W) for one map, (N, 3, H, W) for a list."""
    if isinstance(maps, WaferMap):
        return (maps.grid[None, :, :] == np.arange(3)[:, None, None]).astype(np.float64)
    grids = np.stack([m.grid for m in maps])
    return (grids[:, None, :, :] == np.arange(3)[None, :, None, None]).astype(np.float64)


def to_tensor(wafer: WaferMap):
    from .tensor import Tensor
    return Tensor(to_array(wafer))
