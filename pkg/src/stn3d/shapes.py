"""Synthetic parametric shape families with part labels, plus dataset I/O.

Four families (table, rocket, earphone, lamp) are sampled on parametric
surfaces with randomized proportions per seed.  They are built so that part
boundaries are ambiguous under Euclidean k-NN — thin legs meeting a tabletop,
a band diving into earphone cups, a pole threading a lamp shade — which is
exactly the regime where re-learned neighborhoods have something to improve.

Cloud files are plain text, one point per line ``x y z label`` with
'#'-prefixed header lines for category and part count; floats are written
with 17 significant digits so a read/write round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud, apply_rigid, normalize_cloud, random_rigid

KINDS = ("table", "rocket", "earphone", "lamp")
PARTS_PER_KIND = {"table": 2, "rocket": 3, "earphone": 2, "lamp": 2}
PART_NAMES = {
    "table": ("top", "legs"),
    "rocket": ("body", "nose", "fins"),
    "earphone": ("cups", "band"),
    "lamp": ("pole", "shade"),
}
AUGMENT_MODES = ("none", "rigid", "rigid+jitter")
JITTER_STD = 0.01

# Per-kind fraction ranges for the non-primary parts; the remainder goes to
# the first part.  Kept at module level so the proportion audit has a single
# source of truth.
FRACTION_RANGES = {
    "table": {"legs": (0.30, 0.50)},
    "rocket": {"nose": (0.12, 0.22), "fins": (0.18, 0.32)},
    "earphone": {"band": (0.30, 0.50)},
    "lamp": {"shade": (0.40, 0.60)},
}


class CloudParseError(ValueError):
    """Malformed cloud file; message carries the offending line number."""


def kind_category(kind: str) -> int:
    return KINDS.index(kind)


def _allocate(n: int, rng: np.random.Generator, kind: str) -> dict[str, int]:
    """Point counts per part, drawing each secondary fraction from its range."""
    counts, used = {}, 0
    for part, (lo, hi) in FRACTION_RANGES[kind].items():
        counts[part] = int(round(n * rng.uniform(lo, hi)))
        used += counts[part]
    counts[PART_NAMES[kind][0]] = n - used
    return counts


def _split_evenly(n: int, groups: int, rng: np.random.Generator) -> np.ndarray:
    base = np.full(groups, n // groups)
    base[rng.permutation(groups)[: n % groups]] += 1
    return base


def _box(rng, n, lo, hi):
    return rng.uniform(lo, hi, size=(n, 3))


def _table(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = _allocate(n, rng, "table")
    half_x, half_y = rng.uniform(0.5, 1.0), rng.uniform(0.4, 0.9)
    height = rng.uniform(0.5, 1.3)
    slab = rng.uniform(0.03, 0.08)
    leg_half = rng.uniform(0.04, 0.10)
    inset = rng.uniform(0.05, 0.15)

    top = _box(rng, counts["top"], [-half_x, -half_y, height - slab], [half_x, half_y, height])

    leg_centers = [(sx * (half_x - inset), sy * (half_y - inset))
                   for sx in (-1, 1) for sy in (-1, 1)]
    legs = []
    for cnt, (cx, cy) in zip(_split_evenly(counts["legs"], 4, rng), leg_centers):
        legs.append(_box(rng, cnt, [cx - leg_half, cy - leg_half, 0.0],
                         [cx + leg_half, cy + leg_half, height - slab]))
    points = np.vstack([top, *legs])
    labels = np.concatenate([np.zeros(counts["top"], dtype=np.int64),
                             np.ones(counts["legs"], dtype=np.int64)])
    return points, labels


def _cylinder_surface(rng, n, radius, z_lo, z_hi):
    theta = rng.uniform(0.0, 2 * np.pi, n)
    z = rng.uniform(z_lo, z_hi, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])


def _rocket(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = _allocate(n, rng, "rocket")
    radius = rng.uniform(0.15, 0.30)
    length = rng.uniform(0.8, 1.4)
    nose_len = rng.uniform(0.25, 0.50)
    fin_height = rng.uniform(0.25, 0.45)
    fin_reach = rng.uniform(0.10, 0.25)  # short fins hug the body
    n_fins = int(rng.integers(3, 5))

    body = _cylinder_surface(rng, counts["body"], radius, 0.0, length)

    u = rng.uniform(0.0, 1.0, counts["nose"])  # 0 at body, 1 at tip
    theta = rng.uniform(0.0, 2 * np.pi, counts["nose"])
    r = radius * (1.0 - u)
    nose = np.column_stack([r * np.cos(theta), r * np.sin(theta), length + u * nose_len])

    fins = []
    for cnt, angle in zip(_split_evenly(counts["fins"], n_fins, rng),
                          2 * np.pi * np.arange(n_fins) / n_fins):
        reach = rng.uniform(0.0, 1.0, cnt)
        # swept trailing edge: the farther out, the shorter the fin
        z = rng.uniform(0.0, 1.0, cnt) * fin_height * (1.0 - 0.6 * reach)
        rad = radius + reach * fin_reach
        direction = np.array([np.cos(angle), np.sin(angle), 0.0])
        fins.append(rad[:, None] * direction + np.column_stack(
            [np.zeros(cnt), np.zeros(cnt), z]))
    points = np.vstack([body, nose, *fins])
    labels = np.concatenate([np.zeros(counts["body"], dtype=np.int64),
                             np.ones(counts["nose"], dtype=np.int64),
                             np.full(counts["fins"], 2, dtype=np.int64)])
    return points, labels


def _sphere_surface(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _earphone(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = _allocate(n, rng, "earphone")
    arc_radius = rng.uniform(0.7, 1.0)
    tube = rng.uniform(0.02, 0.05)
    cup_radius = rng.uniform(0.18, 0.30)
    overshoot = rng.uniform(0.05, 0.25)  # how far the band dives past the cup centers

    phi = rng.uniform(-overshoot, np.pi + overshoot, counts["band"])
    ring = np.column_stack([arc_radius * np.cos(phi), np.zeros(counts["band"]),
                            arc_radius * np.sin(phi)])
    band = ring + tube * rng.normal(size=(counts["band"], 3))

    centers = np.array([[arc_radius, 0.0, 0.0], [-arc_radius, 0.0, 0.0]])
    cup_counts = _split_evenly(counts["cups"], 2, rng)
    cups = [_sphere_surface(rng, cnt, c, cup_radius) for cnt, c in zip(cup_counts, centers)]
    points = np.vstack([*cups, band])
    labels = np.concatenate([np.zeros(counts["cups"], dtype=np.int64),
                             np.ones(counts["band"], dtype=np.int64)])
    return points, labels


def _lamp(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    counts = _allocate(n, rng, "lamp")
    height = rng.uniform(0.8, 1.4)
    pole_radius = rng.uniform(0.02, 0.05)
    base_radius = rng.uniform(0.12, 0.22)
    # narrow shade collar: its upper rim nearly touches the pole, so pole and
    # shade points interleave in Euclidean distance along the covered span
    shade_top = pole_radius + rng.uniform(0.01, 0.05)
    shade_bottom = rng.uniform(0.22, 0.40)
    shade_depth = rng.uniform(0.30, 0.55)

    n_base = counts["pole"] // 6
    theta = rng.uniform(0.0, 2 * np.pi, n_base)
    r = base_radius * np.sqrt(rng.uniform(0.0, 1.0, n_base))
    base = np.column_stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n_base)])
    pole = _cylinder_surface(rng, counts["pole"] - n_base, pole_radius, 0.0, height)

    u = rng.uniform(0.0, 1.0, counts["shade"])  # 0 at the top rim, 1 at the bottom rim
    theta = rng.uniform(0.0, 2 * np.pi, counts["shade"])
    rad = shade_top + u * (shade_bottom - shade_top)
    z = height - u * shade_depth
    shade = np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])

    points = np.vstack([base, pole, shade])
    labels = np.concatenate([np.zeros(counts["pole"], dtype=np.int64),
                             np.ones(counts["shade"], dtype=np.int64)])
    return points, labels


_SAMPLERS = {"table": _table, "rocket": _rocket, "earphone": _earphone, "lamp": _lamp}


def gen_shape(kind: str, n_points: int, seed, augment: str = "none") -> PointCloud:
    """One labeled, normalized shape; fully determined by (kind, n_points, seed)."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
    if augment not in AUGMENT_MODES:
        raise ValueError(f"unknown augment mode {augment!r}; expected one of {AUGMENT_MODES}")
    if n_points < 32:
        raise ValueError(f"n_points must be >= 32, got {n_points}")
    rng = np.random.default_rng(seed)
    points, labels = _SAMPLERS[kind](rng, n_points)
    cloud = normalize_cloud(PointCloud(points, part_labels=labels,
                                       category=kind_category(kind)))
    if augment.startswith("rigid"):
        rotation, _ = random_rigid(rng.integers(0, 2**63 - 1))
        points = apply_rigid(cloud.points, rotation, np.zeros(3))
        if augment == "rigid+jitter":
            points = points + JITTER_STD * rng.normal(size=points.shape)
        cloud = normalize_cloud(PointCloud(points, part_labels=cloud.part_labels,
                                           category=cloud.category))
    return cloud


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    kinds: tuple[str, ...] = KINDS
    per_kind: int = 100
    n_points: int = 512
    seed: int = 0
    augment: str = "none"
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "per_kind": self.per_kind,
                "n_points": self.n_points, "seed": self.seed, "augment": self.augment,
                "split_fractions": list(self.split_fractions)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(kinds=tuple(d["kinds"]), per_kind=d["per_kind"], n_points=d["n_points"],
                   seed=d["seed"], augment=d["augment"],
                   split_fractions=tuple(d["split_fractions"]))


@dataclass
class Dataset:
    """Shapes plus their split assignment; order and splits are seed-determined."""

    shapes: list[PointCloud]
    kinds: list[str]
    splits: list[str]
    config: DatasetConfig

    def __len__(self) -> int:
        return len(self.shapes)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def num_parts(self) -> int:
        return max(PARTS_PER_KIND[k] for k in set(self.kinds))


def _split_counts(m: int, fractions: tuple[float, float, float]) -> tuple[int, int]:
    """(train, val) counts; the remainder is test.

    Floors of the fractions, but any split with a positive fraction keeps at
    least one shape so tiny datasets still have something to validate on.
    """
    f_train, f_val, f_test = fractions
    n_train = int(np.floor(f_train * m))
    n_val = int(np.floor(f_val * m))
    if f_val > 0 and n_val == 0:
        if m - n_train >= 2:  # borrow from the test remainder first
            n_val = 1
        elif n_train > 1:
            n_val, n_train = 1, n_train - 1
    if f_test > 0 and m - n_train - n_val == 0 and n_train > 1:
        n_train -= 1
    return n_train, n_val


def make_dataset(config: DatasetConfig) -> Dataset:
    """Generate all shapes and split them 70/10/20 (stratified per kind)."""
    shapes, kinds, splits = [], [], []
    for kind in config.kinds:
        k_idx = kind_category(kind)
        m = config.per_kind
        n_train, n_val = _split_counts(m, config.split_fractions)
        order = np.random.default_rng(
            np.random.SeedSequence((config.seed, k_idx, 0xC0FFEE))).permutation(m)
        assignment = np.empty(m, dtype=object)
        assignment[order[:n_train]] = "train"
        assignment[order[n_train:n_train + n_val]] = "val"
        assignment[order[n_train + n_val:]] = "test"
        for i in range(m):
            seed = np.random.SeedSequence((config.seed, k_idx, i))
            shapes.append(gen_shape(kind, config.n_points, seed, config.augment))
            kinds.append(kind)
            splits.append(str(assignment[i]))
    return Dataset(shapes=shapes, kinds=kinds, splits=splits, config=config)


# ---------------------------------------------------------------------------
# cloud file format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_cloud(path, cloud: PointCloud, parts: int | None = None) -> None:
    lines = []
    if cloud.category is not None:
        lines.append(f"# category {cloud.category}")
    if parts is None and cloud.category is not None and 0 <= cloud.category < len(KINDS):
        parts = PARTS_PER_KIND[KINDS[cloud.category]]
    if parts is not None:
        lines.append(f"# parts {parts}")
    for i, p in enumerate(cloud.points):
        row = f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}"
        if cloud.part_labels is not None:
            row += f" {cloud.part_labels[i]}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> tuple[PointCloud, int | None]:
    """Parse a cloud file; returns the cloud and the declared part count (if any)."""
    category, parts = None, None
    points, labels = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) == 2 and fields[0] == "category":
                category = int(fields[1])
            elif len(fields) == 2 and fields[0] == "parts":
                parts = int(fields[1])
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise CloudParseError(f"{path}:{lineno}: expected 'x y z [label]', got {line!r}")
        try:
            points.append([float(v) for v in fields[:3]])
        except ValueError:
            raise CloudParseError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
        if len(fields) == 4:
            label = int(fields[3])
            if label < 0 or (parts is not None and label >= parts):
                raise CloudParseError(f"{path}:{lineno}: label {label} out of range "
                                      f"[0, {parts})")
            labels.append(label)
    if labels and len(labels) != len(points):
        raise CloudParseError(f"{path}: {len(labels)} labels for {len(points)} points")
    cloud = PointCloud(np.array(points), part_labels=np.array(labels) if labels else None,
                       category=category)
    return cloud, parts


def write_dataset(dataset: Dataset, root) -> Path:
    """Write clouds/<kind>_<index>.txt plus a manifest.json under ``root``."""
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[str, int] = {}
    for cloud, kind, split in zip(dataset.shapes, dataset.kinds, dataset.splits):
        i = counters.get(kind, 0)
        counters[kind] = i + 1
        rel = f"clouds/{kind}_{i:04d}.txt"
        write_cloud(root / rel, cloud, parts=PARTS_PER_KIND[kind])
        entries.append({"path": rel, "kind": kind, "category": kind_category(kind),
                        "parts": PARTS_PER_KIND[kind], "split": split})
    manifest = {"config": dataset.config.to_dict(), "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root / "manifest.json"


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    config = DatasetConfig.from_dict(manifest["config"])
    shapes, kinds, splits = [], [], []
    for entry in manifest["entries"]:
        cloud, _ = read_cloud(root / entry["path"])
        shapes.append(cloud)
        kinds.append(entry["kind"])
        splits.append(entry["split"])
    return Dataset(shapes=shapes, kinds=kinds, splits=splits, config=config)
