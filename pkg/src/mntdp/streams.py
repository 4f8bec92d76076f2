"""Synthetic task families and stream templates, plus IDX ingestion.

Each family owns a disjoint block of input coordinates.  A class of a family
is a prototype vector that is 0.5 ("background") everywhere except on a few
code coordinates of the family block, which spell the class as a binary
word; samples are prototype plus
Gaussian noise, clipped to ``[0, 1]``.  Because every family sees the same
noisy background, tasks of different families share no signal.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np

INPUT_DIM = 64
N_FAMILIES = 6
CLASSES_PER_FAMILY = 10
BLOCK_WIDTH = CLASSES_PER_FAMILY
BACKGROUND = slice(N_FAMILIES * BLOCK_WIDTH, INPUT_DIM)
BACKGROUND_LEVEL = 0.5
NOISE_SIGMA = 0.15
CODE_BITS = 5
CODE_LOW, CODE_HIGH = 0.25, 0.9
_PROTOTYPE_SALT = 0x5EED_C7

KINDS = ("S-", "S+", "Sin", "Sout", "Spl", "Slong")
_ALIASES = {
    "s-": "S-", "s_minus": "S-", "sminus": "S-",
    "s+": "S+", "s_plus": "S+", "splus": "S+",
    "sin": "Sin", "s_in": "Sin",
    "sout": "Sout", "s_out": "Sout",
    "spl": "Spl", "s_pl": "Spl",
    "slong": "Slong", "s_long": "Slong",
}

# (train, val) sizes at paper scale
LARGE, SMALL, TINY = (4000, 2000), (400, 200), (50, 30)
LONG_LARGE, LONG_SMALL = (5000, 2500), (25, 15)
TEST_SIZE = 5000
DESK_FACTOR = 10


def canonical_kind(kind: str) -> str:
    if kind in KINDS:
        return kind
    try:
        return _ALIASES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown stream kind {kind!r}; expected one of {KINDS}") from None


def family_block(family: int) -> slice:
    if not 0 <= family < N_FAMILIES:
        raise ValueError(f"family {family} outside [0, {N_FAMILIES})")
    return slice(family * BLOCK_WIDTH, (family + 1) * BLOCK_WIDTH)


_proto_cache: dict = {}


def family_prototypes(family: int) -> np.ndarray:
    """``(CLASSES_PER_FAMILY, INPUT_DIM)`` prototypes, fixed by the family id.

    The family uses ``CODE_BITS`` hashed coordinates of its block.  Each class
    is a distinct even-parity word over them, written with levels
    ``CODE_LOW`` / ``CODE_HIGH``, so classes differ in at least two bits and
    the closest pairs sit ``sqrt(2) * (CODE_HIGH - CODE_LOW)`` apart, just
    above ``6 * NOISE_SIGMA``.  All classes of a family read the same bits,
    which is what lets a network trained on some of them help with others.
    """
    if family in _proto_cache:
        return _proto_cache[family]
    block = family_block(family)
    rng = np.random.default_rng([_PROTOTYPE_SALT, family])
    coords = block.start + rng.permutation(BLOCK_WIDTH)[:CODE_BITS]
    words = np.arange(2**CODE_BITS)
    even = words[[bin(w).count("1") % 2 == 0 for w in words]]
    vertices = rng.permutation(even)[:CLASSES_PER_FAMILY]
    bits = (vertices[:, None] >> np.arange(CODE_BITS)) & 1
    protos = np.full((CLASSES_PER_FAMILY, INPUT_DIM), BACKGROUND_LEVEL)
    protos[:, coords] = np.where(bits == 1, CODE_HIGH, CODE_LOW)
    protos.setflags(write=False)
    _proto_cache[family] = protos
    return protos


def gen_family_samples(family: int, cls: int, n: int, seed) -> np.ndarray:
    proto = family_prototypes(family)[cls]
    rng = np.random.default_rng(seed)
    x = proto + NOISE_SIGMA * rng.standard_normal((n, INPUT_DIM))
    return np.clip(x, 0.0, 1.0)


def gen_family_sample(family: int, cls: int, seed) -> np.ndarray:
    """One input vector of class ``cls`` of ``family``."""
    return gen_family_samples(family, cls, 1, seed)[0]


@dataclass
class TaskSpec:
    task_id: int
    family: int
    classes: tuple
    n_train: int
    n_val: int
    n_test: int
    input_transform: list | None = None  # ["recolor", seed]
    label_transform: list | None = None  # ["permutation", seed]

    def __post_init__(self):
        self.classes = tuple(int(c) for c in self.classes)
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("task classes must be distinct")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        if self.input_transform is not None:
            self.input_transform = list(self.input_transform)
        if self.label_transform is not None:
            self.label_transform = list(self.label_transform)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d) -> "TaskSpec":
        return cls(**d)


@dataclass
class Stream:
    kind: str
    tasks: list
    seed: int
    scale: str = "desk"
    n_way: int = 5
    input_dim: int = INPUT_DIM

    def __len__(self):
        return len(self.tasks)

    def to_manifest(self) -> dict:
        return {
            "format_version": 1,
            "kind": self.kind,
            "scale": self.scale,
            "seed": self.seed,
            "n_way": self.n_way,
            "input_dim": self.input_dim,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "Stream":
        if m.get("format_version") != 1:
            raise ValueError(f"unsupported manifest version {m.get('format_version')!r}")
        return cls(m["kind"], [TaskSpec.from_dict(t) for t in m["tasks"]], m["seed"],
                   m.get("scale", "desk"), m.get("n_way", 5), m.get("input_dim", INPUT_DIM))


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        return iter((self.x, self.y))


@dataclass
class LabeledDataset:
    train: Split
    val: Split
    test: Split
    n_classes: int = field(default=0)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _balanced_counts(n: int, k: int) -> list:
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def _make_split(spec: TaskSpec, n: int, seed) -> Split:
    xs, ys = [], []
    for label, (cls, cnt) in enumerate(zip(spec.classes, _balanced_counts(n, spec.n_classes))):
        if cnt:
            xs.append(gen_family_samples(spec.family, cls, cnt, [*seed, label]))
            ys.append(np.full(cnt, label, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = np.random.default_rng([*seed, 999]).permutation(len(y))
    return Split(x[order], y[order])


def label_permutation(seed, n_classes: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ident = np.arange(n_classes)
    while True:
        perm = rng.permutation(n_classes)
        if n_classes < 2 or not np.array_equal(perm, ident):
            return perm


def recolor_offset(seed, width: int | None = None) -> np.ndarray:
    width = width if width is not None else BACKGROUND.stop - BACKGROUND.start
    return np.random.default_rng(seed).uniform(0.2, 0.4, size=width)


def apply_transforms(spec: TaskSpec, dataset: LabeledDataset) -> LabeledDataset:
    """Apply the task's input recolouring and/or label permutation."""
    out = {}
    perm = None
    if spec.label_transform is not None:
        kind, seed = spec.label_transform
        if kind != "permutation":
            raise ValueError(f"unknown label transform {kind!r}")
        perm = label_permutation(seed, spec.n_classes)
    offset = None
    if spec.input_transform is not None:
        kind, seed = spec.input_transform
        if kind != "recolor":
            raise ValueError(f"unknown input transform {kind!r}")
        offset = recolor_offset(seed)
    for name, split in dataset.splits().items():
        x, y = split.x, split.y
        if offset is not None:
            x = x.copy()
            x[:, BACKGROUND] += offset
        if perm is not None:
            y = perm[y]
        out[name] = Split(x, y)
    return LabeledDataset(out["train"], out["val"], out["test"], dataset.n_classes)


def make_dataset(spec: TaskSpec, stream_seed: int) -> LabeledDataset:
    base = [int(stream_seed), spec.task_id]
    ds = LabeledDataset(
        _make_split(spec, spec.n_train, base + [0]),
        _make_split(spec, spec.n_val, base + [1]),
        _make_split(spec, spec.n_test, base + [2]),
        spec.n_classes,
    )
    return apply_transforms(spec, ds)


def _scaled(sizes, scale: str, floor: int = 1):
    if scale == "paper":
        return tuple(sizes)
    if scale == "desk":
        return tuple(max(floor, s // DESK_FACTOR) for s in sizes)
    raise ValueError(f"scale must be 'paper' or 'desk', got {scale!r}")


def build_stream(kind: str, scale: str = "desk", seed: int = 0, n_way: int = 5,
                 n_tasks: int | None = None):
    """Return ``(Stream, [LabeledDataset, ...])`` for one of the templates."""
    kind = canonical_kind(kind)
    if scale not in ("paper", "desk"):
        raise ValueError(f"scale must be 'paper' or 'desk', got {scale!r}")
    rng = np.random.default_rng([int(seed), 7331])
    n_test = _scaled([TEST_SIZE], scale)[0]

    def classes():
        return tuple(int(c) for c in rng.choice(CLASSES_PER_FAMILY, size=n_way, replace=False))

    def spec(tid, fam, cls, sizes, **kw):
        ntr, nva = sizes
        return TaskSpec(tid, int(fam), cls, ntr, nva, n_test, **kw)

    tasks = []
    if kind == "Slong":
        total = n_tasks or (100 if scale == "paper" else 20)
        large = _scaled(LONG_LARGE, scale)
        small = LONG_SMALL  # the 25/15 floor is kept at every scale
        b1, b2 = total // 3, (2 * total) // 3
        for i in range(total):
            frac = 0.5 if i < b1 else 0.75 if i < b2 else 1.0
            is_small = rng.random() < frac
            fam = rng.integers(N_FAMILIES)
            tasks.append(spec(i, fam, classes(), small if is_small else large))
    else:
        n_fam = 5
        fams = rng.permutation(N_FAMILIES)[:n_fam]
        big, little, tiny = (_scaled(s, scale) for s in (LARGE, SMALL, TINY))
        if kind == "Spl":
            sizes = [little] * 4 + [big]
            tasks = [spec(i, fams[i], classes(), sizes[i]) for i in range(5)]
        else:
            first_size, last_size = {
                "S-": (big, little),
                "S+": (little, big),
                "Sin": (big, tiny),
                "Sout": (big, little),
            }[kind]
            first = spec(0, fams[0], classes(), first_size)
            tasks = [first] + [spec(i, fams[i], classes(), little) for i in range(1, 5)]
            kw = {}
            if kind == "Sin":
                kw["input_transform"] = ["recolor", int(rng.integers(2**31))]
            if kind == "Sout":
                kw["label_transform"] = ["permutation", int(rng.integers(2**31))]
            tasks.append(spec(5, first.family, first.classes, last_size, **kw))
    stream = Stream(kind, tasks, int(seed), scale, n_way, INPUT_DIM)
    return stream, [make_dataset(t, stream.seed) for t in tasks]


def materialize(stream: Stream) -> list:
    return [make_dataset(t, stream.seed) for t in stream.tasks]


# -- files ---------------------------------------------------------------------
def write_manifest(stream: Stream, path):
    FsPath(path).write_text(json.dumps(stream.to_manifest(), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> Stream:
    return Stream.from_manifest(json.loads(FsPath(path).read_text()))


def write_split_csv(split: Split, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x{i}" for i in range(split.x.shape[1])])
        for xi, yi in zip(split.x, split.y):
            w.writerow([int(yi)] + [repr(float(v)) for v in xi])


def read_split_csv(path) -> Split:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    y = np.array([int(r[0]) for r in body], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    if not body:
        x = np.zeros((0, len(rows[0]) - 1))
    return Split(x, y)


def export_dataset_csv(dataset: LabeledDataset, directory, task_id: int) -> list:
    directory = FsPath(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, split in dataset.splits().items():
        p = directory / f"task_{task_id:03d}_{name}.csv"
        write_split_csv(split, p)
        paths.append(p)
    return paths


def import_dataset_csv(directory, spec: TaskSpec) -> LabeledDataset:
    directory = FsPath(directory)
    sp = {n: read_split_csv(directory / f"task_{spec.task_id:03d}_{n}.csv") for n in ("train", "val", "test")}
    return LabeledDataset(sp["train"], sp["val"], sp["test"], spec.n_classes)


# -- IDX -------------------------------------------------------------------------
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = FsPath(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int) -> np.ndarray:
    if len(raw) < 4:
        raise IDXFormatError("file too short for magic number", len(raw))
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise IDXFormatError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError("truncated dimension header", len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise IDXFormatError(f"truncated payload: need {need} bytes, have {len(raw)}", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


@dataclass
class IdxSource:
    x: np.ndarray  # (N, rows*cols) in [0, 1]
    y: np.ndarray


def load_idx(images_path, labels_path) -> IdxSource:
    """Parse an IDX image/label file pair (optionally gzipped)."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels", 4)
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return IdxSource(x, labels.astype(np.int64))


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (N, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def dataset_from_source(source: IdxSource, classes, n_train: int, n_val: int, n_test: int,
                        seed) -> LabeledDataset:
    """Class-subset task drawn without replacement from real images."""
    rng = np.random.default_rng(seed)
    counts = [_balanced_counts(n, len(classes)) for n in (n_train, n_val, n_test)]
    parts = {0: ([], []), 1: ([], []), 2: ([], [])}
    for label, cls in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(source.y == cls))
        need = sum(c[label] for c in counts)
        if len(idx) < need:
            raise ValueError(f"class {cls} has {len(idx)} images, need {need}")
        start = 0
        for s in range(3):
            take = idx[start:start + counts[s][label]]
            start += counts[s][label]
            parts[s][0].append(source.x[take])
            parts[s][1].append(np.full(len(take), label, dtype=np.int64))
    splits = []
    for s in range(3):
        x = np.concatenate(parts[s][0])
        y = np.concatenate(parts[s][1])
        order = rng.permutation(len(y))
        splits.append(Split(x[order], y[order]))
    return LabeledDataset(*splits, n_classes=len(classes))
