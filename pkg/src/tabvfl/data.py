"""Dataset ingestion, preprocessing, partitioning, and batching.

All stages are pure functions over immutable inputs and deterministic
under fixed seeds.  Transforms are fitted once (on the rows passed as
``fit_indices``, normally the training portion) and replayed everywhere
else.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn_core import load_checkpoint, save_checkpoint

KINDS = ("numerical", "categorical", "binary", "label")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str


@dataclass
class DatasetSchema:
    """Column kinds in file order; exactly one label column."""

    columns: list[ColumnSpec]

    def __post_init__(self):
        for col in self.columns:
            if col.kind not in KINDS:
                raise DataError(f"column {col.name!r}: unknown kind {col.kind!r}")
        labels = [c for c in self.columns if c.kind == "label"]
        if len(labels) != 1:
            raise DataError(
                f"schema must have exactly one label column, found {len(labels)}")

    @property
    def label_column(self) -> str:
        return next(c.name for c in self.columns if c.kind == "label")

    def kind_of(self, name: str) -> str:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise DataError(f"unknown column {name!r}")

    @staticmethod
    def from_mapping(mapping: dict[str, str]) -> "DatasetSchema":
        return DatasetSchema([ColumnSpec(n, k) for n, k in mapping.items()])

    @staticmethod
    def load_json(path) -> "DatasetSchema":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                mapping = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"schema file not found: {path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"schema file {path} is not valid JSON: {exc}")
        if not isinstance(mapping, dict):
            raise DataError("schema JSON must map column name -> kind")
        return DatasetSchema.from_mapping(mapping)


@dataclass
class RawTable:
    """Typed columns straight from the CSV, in file order."""

    order: list[str]
    numeric: dict[str, np.ndarray]
    text: dict[str, list[str]]
    n_rows: int

    def select(self, rows: np.ndarray) -> "RawTable":
        rows = np.asarray(rows)
        return RawTable(
            list(self.order),
            {k: v[rows] for k, v in self.numeric.items()},
            {k: [v[i] for i in rows] for k, v in self.text.items()},
            len(rows))


def load_csv(path, schema: DatasetSchema) -> RawTable:
    """Parse a UTF-8, comma-delimited CSV with a header row.

    Missing values are rejected; numeric parse failures name the row and
    column.  The file's column order becomes the canonical order.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise DataError(f"csv file not found: {path}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        schema_names = {c.name for c in schema.columns}
        if set(header) != schema_names or len(header) != len(schema_names):
            raise DataError(
                f"{path}: header {header} does not match schema columns "
                f"{sorted(schema_names)}")
        kinds = {c.name: c.kind for c in schema.columns}
        raw_columns: list[list[str]] = [[] for _ in header]
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{row_no}: expected {len(header)} "
                                f"fields, got {len(row)}")
            for j, value in enumerate(row):
                if value == "":
                    raise DataError(
                        f"{path}:{row_no}: missing value in column "
                        f"{header[j]!r}")
                raw_columns[j].append(value)
    n_rows = len(raw_columns[0]) if raw_columns else 0
    numeric: dict[str, np.ndarray] = {}
    text: dict[str, list[str]] = {}
    for j, name in enumerate(header):
        if kinds[name] == "numerical":
            values = np.empty(n_rows)
            for i, token in enumerate(raw_columns[j]):
                try:
                    values[i] = float(token)
                except ValueError:
                    raise DataError(
                        f"{path}:{i + 2}: non-numeric value {token!r} in "
                        f"numerical column {name!r}")
            numeric[name] = values
        else:
            text[name] = raw_columns[j]
    return RawTable(list(header), numeric, text, n_rows)


@dataclass
class Block:
    """One encoded column block (a one-hot block stays contiguous)."""

    name: str
    kind: str
    width: int


@dataclass
class PreparedDataset:
    """Encoded feature matrix plus fitted transform parameters."""

    features: np.ndarray
    labels: np.ndarray
    blocks: list[Block]
    transforms: dict
    classes: list[str]

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def select(self, rows: np.ndarray) -> "PreparedDataset":
        return PreparedDataset(self.features[rows], self.labels[rows],
                               self.blocks, self.transforms, self.classes)


def preprocess(raw: RawTable, schema: DatasetSchema,
               fit_indices: np.ndarray | None = None) -> PreparedDataset:
    """Encode a raw table: scale numerics, one-hot categoricals, code
    binaries and labels.

    Category and binary codes are assigned lexicographically from the
    fitted rows; an unseen category encodes as an all-zero block, an
    unseen label is an error.
    """
    if raw.n_rows == 0:
        raise DataError("cannot preprocess an empty table")
    fit = np.arange(raw.n_rows) if fit_indices is None else np.asarray(fit_indices)
    if fit.size == 0:
        raise DataError("fit_indices must not be empty")
    feature_cols: list[np.ndarray] = []
    blocks: list[Block] = []
    transforms: dict = {}
    labels = None
    classes: list[str] = []
    for name in raw.order:
        kind = schema.kind_of(name)
        if kind == "numerical":
            col = raw.numeric[name]
            mean = float(col[fit].mean())
            std = float(col[fit].std())
            divisor = 1.0 if std < 1e-8 else std
            transforms[name] = {"kind": kind, "mean": mean, "std": divisor}
            feature_cols.append((col - mean) / divisor)
            blocks.append(Block(name, kind, 1))
        elif kind == "binary":
            values = raw.text[name]
            seen = sorted(set(values[i] for i in fit))
            if len(seen) != 2:
                raise DataError(
                    f"binary column {name!r} has {len(seen)} distinct fitted "
                    "values, expected 2")
            code = {seen[0]: 0.0, seen[1]: 1.0}
            try:
                encoded = np.array([code[v] for v in values])
            except KeyError as exc:
                raise DataError(
                    f"binary column {name!r}: unseen value {exc.args[0]!r}")
            transforms[name] = {"kind": kind, "values": seen}
            feature_cols.append(encoded)
            blocks.append(Block(name, kind, 1))
        elif kind == "categorical":
            values = raw.text[name]
            vocab = sorted(set(values[i] for i in fit))
            index = {v: i for i, v in enumerate(vocab)}
            block = np.zeros((raw.n_rows, len(vocab)))
            for i, v in enumerate(values):
                j = index.get(v)
                if j is not None:  # unseen category -> all-zero row
                    block[i, j] = 1.0
            transforms[name] = {"kind": kind, "vocabulary": vocab}
            feature_cols.append(block)
            blocks.append(Block(name, kind, len(vocab)))
        else:  # label
            values = raw.text[name]
            classes = sorted(set(values[i] for i in fit))
            index = {v: i for i, v in enumerate(classes)}
            try:
                labels = np.array([index[v] for v in values], dtype=np.int64)
            except KeyError as exc:
                raise DataError(f"unseen label class {exc.args[0]!r}")
            transforms[name] = {"kind": kind, "classes": classes}
    features = np.column_stack([c.reshape(raw.n_rows, -1) for c in feature_cols])
    return PreparedDataset(np.ascontiguousarray(features), labels, blocks,
                           transforms, classes)


def stratified_sample_indices(labels: np.ndarray, target_n: int,
                              rng: np.random.Generator) -> np.ndarray:
    """Row indices of a stratified subsample, in original row order.

    Largest-remainder apportionment fixes the per-class counts; rows are
    then drawn without replacement.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if target_n > n:
        raise DataError(f"target_n {target_n} exceeds dataset size {n}")
    if target_n == n:
        return np.arange(n)
    values = np.unique(labels)
    class_rows = {c: np.flatnonzero(labels == c) for c in values}
    quotas = {c: target_n * len(rows) / n for c, rows in class_rows.items()}
    counts = {c: int(np.floor(q)) for c, q in quotas.items()}
    shortfall = target_n - sum(counts.values())
    remainders = sorted(quotas, key=lambda c: quotas[c] - counts[c], reverse=True)
    for c in remainders[:shortfall]:
        counts[c] += 1
    if any(counts[c] == 0 for c in class_rows):
        raise DataError("a class would receive zero samples after rounding")
    chosen = [rng.choice(class_rows[c], size=counts[c], replace=False)
              for c in values]  # np.unique already sorted the class values
    return np.sort(np.concatenate(chosen))


def stratified_downsample(prepared: PreparedDataset, target_n: int,
                          rng: np.random.Generator) -> PreparedDataset:
    """Row subsample preserving per-class proportions within one sample."""
    keep = stratified_sample_indices(prepared.labels, target_n, rng)
    return prepared.select(keep)


def vertical_partition(n_features: int, n_guests: int) -> list[tuple[int, int]]:
    """Contiguous column ranges, sizes differing by at most one, larger
    shares to lower guest ids."""
    if n_guests < 1:
        raise DataError("need at least one guest")
    if n_features < n_guests:
        raise DataError(
            f"cannot split {n_features} features across {n_guests} guests")
    base, extra = divmod(n_features, n_guests)
    ranges = []
    start = 0
    for i in range(n_guests):
        width = base + (1 if i < extra else 0)
        ranges.append((start, start + width))
        start += width
    return ranges


def partition_blocks(block_widths: list[int], n_guests: int) -> list[tuple[int, int]]:
    """Best-effort uniform column ranges that never split an encoded block.

    Cut points snap to block boundaries nearest the ideal uniform cuts, so
    partition sizes may differ by up to one block width.
    """
    n_blocks = len(block_widths)
    if n_blocks < n_guests:
        raise DataError(
            f"cannot split {n_blocks} feature blocks across {n_guests} guests")
    total = sum(block_widths)
    prefix = np.concatenate([[0], np.cumsum(block_widths)])
    ideals = [b for _, b in vertical_partition(total, n_guests)][:-1]
    cuts = [0]
    prev = 0
    for i, ideal in enumerate(ideals):
        lo = prev + 1
        hi = n_blocks - (n_guests - i - 1)
        # nearest feasible block boundary; ties keep the larger share on
        # the lower guest id, matching the plain uniform rule
        best = min(range(lo, hi + 1),
                   key=lambda j: (abs(prefix[j] - ideal), -prefix[j]))
        cuts.append(best)
        prev = best
    cuts.append(n_blocks)
    return [(int(prefix[a]), int(prefix[b])) for a, b in zip(cuts, cuts[1:])]


def split_indices(n: int, ratios: tuple[float, ...],
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded permutation split; sizes floor to integers, remainder to the
    last part."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    perm = rng.permutation(n)
    sizes = [int(np.floor(n * r)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    out = []
    start = 0
    for s in sizes:
        out.append(np.sort(perm[start:start + s]))
        start += s
    return out


@dataclass
class DataSplits:
    """Train/val/test views plus the train-batch layout."""

    train: PreparedDataset
    val: PreparedDataset
    test: PreparedDataset
    batch_size: int
    shuffle: bool
    _shuffle_seed: int = 0
    batch_bounds: list[tuple[int, int]] = field(default_factory=list)

    def epoch_batches(self, epoch: int = 0) -> list[np.ndarray]:
        """Row-index arrays per batch; order is fixed when shuffle is off."""
        if not self.shuffle:
            return [np.arange(lo, hi) for lo, hi in self.batch_bounds]
        rng = np.random.default_rng(
            np.random.SeedSequence([self._shuffle_seed, epoch]))
        perm = rng.permutation(self.train.n_rows)
        return [perm[lo:hi] for lo, hi in self.batch_bounds]


def batch_bounds(n_rows: int, batch_size: int) -> list[tuple[int, int]]:
    """Equal-size batches, final short batch allowed but dropped at size 1."""
    bounds = []
    for lo in range(0, n_rows, batch_size):
        hi = min(lo + batch_size, n_rows)
        if hi - lo >= 2:
            bounds.append((lo, hi))
    return bounds


def split_and_batch(prepared: PreparedDataset, ratios: tuple[float, float, float],
                    batch_size: int, shuffle: bool,
                    rng: np.random.Generator) -> DataSplits:
    """Deterministic train/val/test split plus the train batch iterator."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (batch norm needs variance)")
    train_idx, val_idx, test_idx = split_indices(prepared.n_rows, ratios, rng)
    if min(len(train_idx), len(val_idx), len(test_idx)) == 0:
        raise DataError("a split would be empty; dataset too small for ratios")
    splits = DataSplits(prepared.select(train_idx), prepared.select(val_idx),
                        prepared.select(test_idx), batch_size, shuffle,
                        _shuffle_seed=int(rng.integers(2 ** 31)))
    splits.batch_bounds = batch_bounds(splits.train.n_rows, batch_size)
    if not splits.batch_bounds:
        raise DataError("training split yields no usable batches")
    return splits


# --------------------------------------------------------------------------
# prepared-dataset cache files

def save_prepared(prepared: PreparedDataset, data_path, manifest_path):
    """Binary matrix dump (checkpoint layout) plus a JSON manifest."""
    save_checkpoint(data_path, [
        ("features", prepared.features),
        ("labels", prepared.labels.astype(np.float64).reshape(-1, 1)),
    ])
    manifest = {
        "blocks": [[b.name, b.kind, b.width] for b in prepared.blocks],
        "transforms": prepared.transforms,
        "classes": prepared.classes,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_prepared(data_path, manifest_path) -> PreparedDataset:
    try:
        matrices = load_checkpoint(data_path)
    except FileNotFoundError:
        raise DataError(f"prepared cache not found: {data_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"prepared manifest not found: {manifest_path}")
    blocks = [Block(n, k, w) for n, k, w in manifest["blocks"]]
    return PreparedDataset(
        matrices["features"],
        matrices["labels"].reshape(-1).astype(np.int64),
        blocks, manifest["transforms"], manifest["classes"])


# --------------------------------------------------------------------------
# synthetic fixture

def synthetic_cross_partition(n_rows: int = 4000, n_features: int = 20,
                              seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Features i.i.d. standard normal; the label couples columns that land
    on different guests under a uniform two-way split, so purely local
    pretraining cannot expose the decision signal to a linear head."""
    if n_features < 4 or n_features % 2:
        raise ConfigError("fixture needs an even feature count >= 4")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_rows, n_features))
    half = n_features // 2
    y = (x[:, 0] * x[:, half] + x[:, 1] * x[:, half + 1] > 0).astype(np.int64)
    return x, y


def prepared_from_arrays(features: np.ndarray, labels: np.ndarray,
                         class_names: list[str] | None = None) -> PreparedDataset:
    """Wrap in-memory numeric arrays as a PreparedDataset (test fixtures)."""
    features = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if class_names is None else len(class_names)
    names = class_names or [str(i) for i in range(n_classes)]
    blocks = [Block(f"x{i}", "numerical", 1) for i in range(features.shape[1])]
    transforms = {f"x{i}": {"kind": "numerical", "mean": 0.0, "std": 1.0}
                  for i in range(features.shape[1])}
    return PreparedDataset(features, labels, blocks, transforms, names)


def write_fixture_csv(csv_path, schema_path, n_rows: int = 4000,
                      n_features: int = 20, seed: int = 0):
    """Materialize the synthetic fixture as CSV + schema JSON files."""
    x, y = synthetic_cross_partition(n_rows, n_features, seed)
    names = [f"x{i}" for i in range(n_features)]
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["target"])
        for i in range(n_rows):
            writer.writerow([f"{v:.17g}" for v in x[i]] + [str(int(y[i]))])
    schema = {name: "numerical" for name in names}
    schema["target"] = "label"
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=1)
        fh.write("\n")
