"""Dataset files, exposure vectors and checkpoint persistence.

Layout of a dataset directory::

    interactions_biased.tsv    user_id  item_id  rating  split(=train)
    interactions_unbiased.tsv  user_id  item_id  rating  split(valid|test)
    user_features.tsv          user_id  w        (or w1 .. wp for real vectors)
    truth.tsv                  user_id  z1  z2   (synthetic data only)

Raw ids are arbitrary strings; dense ids follow first-occurrence order over
user_features.tsv, then the biased file, then the unbiased file.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError, DataError, DuplicateError, ParseError, VersionError

SPLITS = ("train", "valid", "test")
BIASED_FILE = "interactions_biased.tsv"
UNBIASED_FILE = "interactions_unbiased.tsv"
FEATURES_FILE = "user_features.tsv"
TRUTH_FILE = "truth.tsv"
CKPT_HEADER = "IDCF-CKPT v1"


def fmt_float(x) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(x))


def write_tsv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Interaction logs
# ---------------------------------------------------------------------------


@dataclass
class IdMap:
    """Raw id -> dense id, in first-occurrence order."""

    raw: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    def add(self, key: str) -> int:
        idx = self.index.get(key)
        if idx is None:
            idx = len(self.raw)
            self.index[key] = idx
            self.raw.append(key)
        return idx

    def __len__(self):
        return len(self.raw)


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    splits: np.ndarray  # codes into SPLITS
    user_map: IdMap
    item_map: IdMap

    @property
    def num_users(self) -> int:
        return len(self.user_map)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    def __len__(self):
        return len(self.users)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.splits == SPLITS.index(name)
        return self.users[mask], self.items[mask], self.ratings[mask]

    def records(self) -> list[tuple[str, str, float, str]]:
        """Records in raw-id space, for comparisons independent of remapping."""
        return [
            (self.user_map.raw[u], self.item_map.raw[i], float(r), SPLITS[s])
            for u, i, r, s in zip(self.users, self.items, self.ratings, self.splits)
        ]


def _parse_number(text: str, path, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, line, f"{what} {text!r} is not a number") from None
    if not np.isfinite(value):
        raise ParseError(path, line, f"{what} must be finite")
    return value


def _read_table(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Header plus (line number, fields) for every non-empty body line."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(path, 1, "missing header") from None
            body = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    return header, body


def load_interactions(
    path,
    user_map: Optional[IdMap] = None,
    item_map: Optional[IdMap] = None,
    default_split: str = "train",
) -> InteractionLog:
    """Parse one interactions TSV. Columns: user_id, item_id, rating and an
    optional split column. Passing shared id maps lets several files agree on
    dense ids."""
    user_map = IdMap() if user_map is None else user_map
    item_map = IdMap() if item_map is None else item_map
    users, items, ratings, splits = [], [], [], []
    seen = set()
    header, body = _read_table(path)
    if header[:3] != ["user_id", "item_id", "rating"]:
        raise ParseError(path, 1, "header must start with user_id, item_id, rating")
    has_split = len(header) > 3 and header[3] == "split"
    for lineno, row in body:
        if len(row) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} columns, got {len(row)}")
        split = row[3] if has_split else default_split
        if split not in SPLITS:
            raise ParseError(path, lineno, f"unknown split {split!r}")
        rating = _parse_number(row[2], path, lineno, "rating")
        key = (row[0], row[1], split)
        if key in seen:
            raise DuplicateError(f"{path}:{lineno}: duplicate record for user {row[0]}, item {row[1]}, split {split}")
        seen.add(key)
        users.append(user_map.add(row[0]))
        items.append(item_map.add(row[1]))
        ratings.append(rating)
        splits.append(SPLITS.index(split))
    return InteractionLog(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(ratings, dtype=np.float64),
        np.array(splits, dtype=np.int64),
        user_map,
        item_map,
    )


def concat_logs(logs: list[InteractionLog]) -> InteractionLog:
    """Concatenate logs that share id maps."""
    base = logs[0]
    for log in logs[1:]:
        if log.user_map is not base.user_map or log.item_map is not base.item_map:
            raise DataError("logs must share id maps to be concatenated")
    seen = set()
    for log in logs:
        for key in zip(log.users.tolist(), log.items.tolist(), log.splits.tolist()):
            if key in seen:
                raise DuplicateError(f"duplicate record across files: {key}")
            seen.add(key)
    return InteractionLog(
        np.concatenate([l.users for l in logs]),
        np.concatenate([l.items for l in logs]),
        np.concatenate([l.ratings for l in logs]),
        np.concatenate([l.splits for l in logs]),
        base.user_map,
        base.item_map,
    )


def build_exposure(log: InteractionLog) -> np.ndarray:
    """a[u, i] = 1 iff (u, i) has a train record."""
    a = np.zeros((log.num_users, log.num_items), dtype=np.float64)
    u, i, _ = log.split("train")
    a[u, i] = 1.0
    return a


# ---------------------------------------------------------------------------
# Proxy features
# ---------------------------------------------------------------------------


@dataclass
class ProxyTable:
    """Per-user proxy: either one categorical level or a real vector.

    ``values`` is (m,) of level labels for categorical proxies and (m, p)
    floats otherwise. ``encoded()`` gives the network input.
    """

    values: np.ndarray
    categorical: bool
    levels: tuple = ()

    @classmethod
    def from_levels(cls, values) -> "ProxyTable":
        values = np.asarray(values)
        levels = tuple(sorted(set(values.tolist())))
        return cls(values, True, levels)

    @property
    def dim(self) -> int:
        if self.categorical:
            return len(self.levels)
        return self.values.shape[1]

    def encoded(self) -> np.ndarray:
        if not self.categorical:
            return np.asarray(self.values, dtype=np.float64)
        lookup = {lv: k for k, lv in enumerate(self.levels)}
        out = np.zeros((len(self.values), len(self.levels)))
        out[np.arange(len(self.values)), [lookup[v] for v in self.values.tolist()]] = 1.0
        return out


def load_user_features(path, user_map: IdMap) -> tuple[dict[int, list[str]], list[str]]:
    rows = {}
    header, body = _read_table(path)
    if header[0] != "user_id" or len(header) < 2:
        raise ParseError(path, 1, "header must be user_id followed by feature columns")
    for lineno, row in body:
        if len(row) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} columns, got {len(row)}")
        uid = user_map.add(row[0])
        if uid in rows:
            raise DuplicateError(f"{path}:{lineno}: duplicate user {row[0]}")
        rows[uid] = row[1:]
    return rows, header


def _proxy_from_rows(rows, header, num_users: int, path) -> ProxyTable:
    missing = [u for u in range(num_users) if u not in rows]
    if missing:
        raise DataError(f"{path}: no features for {len(missing)} user(s), first dense id {missing[0]}")
    cols = header[1:]
    if cols == ["w"]:
        raw = [rows[u][0] for u in range(num_users)]
        try:
            values = np.array([int(v) for v in raw])
        except ValueError:
            values = np.array(raw)
        return ProxyTable.from_levels(values)
    values = np.array([[float(v) for v in rows[u]] for u in range(num_users)], dtype=np.float64)
    return ProxyTable(values, False)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    log: InteractionLog
    proxy: Optional[ProxyTable]
    truth: Optional[np.ndarray] = None  # (m, d) ground-truth confounders, when known
    _exposure: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_users(self) -> int:
        return self.log.num_users

    @property
    def num_items(self) -> int:
        return self.log.num_items

    @property
    def exposure(self) -> np.ndarray:
        if self._exposure is None:
            self._exposure = build_exposure(self.log)
        return self._exposure

    def proxy_matrix(self) -> np.ndarray:
        if self.proxy is None:
            return np.zeros((self.num_users, 0))
        return self.proxy.encoded()

    def split(self, name: str):
        return self.log.split(name)

    @classmethod
    def from_bundle(cls, bundle) -> "Dataset":
        """In-memory view of a synthetic bundle with identity id maps."""
        users = IdMap()
        for u in range(bundle.num_users):
            users.add(str(u))
        items = IdMap()
        for i in range(bundle.num_items):
            items.add(str(i))
        parts = [bundle.train, bundle.valid, bundle.test]
        log = InteractionLog(
            np.concatenate([p[0] for p in parts]).astype(np.int64),
            np.concatenate([p[1] for p in parts]).astype(np.int64),
            np.concatenate([p[2] for p in parts]).astype(np.float64),
            np.concatenate([np.full(len(p[0]), k) for k, p in enumerate(parts)]).astype(np.int64),
            users,
            items,
        )
        truth = None if bundle.truth is None else bundle.truth.z
        return cls(log, ProxyTable.from_levels(bundle.proxy), truth)


def write_dataset(bundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def rows(part, split):
        for u, i, r in zip(*part):
            yield (int(u), int(i), int(r), split)

    header = ["user_id", "item_id", "rating", "split"]
    write_tsv(d / BIASED_FILE, header, rows(bundle.train, "train"))

    unbiased = list(rows(bundle.valid, "valid")) + list(rows(bundle.test, "test"))
    unbiased.sort(key=lambda r: (r[0], r[1], r[3]))
    write_tsv(d / UNBIASED_FILE, header, unbiased)
    write_tsv(d / FEATURES_FILE, ["user_id", "w"], ((u, int(w)) for u, w in enumerate(bundle.proxy)))
    if bundle.truth is not None:
        z = bundle.truth.z
        write_tsv(
            d / TRUTH_FILE,
            ["user_id"] + [f"z{k + 1}" for k in range(z.shape[1])],
            ((u, *map(fmt_float, z[u])) for u in range(len(z))),
        )


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in (BIASED_FILE, UNBIASED_FILE):
        if not (d / name).exists():
            raise DataError(f"missing dataset file {d / name}")
    users, items = IdMap(), IdMap()
    feature_rows, feature_header = None, None
    if (d / FEATURES_FILE).exists():
        feature_rows, feature_header = load_user_features(d / FEATURES_FILE, users)
    logs = [
        load_interactions(d / BIASED_FILE, users, items, default_split="train"),
        load_interactions(d / UNBIASED_FILE, users, items, default_split="test"),
    ]
    log = concat_logs(logs)
    proxy = None
    if feature_rows is not None:
        proxy = _proxy_from_rows(feature_rows, feature_header, log.num_users, d / FEATURES_FILE)
    truth = None
    if (d / TRUTH_FILE).exists():
        truth = load_truth(d / TRUTH_FILE, users)
    return Dataset(log, proxy, truth)


def load_truth(path, user_map: IdMap) -> np.ndarray:
    rows = {}
    header, body = _read_table(path)
    width = len(header) - 1
    for lineno, row in body:
        if len(row) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} columns, got {len(row)}")
        if row[0] not in user_map.index:
            raise ParseError(path, lineno, f"unknown user {row[0]!r}")
        rows[user_map.index[row[0]]] = [_parse_number(v, path, lineno, "latent") for v in row[1:]]
    if len(rows) != len(user_map):
        raise DataError(f"{path}: truth must cover every user")
    return np.array([rows[u] for u in range(len(user_map))], dtype=np.float64).reshape(len(user_map), width)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, kind: str, tensors: list[tuple[str, np.ndarray]]) -> None:
    lines = [CKPT_HEADER, f"model {kind}"]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        if mat.ndim != 2:
            raise CheckpointError(f"tensor {name} must be 1-d or 2-d")
        if not np.all(np.isfinite(mat)):
            raise CheckpointError(f"tensor {name} has non-finite entries")
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(fmt_float(v) for v in row) for row in mat)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[str, list[tuple[str, np.ndarray]]]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not lines or lines[0] != CKPT_HEADER:
        raise VersionError(f"{path}: expected header {CKPT_HEADER!r}, got {lines[0][:40]!r}")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2 or not lines[1].startswith("model "):
        raise CheckpointError(f"{path}: missing model line")
    kind = lines[1][len("model ") :]
    tensors = []
    pos = 2
    while pos < len(lines):
        parts = lines[pos].split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{pos + 1}: bad tensor header {lines[pos]!r}")
        name = parts[0]
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise CheckpointError(f"{path}:{pos + 1}: bad tensor shape") from None
        body = lines[pos + 1 : pos + 1 + rows]
        if len(body) != rows:
            raise CheckpointError(f"{path}: tensor {name} truncated")
        try:
            data = [[float(v) for v in line.split(" ")] if cols else [] for line in body]
        except ValueError:
            raise CheckpointError(f"{path}: tensor {name} has malformed values") from None
        if any(len(r) != cols for r in data):
            raise CheckpointError(f"{path}: tensor {name} rows do not have {cols} values")
        tensors.append((name, np.array(data, dtype=np.float64).reshape(rows, cols)))
        pos += 1 + rows
    return kind, tensors


def save_checkpoint(model, path) -> None:
    write_checkpoint(path, model.kind, model.to_tensors())


def load_checkpoint(path):
    from .confounder import IvaeModel, VaeModel
    from .feedback import BaselineModel, FeedbackModel

    registry = {cls.kind: cls for cls in (IvaeModel, VaeModel, FeedbackModel)}
    registry["mf"] = BaselineModel
    registry["mf-wf"] = BaselineModel
    kind, tensors = read_checkpoint(path)
    if kind not in registry:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return registry[kind].from_tensors(tensors, kind=kind)


def check_tensor_order(found: list[str], expected: list[str]) -> None:
    if found != expected:
        raise CheckpointError(f"checkpoint tensors {found} do not match expected order {expected}")
