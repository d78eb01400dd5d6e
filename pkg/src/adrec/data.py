"""Interaction-log ingestion, k-core filtering, user splits, batching.

The on-disk processed form is a directory holding a JSON manifest plus
flat little-endian binary ID arrays (documented in save_dataset), stable
across runs for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_CODES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass
class RawInteraction:
    user: str
    item: str
    timestamp: int
    rating: float | None = None


@dataclass
class InteractionDataset:
    """Chronological per-user item-ID sequences with a dense item vocabulary.

    Item ids start at 1 (0 is padding). Sequences are stored already
    truncated to the most recent ``max_len`` items; ``stats`` counts the
    untruncated post-filter interactions.
    """

    item_vocab: dict[str, int]
    users: list[str]
    user_sequences: list[list[int]]
    max_len: int
    stats: dict
    split: np.ndarray | None = None
    split_seed: int | None = None
    split_ratios: tuple[int, int, int] = (8, 1, 1)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def rows_for_split(self, split: str) -> np.ndarray:
        if split not in SPLIT_CODES:
            raise DataError(f"unknown split {split!r}; expected train/val/test")
        if self.split is None:
            raise DataError("dataset has no split assignment; run split_users first")
        return np.nonzero(self.split == SPLIT_CODES[split])[0]


@dataclass
class SequenceBatch:
    """Left-padded histories with one-position-shifted targets.

    target_ids[b, k] == history_ids[b, k+1] at interior positions; the
    last valid column's target is the next item after the history, which
    is the evaluation target for val/test rows.
    """

    history_ids: np.ndarray
    target_ids: np.ndarray
    pad_mask: np.ndarray
    user_rows: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.history_ids.shape[0]


def _split_line(line: str, delim: str) -> list[str]:
    return [c.strip() for c in line.rstrip("\n").rstrip("\r").split(delim)]


def ingest(path: str | Path, fmt: str | None = None) -> list[RawInteraction]:
    """Parse a TSV/CSV interaction log.

    Columns are user, item, timestamp, or the 4-column MovieLens layout
    user, item, rating, timestamp. A header line is auto-detected. Any
    malformed row raises a DataError naming its line number.
    """
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines()]
    if fmt is None:
        probe = next((ln for ln in lines if ln.strip()), "")
        delim = "\t" if "\t" in probe else ","
    else:
        if fmt not in ("tsv", "csv"):
            raise DataError(f"unknown format {fmt!r}; expected tsv or csv")
        delim = "\t" if fmt == "tsv" else ","

    def parse(cells: list[str], lineno: int) -> RawInteraction:
        if len(cells) == 3:
            user, item, ts = cells
            rating = None
        elif len(cells) == 4:
            user, item, rating_s, ts = cells
            try:
                rating = float(rating_s)
            except ValueError:
                raise DataError(f"{path.name}:{lineno}: rating {rating_s!r} is not a number")
        else:
            raise DataError(f"{path.name}:{lineno}: expected 3 or 4 columns, got {len(cells)}")
        if not user or not item:
            raise DataError(f"{path.name}:{lineno}: empty user or item field")
        try:
            timestamp = int(ts)
        except ValueError:
            raise DataError(f"{path.name}:{lineno}: timestamp {ts!r} is not an integer")
        return RawInteraction(user, item, timestamp, rating)

    rows: list[RawInteraction] = []
    start = 0
    for idx, line in enumerate(lines):
        if line.strip():
            start = idx
            break
    else:
        raise DataError(f"{path}: empty interaction file")
    # header detection: the first non-blank line is a header iff it fails to parse
    try:
        rows.append(parse(_split_line(lines[start], delim), start + 1))
    except DataError:
        start += 1
    for idx in range(start + (1 if rows else 0), len(lines)):
        line = lines[idx]
        if not line.strip():
            continue
        rows.append(parse(_split_line(line, delim), idx + 1))
    if not rows:
        raise DataError(f"{path}: no interactions parsed")
    return rows


def filter_min_rating(interactions: list[RawInteraction], min_rating: float) -> list[RawInteraction]:
    """Keep rows whose rating is at least min_rating (rows must carry one)."""
    missing = sum(1 for r in interactions if r.rating is None)
    if missing:
        raise DataError(f"min_rating set but {missing} rows have no rating column")
    return [r for r in interactions if r.rating >= min_rating]


def k_core_filter(interactions: list[RawInteraction], k: int = 5,
                  max_len: int = 50) -> InteractionDataset:
    """Drop users/items with < k interactions until the fixpoint, then build sequences.

    The fixpoint is order-independent; sequences come out chronological
    (file order breaks timestamp ties) and truncated to the most recent
    max_len items. Stats count the untruncated surviving interactions.
    """
    if k < 1:
        raise DataError(f"k-core requires k >= 1, got {k}")
    alive = list(interactions)
    while True:
        user_deg = Counter(r.user for r in alive)
        item_deg = Counter(r.item for r in alive)
        kept = [r for r in alive if user_deg[r.user] >= k and item_deg[r.item] >= k]
        if len(kept) == len(alive):
            break
        alive = kept
    if not alive:
        raise DataError(f"{k}-core filtering removed the whole dataset")

    # group by user in order of first appearance; items get dense ids the same way
    user_first: dict[str, int] = {}
    item_vocab: dict[str, int] = {}
    for r in alive:
        if r.user not in user_first:
            user_first[r.user] = len(user_first)
        if r.item not in item_vocab:
            item_vocab[r.item] = len(item_vocab) + 1
    users = list(user_first)

    per_user: list[list[tuple[int, int, int]]] = [[] for _ in users]
    for file_order, r in enumerate(alive):
        per_user[user_first[r.user]].append((r.timestamp, file_order, item_vocab[r.item]))

    sequences: list[list[int]] = []
    for rows in per_user:
        rows.sort()  # timestamp, then input-file order
        seq = [item for _, _, item in rows]
        sequences.append(seq[-max_len:])

    n_users, n_items, n_inter = len(users), len(item_vocab), len(alive)
    stats = {
        "users": n_users,
        "items": n_items,
        "interactions": n_inter,
        "avg_length": n_inter / n_users,
        "sparsity": 1.0 - n_inter / (n_users * n_items),
    }
    return InteractionDataset(item_vocab, users, sequences, max_len, stats)


def split_users(dataset: InteractionDataset, ratios: tuple[int, int, int] = (8, 1, 1),
                seed: int = 0) -> InteractionDataset:
    """Shuffle users by seed, then cut at floored cumulative ratio boundaries.

    Order of assignment is train, val, test; with (8,1,1) and n users the
    boundaries sit at floor(.8 n) and floor(.9 n).
    """
    if any(r <= 0 for r in ratios):
        raise DataError(f"split ratios must be positive, got {ratios}")
    n = dataset.n_users
    if n < 3:
        raise DataError(f"need at least 3 users to split, got {n}")
    total = sum(ratios)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    b1 = int(np.floor(n * ratios[0] / total))
    b2 = int(np.floor(n * (ratios[0] + ratios[1]) / total))
    split = np.empty(n, dtype=np.uint8)
    split[perm[:b1]] = TRAIN
    split[perm[b1:b2]] = VAL
    split[perm[b2:]] = TEST
    dataset.split = split
    dataset.split_seed = seed
    dataset.split_ratios = tuple(ratios)
    return dataset


def pack_rows(dataset: InteractionDataset, rows: np.ndarray) -> SequenceBatch:
    """Left-pad the selected sequences into one history/target batch."""
    length = dataset.max_len
    b = len(rows)
    history = np.zeros((b, length), dtype=np.int64)
    targets = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=np.float64)
    for out_i, row in enumerate(rows):
        seq = dataset.user_sequences[row]
        n = len(seq)
        history[out_i, length - (n - 1):] = seq[:-1]
        targets[out_i, length - (n - 1):] = seq[1:]
        mask[out_i, length - (n - 1):] = 1.0
    return SequenceBatch(history, targets, mask, np.asarray(rows))


def iter_batches(dataset: InteractionDataset, split: str, batch_size: int = 512,
                 shuffle_seed: int | None = None) -> Iterator[SequenceBatch]:
    """Stream left-padded batches for one split; train order is shuffled by seed."""
    rows = dataset.rows_for_split(split)
    eligible = np.array([r for r in rows if len(dataset.user_sequences[r]) >= 2], dtype=np.int64)
    skipped = len(rows) - len(eligible)
    if skipped:
        log.warning("skipped %d %s sequences shorter than 2 items", skipped, split)
    if shuffle_seed is not None:
        eligible = eligible[np.random.default_rng(shuffle_seed).permutation(len(eligible))]
    for lo in range(0, len(eligible), batch_size):
        yield pack_rows(dataset, eligible[lo:lo + batch_size])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _payload_sha256(outdir: Path, names: list[str]) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update(name.encode())
        h.update((outdir / name).read_bytes())
    return h.hexdigest()


PAYLOAD_FILES = ["items.tsv", "users.tsv", "seq_lengths.bin", "seq_items.bin"]


def save_dataset(dataset: InteractionDataset, outdir: str | Path,
                 extra_manifest: dict | None = None) -> dict:
    """Write the processed-dataset directory; returns the manifest.

    Layout: manifest.json; items.tsv (dense_id<TAB>raw_item); users.tsv
    (row<TAB>raw_user<TAB>split); seq_lengths.bin (int32 LE, one per
    user); seq_items.bin (int32 LE, concatenated truncated sequences).
    """
    if dataset.split is None:
        raise DataError("refusing to serialize an unsplit dataset")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "items.tsv", "w") as f:
        for raw, dense in sorted(dataset.item_vocab.items(), key=lambda kv: kv[1]):
            f.write(f"{dense}\t{raw}\n")
    split_names = {TRAIN: "train", VAL: "val", TEST: "test"}
    with open(outdir / "users.tsv", "w") as f:
        for i, user in enumerate(dataset.users):
            f.write(f"{i}\t{user}\t{split_names[int(dataset.split[i])]}\n")
    lengths = np.array([len(s) for s in dataset.user_sequences], dtype="<i4")
    flat = np.concatenate([np.asarray(s, dtype="<i4") for s in dataset.user_sequences])
    lengths.tofile(outdir / "seq_lengths.bin")
    flat.tofile(outdir / "seq_items.bin")

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "stats": dataset.stats,
        "max_len": dataset.max_len,
        "split_seed": dataset.split_seed,
        "split_ratios": list(dataset.split_ratios),
        "split_counts": {
            name: int((dataset.split == code).sum()) for code, name in split_names.items()
        },
        "duplicates_kept": True,
        "payload_sha256": _payload_sha256(outdir, PAYLOAD_FILES),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(outdir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(indir: str | Path) -> InteractionDataset:
    indir = Path(indir)
    manifest_path = indir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"unsupported dataset format_version {manifest.get('format_version')}")
    expected = manifest["payload_sha256"]
    actual = _payload_sha256(indir, PAYLOAD_FILES)
    if actual != expected:
        raise DataError(f"dataset payload hash mismatch in {indir}")

    item_vocab: dict[str, int] = {}
    for line in (indir / "items.tsv").read_text().splitlines():
        dense, raw = line.split("\t", 1)
        item_vocab[raw] = int(dense)
    users: list[str] = []
    split = []
    for line in (indir / "users.tsv").read_text().splitlines():
        _, user, split_name = line.split("\t")
        users.append(user)
        split.append(SPLIT_CODES[split_name])
    lengths = np.fromfile(indir / "seq_lengths.bin", dtype="<i4")
    flat = np.fromfile(indir / "seq_items.bin", dtype="<i4")
    sequences: list[list[int]] = []
    pos = 0
    for n in lengths:
        sequences.append(flat[pos:pos + n].tolist())
        pos += n
    ds = InteractionDataset(
        item_vocab, users, sequences, manifest["max_len"], manifest["stats"],
        split=np.asarray(split, dtype=np.uint8),
        split_seed=manifest["split_seed"],
        split_ratios=tuple(manifest["split_ratios"]),
    )
    return ds


def dataset_hash(indir: str | Path) -> str:
    """The payload hash recorded in the manifest (used by run manifests)."""
    return json.loads((Path(indir) / "manifest.json").read_text())["payload_sha256"]


def format_stats_block(stats: dict) -> str:
    """Dataset summary in the usual statistics-table layout."""
    return "\n".join([
        f"Users        {stats['users']}",
        f"Items        {stats['items']}",
        f"Interactions {stats['interactions']}",
        f"Avg. length  {stats['avg_length']:.2f}",
        f"Sparsity     {stats['sparsity'] * 100:.2f}%",
    ])
