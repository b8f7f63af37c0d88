"""Catalog and interaction ingestion, leave-one-out splits, padding, batching
and a synthetic corpus with a planted cluster signal."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import make_rng

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class ItemCatalog:
    """Items 1..|I|; row 0 of each feature matrix is the padding slot."""

    titles: list[str]                  # titles[0] is "" for padding
    text_feat: np.ndarray              # (|I|+1, d_text)
    image_feat: np.ndarray             # (|I|+1, d_ima)
    clusters: np.ndarray | None = None  # ground-truth labels, synthetic only

    @property
    def num_items(self) -> int:
        return len(self.titles) - 1

    @property
    def item_ids(self) -> range:
        return range(1, self.num_items + 1)

    def title(self, item_id: int) -> str:
        return self.titles[item_id]

    def validate(self) -> None:
        n = self.num_items + 1
        if self.text_feat.shape[0] != n or self.image_feat.shape[0] != n:
            raise DataError("feature matrices do not match the number of items")
        if any(not t for t in self.titles[1:]):
            raise DataError("empty title")


@dataclass
class InteractionLog:
    sequences: dict[int, list[int]]    # user id -> chronological item ids

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    def check_against(self, catalog: ItemCatalog) -> None:
        for u, seq in self.sequences.items():
            for i in seq:
                if not 1 <= i <= catalog.num_items:
                    raise DataError(f"user {u} references unknown item {i}")


@dataclass
class SplitDataset:
    users: list[int]
    train: dict[int, list[int]]
    valid: dict[int, int]
    test: dict[int, int]
    skipped: int = 0

    def __len__(self):
        return len(self.users)

    def history(self, user: int, mode: str) -> list[int]:
        """Model input for ``mode``; the matching target is :meth:`target`."""
        if mode == "train":
            return self.train[user][:-1]
        if mode == "valid":
            return self.train[user]
        if mode == "test":
            return self.train[user] + [self.valid[user]]
        raise ValueError(f"unknown mode {mode!r}")

    def target(self, user: int, mode: str) -> int:
        if mode == "train":
            return self.train[user][-1]
        if mode == "valid":
            return self.valid[user]
        if mode == "test":
            return self.test[user]
        raise ValueError(f"unknown mode {mode!r}")


@dataclass
class PaddedBatch:
    users: np.ndarray      # (B,)
    ids: np.ndarray        # (B, n) int, left-padded with 0
    targets: np.ndarray    # (B,) item ids
    mask: np.ndarray       # (B, n) bool, True at real positions

    def __len__(self):
        return len(self.users)


# ------------------------------------------------------------------- loaders


def load_catalog(path) -> ItemCatalog:
    """Read the JSONL catalog (``item_id``, ``title``, ``text_feat``, ``image_feat``)."""
    rows: dict[int, tuple[str, list, list]] = {}
    d_text = d_ima = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                iid, title = int(obj["item_id"]), obj["title"]
                tf, gf = obj["text_feat"], obj["image_feat"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            if iid < 1:
                raise DataError(f"{path}:{lineno}: item_id must be >= 1, got {iid}")
            if iid in rows:
                raise DataError(f"{path}:{lineno}: duplicate item_id {iid}")
            if not isinstance(title, str) or not title.strip():
                raise DataError(f"{path}:{lineno}: empty title for item {iid}")
            d_text = len(tf) if d_text is None else d_text
            d_ima = len(gf) if d_ima is None else d_ima
            if len(tf) != d_text:
                raise DataError(f"{path}:{lineno}: ragged text_feat (length {len(tf)}, expected {d_text})")
            if len(gf) != d_ima:
                raise DataError(f"{path}:{lineno}: ragged image_feat (length {len(gf)}, expected {d_ima})")
            rows[iid] = (title, tf, gf)
    if not rows:
        raise DataError(f"{path}: empty catalog")
    n = len(rows)
    missing = sorted(set(range(1, n + 1)) - rows.keys())
    if missing:
        raise DataError(f"{path}: item ids must be dense in 1..{n}; missing {missing[:5]}")
    text = np.zeros((n + 1, d_text))
    image = np.zeros((n + 1, d_ima))
    titles = [""]
    for iid in range(1, n + 1):
        title, tf, gf = rows[iid]
        titles.append(title)
        text[iid] = tf
        image[iid] = gf
    cat = ItemCatalog(titles, text, image)
    cat.validate()
    return cat


def save_catalog(catalog: ItemCatalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for iid in catalog.item_ids:
            fh.write(json.dumps({
                "item_id": iid,
                "title": catalog.titles[iid],
                "text_feat": catalog.text_feat[iid].tolist(),
                "image_feat": catalog.image_feat[iid].tolist(),
            }) + "\n")


def load_interactions(path, catalog: ItemCatalog | None = None) -> InteractionLog:
    """Read ``user_id,item_id,ts`` rows; order by (user, ts), ties by file order."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"user_id", "item_id", "ts"} <= set(reader.fieldnames):
            raise DataError(f"{path}: header must be user_id,item_id,ts")
        for lineno, r in enumerate(reader, 2):
            try:
                rows.append((int(r["user_id"]), float(r["ts"]), lineno, int(r["item_id"])))
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed row") from None
    rows.sort()
    seqs: dict[int, list[int]] = {}
    for u, _, _, i in rows:
        seqs.setdefault(u, []).append(i)
    out = InteractionLog(seqs)
    if catalog is not None:
        out.check_against(catalog)
    return out


def save_interactions(log_: InteractionLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "ts"])
        for u in sorted(log_.sequences):
            for t, i in enumerate(log_.sequences[u]):
                w.writerow([u, i, t])


# ------------------------------------------------------------ split and pad


def leave_one_out_split(log_: InteractionLog) -> SplitDataset:
    """Last item for test, penultimate for validation, the rest for training."""
    users, train, valid, test = [], {}, {}, {}
    skipped = 0
    for u in sorted(log_.sequences):
        seq = log_.sequences[u]
        if len(seq) < 3:
            skipped += 1
            continue
        users.append(u)
        train[u] = list(seq[:-2])
        valid[u] = seq[-2]
        test[u] = seq[-1]
    if skipped:
        log.warning("skipped %d users with fewer than 3 interactions", skipped)
    return SplitDataset(users, train, valid, test, skipped)


def pad_truncate(seq, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``n`` most recent items, left-pad with 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seq = list(seq)[-n:]
    row = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=bool)
    if seq:
        row[n - len(seq):] = seq
        mask[n - len(seq):] = True
    return row, mask


def unpad(row: np.ndarray, mask: np.ndarray) -> list[int]:
    return [int(i) for i in row[mask]]


def make_batch(split: SplitDataset, users, n: int, mode: str) -> PaddedBatch:
    rows, masks, targets = [], [], []
    for u in users:
        r, m = pad_truncate(split.history(u, mode), n)
        rows.append(r)
        masks.append(m)
        targets.append(split.target(u, mode))
    return PaddedBatch(np.asarray(users, dtype=np.int64), np.stack(rows),
                       np.asarray(targets, dtype=np.int64), np.stack(masks))


def eligible_users(split: SplitDataset, mode: str) -> list[int]:
    # train mode needs a non-empty input, i.e. at least two training items
    if mode == "train":
        return [u for u in split.users if len(split.train[u]) >= 2]
    return list(split.users)


def batch_iterator(split: SplitDataset, batch_size: int, n: int, mode: str = "train",
                   seed: int = 0, epoch: int = 0) -> Iterator[PaddedBatch]:
    """Yield padded batches; train mode shuffles by ``(seed, epoch)``."""
    users = eligible_users(split, mode)
    if mode == "train":
        order = make_rng(seed, "batches", epoch).permutation(len(users))
        users = [users[i] for i in order]
    for start in range(0, len(users), batch_size):
        yield make_batch(split, users[start:start + batch_size], n, mode)


# ---------------------------------------------------------------- synthetic

_SYLLABLES = ["ka", "lo", "mi", "ra", "ten", "su", "vo", "pel", "dri", "na", "qu",
              "zo", "bel", "fa", "gri", "ho", "jun", "ki", "mor", "tas", "ul", "wen"]
_GENERIC = ["video", "clip", "vlog", "episode", "part", "review", "tutorial", "live"]


@dataclass
class SynthSpec:
    num_users: int = 2000
    num_items: int = 1000
    d_text: int = 64
    d_ima: int = 64
    num_clusters: int = 20
    signal_strength: float = 0.9
    seed: int = 0
    min_len: int = 3
    max_len: int = 6
    noise_scale: float = 0.1
    words_per_cluster: int = 6
    popularity_skew: float = 1.0

    def check(self) -> None:
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.num_items < self.num_clusters:
            raise ValueError("num_items must be >= num_clusters")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")
        if self.num_users < 1 or self.d_text < 1 or self.d_ima < 1:
            raise ValueError("num_users, d_text and d_ima must be positive")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError("need 3 <= min_len <= max_len")
        if self.max_len > self.num_items:
            raise ValueError("max_len cannot exceed num_items (sequences have no repeats)")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if self.popularity_skew < 0:
            raise ValueError("popularity_skew must be >= 0")


def _pseudo_word(rng) -> str:
    k = int(rng.integers(2, 4))
    return "".join(rng.choice(_SYLLABLES, size=k))


def synth_generate(spec: SynthSpec) -> tuple[ItemCatalog, InteractionLog]:
    """Clustered items and cluster-biased user walks.

    Text and image features are cluster centroids plus Gaussian noise, with
    independent centroids per modality so the raw spaces are unaligned.  At
    each step a user picks from their preferred cluster with probability
    ``signal_strength`` and from the whole catalog otherwise; items do not
    repeat within a sequence.  With ``popularity_skew > 0`` in-cluster picks
    are weighted by ``rank ** -popularity_skew`` over a random ranking of
    the cluster's members (a long tail); 0 means uniform.
    """
    spec.check()
    rng = make_rng(spec.seed, "synth")
    c, n_items = spec.num_clusters, spec.num_items
    clusters = np.zeros(n_items + 1, dtype=np.int64)
    clusters[0] = -1
    clusters[1:] = rng.permutation(np.arange(n_items) % c)

    text_cent = rng.normal(0.0, 1.0 / np.sqrt(spec.d_text), size=(c, spec.d_text))
    ima_cent = rng.normal(0.0, 1.0 / np.sqrt(spec.d_ima), size=(c, spec.d_ima))
    text = np.zeros((n_items + 1, spec.d_text))
    image = np.zeros((n_items + 1, spec.d_ima))
    text[1:] = text_cent[clusters[1:]] + spec.noise_scale * rng.normal(size=(n_items, spec.d_text))
    image[1:] = ima_cent[clusters[1:]] + spec.noise_scale * rng.normal(size=(n_items, spec.d_ima))

    pools = [[_pseudo_word(rng) for _ in range(spec.words_per_cluster)] for _ in range(c)]
    titles = [""]
    for iid in range(1, n_items + 1):
        words = list(rng.choice(pools[clusters[iid]], size=3, replace=False))
        titles.append(" ".join(words + [str(rng.choice(_GENERIC))]))

    members = [np.flatnonzero(clusters == k) for k in range(c)]
    weight = np.zeros(n_items + 1)
    for m in members:
        weight[rng.permutation(m)] = np.arange(1, len(m) + 1, dtype=np.float64) ** -spec.popularity_skew
    seqs: dict[int, list[int]] = {}
    for u in range(1, spec.num_users + 1):
        pref = int(rng.integers(c))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        seen: set[int] = set()
        seq: list[int] = []
        while len(seq) < length:
            if rng.random() < spec.signal_strength:
                pool = np.array([i for i in members[pref] if i not in seen], dtype=np.int64)
                if len(pool) == 0:
                    pool = np.array([i for i in range(1, n_items + 1) if i not in seen], dtype=np.int64)
                w = weight[pool]
                item = int(pool[rng.choice(len(pool), p=w / w.sum())])
            else:
                item = int(rng.integers(1, n_items + 1))
                if item in seen:
                    continue
            seen.add(item)
            seq.append(item)
        seqs[u] = seq
    return ItemCatalog(titles, text, image, clusters), InteractionLog(seqs)


@dataclass
class Corpus:
    """Catalog, log and split bundled for training and evaluation."""

    catalog: ItemCatalog
    log: InteractionLog
    split: SplitDataset = field(init=False)

    def __post_init__(self):
        self.split = leave_one_out_split(self.log)


def load_corpus(catalog_path, interactions_path) -> Corpus:
    cat = load_catalog(catalog_path)
    return Corpus(cat, load_interactions(interactions_path, cat))


def save_clusters(catalog: ItemCatalog, path) -> None:
    Path(path).write_text("item_id,cluster\n" + "".join(
        f"{i},{int(catalog.clusters[i])}\n" for i in catalog.item_ids))
