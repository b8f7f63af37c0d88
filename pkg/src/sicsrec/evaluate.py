"""Leave-one-out full-ranking evaluation and inference latency benchmarks."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import SplitDataset, batch_iterator, make_batch
from .seqmodel import ModelConfig, SicsRecModel


def rank_target(scores, target: int, history=(), mask_history: bool = False) -> int:
    """1-based rank of ``target`` among items 1..|I|.

    ``scores[j]`` is the score of item ``j + 1``.  Ties go to the smaller
    item id.  History items stay in the candidate pool unless
    ``mask_history`` is set.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= target <= len(s):
        raise IndexError(f"target {target} not in catalog of {len(s)} items")
    t = s[target - 1]
    ids = np.arange(1, len(s) + 1)
    beats = (s > t) | ((s == t) & (ids < target))
    if mask_history:
        hist = np.zeros(len(s), dtype=bool)
        hist[[h - 1 for h in history if h != target and 1 <= h <= len(s)]] = True
        beats &= ~hist
    return int(beats.sum()) + 1


def batch_ranks(logits: np.ndarray, targets, histories=None, mask_history: bool = False) -> np.ndarray:
    """Vectorised :func:`rank_target` over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    b, n_items = logits.shape
    rows = np.arange(b)
    t = logits[rows, targets - 1][:, None]
    ids = np.arange(1, n_items + 1)[None, :]
    beats = (logits > t) | ((logits == t) & (ids < targets[:, None]))
    if mask_history and histories is not None:
        for r, hist in enumerate(histories):
            h = [i - 1 for i in hist if i != targets[r] and 1 <= i <= n_items]
            beats[r, h] = False
    return beats.sum(axis=1) + 1


def hit_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class EvalReport:
    split: str
    ks: list[int]
    metrics: dict[str, float]
    num_users: int
    seed: int = 0
    latency: dict | None = None
    ranks: dict[int, int] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("ranks")
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    def save_ranks(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "rank"])
            w.writerows(sorted(self.ranks.items()))


def evaluate(model: SicsRecModel, split: SplitDataset, ks: Sequence[int] = (5, 10),
             batch_size: int = 256, mode: str = "test", mask_history: bool = False,
             seed: int = 0) -> EvalReport:
    """Mean Hit@K / NDCG@K over every user in ``split`` (dropout off)."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    if mode not in ("valid", "test"):
        raise ValueError("mode must be 'valid' or 'test'")
    n = model.config.n
    ranks: dict[int, int] = {}
    for batch in batch_iterator(split, batch_size, n, mode=mode):
        logits = model.predict(batch.ids, batch.mask)
        hist = [split.history(int(u), mode) for u in batch.users] if mask_history else None
        r = batch_ranks(logits, batch.targets, hist, mask_history)
        ranks.update(zip(batch.users.tolist(), r.tolist()))
    ordered = np.array([ranks[u] for u in sorted(ranks)])
    metrics = {}
    for k in ks:
        metrics[f"hit@{k}"] = float(np.mean(ordered <= k))
        metrics[f"ndcg@{k}"] = float(np.mean(np.where(ordered <= k, 1.0 / np.log2(ordered + 1), 0.0)))
    return EvalReport(mode, list(ks), metrics, len(ordered), seed, ranks=ranks)


# --------------------------------------------------------------- benchmarks


def _time_forward(model: SicsRecModel, ids, mask, warmup: int, repeats: int) -> list[float]:
    for _ in range(warmup):
        model.predict(ids, mask)
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.predict(ids, mask)
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def bench_inference(model: SicsRecModel, split: SplitDataset, batch_sizes: Sequence[int] = (1, 64, 256),
                    warmup: int = 2, repeats: int = 5, mode: str = "test") -> dict[int, dict[str, float]]:
    """Forward-pass latency per batch size; batches are built before timing."""
    users = list(split.users)
    table = {}
    for bs in batch_sizes:
        chosen = [users[i % len(users)] for i in range(bs)]
        batch = make_batch(split, chosen, model.config.n, mode)
        times = _time_forward(model, batch.ids, batch.mask, warmup, repeats)
        table[int(bs)] = {"mean_ms": float(np.mean(times)), "median_ms": float(np.median(times)),
                          "repeats": repeats}
    return table


@dataclass
class ScalingProbe:
    ns: list[int]
    median_ms: list[float]
    exponent: float


def scaling_probe(ns: Sequence[int] = (16, 32, 64), d: int = 16, batch_size: int = 128,
                  num_items: int = 50, num_blocks: int = 2, warmup: int = 2, repeats: int = 7,
                  seed: int = 0) -> ScalingProbe:
    """Fit ``latency ∝ n^k`` over full-length random sequences.

    Small ``d`` and a small catalog keep the attention term, which grows as
    n², from being hidden by the n·d² projections and the scoring matmul.
    """
    rng = nx.make_rng(seed, "probe")
    med = []
    for n in ns:
        cfg = ModelConfig(n=n, d=d, num_blocks=num_blocks, dropout=0.0, lora_rank=0, seed=seed)
        model = SicsRecModel(cfg, num_items)
        ids = rng.integers(1, num_items + 1, size=(batch_size, n))
        mask = np.ones((batch_size, n), dtype=bool)
        med.append(float(np.median(_time_forward(model, ids, mask, warmup, repeats))))
    slope = float(np.polyfit(np.log(ns), np.log(med), 1)[0])
    return ScalingProbe(list(ns), med, slope)
