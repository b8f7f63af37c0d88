"""Content-modality alignment: discriminator-driven pair selection and
contrastive fine-tuning of the text/image projection heads."""
from __future__ import annotations

import csv
import logging
import re
import subprocess
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .data import InteractionLog, ItemCatalog
from .numerics import Param, Tensor

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "<Instruction>: You are a video similarity evaluation assistant. I will provide you "
    "with a target video title and a list of candidate video titles. Please help me find "
    "the most similar video title from the candidate list to the target video.\n"
    "<Input>: The target video is {target_id} - {target_title}, and the candidate videos "
    "are: {candidates}.\n"
    "<Output Guidance>: Please find the most similar video title from the candidates and "
    "output the corresponding item-ID pair in the following format: "
    "<target_itemID>-<similar_itemID>.\n"
    "If there are no similar videos, output (-1,-1) directly. Please ensure the format is "
    "correct; any other format will be considered invalid."
)

SENTINEL = (-1, -1)


@dataclass(frozen=True)
class PromptInstance:
    target_item_id: int
    target_title: str
    candidates: tuple[tuple[int, str], ...]
    rendered_text: str


@dataclass(frozen=True)
class Verdict:
    target_id: int
    similar_id: int
    status: str = "valid"   # valid | sentinel | invalid

    @property
    def is_sentinel(self) -> bool:
        return (self.target_id, self.similar_id) == SENTINEL


def build_prompt(target: tuple[int, str], candidates: Sequence[tuple[int, str]]) -> PromptInstance | None:
    """Render the discriminator prompt; ``None`` means skip this user."""
    cands = tuple((int(i), str(t)) for i, t in candidates if int(i) != int(target[0]))
    if not cands:
        return None
    text = PROMPT_TEMPLATE.format(
        target_id=int(target[0]), target_title=target[1],
        candidates=", ".join(f"{i}-{t}" for i, t in cands))
    return PromptInstance(int(target[0]), target[1], cands, text)


_VERDICT_RE = re.compile(r"\(\s*-1\s*,\s*-1\s*\)|(?<![\d-])(\d+)\s*-\s*(\d+)")


def parse_verdict(reply: str, prompt: PromptInstance) -> Verdict:
    """First ``a-b`` or ``(-1,-1)`` in the reply, checked against the prompt."""
    m = _VERDICT_RE.search(reply or "")
    if m is None:
        return Verdict(*SENTINEL, status="invalid")
    if m.group(1) is None:
        return Verdict(*SENTINEL, status="sentinel")
    t, s = int(m.group(1)), int(m.group(2))
    if t != prompt.target_item_id or s not in {i for i, _ in prompt.candidates}:
        return Verdict(*SENTINEL, status="invalid")
    return Verdict(t, s)


# ------------------------------------------------------------ discriminators


class DiscriminatorError(RuntimeError):
    """Transport failure talking to a discriminator."""


class Discriminator(Protocol):
    def __call__(self, prompt: PromptInstance) -> str: ...


class CosineDiscriminator:
    """Picks the candidate whose raw text features are most cosine-similar.

    Replies in the same text format an LLM would, so it goes through
    :func:`parse_verdict` like any other discriminator.
    """

    name = "builtin-cosine"

    def __init__(self, catalog: ItemCatalog, threshold: float = 0.6):
        self.threshold = threshold
        feats = catalog.text_feat
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        self._unit = feats / np.maximum(norms, 1e-12)

    def __call__(self, prompt: PromptInstance) -> str:
        ids = np.array([i for i, _ in prompt.candidates])
        sims = self._unit[ids] @ self._unit[prompt.target_item_id]
        best = int(np.argmax(sims))   # first maximum wins
        if sims[best] < self.threshold:
            return "(-1,-1)"
        return f"{prompt.target_item_id}-{ids[best]}"


class ExternalCommandDiscriminator:
    """Runs a command with the prompt on stdin and reads the reply from stdout."""

    name = "external-command"

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, prompt: PromptInstance) -> str:
        try:
            proc = subprocess.run(self.command, input=prompt.rendered_text, capture_output=True,
                                  text=True, timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise DiscriminatorError(str(exc)) from exc
        if proc.returncode != 0:
            raise DiscriminatorError(f"command exited with {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout


@dataclass
class SamplePairSet:
    pairs: list[tuple[int, int]]
    attempts: int = 0
    valid: int = 0
    sentinel: int = 0
    invalid: int = 0
    failures: int = 0
    skipped: int = 0

    def __len__(self):
        return len(self.pairs)


def select_pairs(log_: InteractionLog, catalog: ItemCatalog, discriminator: Discriminator,
                 max_candidates: int = 20) -> SamplePairSet:
    """One prompt per user: final item vs. up to ``max_candidates`` earlier ones."""
    out = SamplePairSet([])
    found: set[tuple[int, int]] = set()
    for u in sorted(log_.sequences):
        seq = log_.sequences[u]
        target = seq[-1]
        earlier = [i for i in seq[:-1] if i != target][-max_candidates:]
        prompt = build_prompt((target, catalog.title(target)),
                              [(i, catalog.title(i)) for i in earlier])
        if prompt is None:
            out.skipped += 1
            continue
        out.attempts += 1
        try:
            reply = discriminator(prompt)
        except DiscriminatorError as exc:
            log.warning("discriminator failed for user %d: %s", u, exc)
            out.failures += 1
            continue
        v = parse_verdict(reply, prompt)
        if v.status == "valid":
            out.valid += 1
            found.add((v.target_id, v.similar_id))
        elif v.status == "sentinel":
            out.sentinel += 1
        else:
            out.invalid += 1
    out.pairs = sorted(found)
    return out


def save_pairs(pairs: SamplePairSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_id", "similar_id"])
        w.writerows(pairs.pairs)


def load_pairs(path) -> SamplePairSet:
    with open(path, newline="") as fh:
        rows = [(int(r["target_id"]), int(r["similar_id"])) for r in csv.DictReader(fh)]
    return SamplePairSet(sorted(set(rows)))


# --------------------------------------------------------------------- heads


@dataclass
class ContentEncoderHead:
    """Two-layer ReLU projections over frozen text and image features."""

    text: list[Param] = field(default_factory=list)    # W_a, b_a, W_b, b_b
    image: list[Param] = field(default_factory=list)

    @classmethod
    def init(cls, d_text: int, d_ima: int, d: int, seed: int = 0, hidden: int | None = None):
        rng = nx.make_rng(seed, "heads")
        hidden = hidden or d

        def mlp(d_in, tag):
            # He-style scale on the first layer keeps ReLU units alive at init
            return [Param(rng.normal(0, np.sqrt(2.0 / d_in), (d_in, hidden)), f"{tag}.W_a"),
                    Param(np.zeros((1, hidden)), f"{tag}.b_a"),
                    Param(rng.normal(0, np.sqrt(1.0 / hidden), (hidden, d)), f"{tag}.W_b"),
                    Param(np.zeros((1, d)), f"{tag}.b_b")]

        return cls(mlp(d_text, "text"), mlp(d_ima, "image"))

    @property
    def params(self) -> list[Param]:
        return self.text + self.image

    @property
    def out_dim(self) -> int:
        return self.text[2].shape[1]

    @staticmethod
    def _apply(layers, x) -> Tensor:
        return nx.ffn(x, *layers)

    def encode_text(self, feats) -> Tensor:
        return self._apply(self.text, feats)

    def encode_image(self, feats) -> Tensor:
        return self._apply(self.image, feats)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}


def sft_loss(pairs, catalog: ItemCatalog, heads: ContentEncoderHead, tau: float = 0.05,
             parts: bool = False):
    """``L_t2t + L_i2i + L_t2i`` over a batch of (target, similar) pairs.

    t2t/i2i treat the similar item of pair i as the positive for target i and
    the other pairs' similar items as negatives; t2i matches each target's
    text with its own image against the other targets' images.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise nx.ParameterError("sft_loss needs at least one pair")
    p, q = pairs[:, 0], pairs[:, 1]
    tp = heads.encode_text(catalog.text_feat[p])
    tq = heads.encode_text(catalog.text_feat[q])
    gp = heads.encode_image(catalog.image_feat[p])
    gq = heads.encode_image(catalog.image_feat[q])
    t2t = nx.info_nce(nx.matmul(tp, nx.transpose(tq)), tau)
    i2i = nx.info_nce(nx.matmul(gp, nx.transpose(gq)), tau)
    t2i = nx.info_nce(nx.matmul(tp, nx.transpose(gp)), tau)
    total = nx.add(nx.add(t2t, i2i), t2i)
    if parts:
        return total, {"t2t": t2t.item(), "i2i": i2i.item(), "t2i": t2i.item()}
    return total


@dataclass
class SFTResult:
    heads: ContentEncoderHead
    loss_curve: list[float]


def run_sft(pairs: SamplePairSet, catalog: ItemCatalog, heads: ContentEncoderHead,
            epochs: int = 30, batch_size: int = 64, tau: float = 0.05, lr: float = 1e-3,
            seed: int = 0) -> SFTResult:
    """Train the heads with Adam on mini-batches of selected pairs."""
    if len(pairs) == 0:
        raise ValueError("empty pair set: no similar pairs were selected; "
                         "lower the discriminator threshold")
    data = np.asarray(pairs.pairs, dtype=np.int64)
    opt = nx.Adam(heads.params, lr=lr)
    curve = []
    for epoch in range(epochs):
        order = nx.make_rng(seed, "sft", epoch).permutation(len(data))
        losses, sizes = [], []
        for start in range(0, len(data), batch_size):
            chunk = data[order[start:start + batch_size]]
            opt.zero_grad()
            loss = sft_loss(chunk, catalog, heads, tau)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            sizes.append(len(chunk))
        curve.append(float(np.average(losses, weights=sizes)))
    return SFTResult(heads, curve)


def encode_content(catalog: ItemCatalog, heads: ContentEncoderHead, d: int | None = None):
    """Per-item head outputs ``(E_text, E_ima)``; row 0 (padding) is zero."""
    if d is not None and heads.out_dim != d:
        raise ValueError(f"head output dim {heads.out_dim} does not match model d={d}")
    with nx.no_grad():
        et = heads.encode_text(catalog.text_feat).value.copy()
        ei = heads.encode_image(catalog.image_feat).value.copy()
    et[0] = 0.0
    ei[0] = 0.0
    return et, ei


def mean_pair_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean row-wise cosine between two equally shaped matrices."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return float(np.mean(np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-12)))


def mean_intra_cluster_cosine(emb: np.ndarray, labels: np.ndarray, items=None) -> float:
    """Average cosine over distinct same-cluster item pairs."""
    items = np.arange(1, len(labels)) if items is None else np.asarray(items)
    x = emb[items]
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    lab = labels[items]
    sims = x @ x.T
    same = (lab[:, None] == lab[None, :]) & ~np.eye(len(items), dtype=bool)
    return float(sims[same].mean())


# ----------------------------------------------------------- embedding cache

MATRIX_MAGIC = "# sicsrec-matrix v1"


def save_matrix(m: np.ndarray, path) -> None:
    """Text matrix: header ``# sicsrec-matrix v1 rows=R cols=C`` then CSV rows.

    Values are written with 17 significant digits so reloading is exact.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(f"{MATRIX_MAGIC} rows={m.shape[0]} cols={m.shape[1]}\n")
        np.savetxt(fh, m, delimiter=",", fmt="%.17g")


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        m = re.fullmatch(re.escape(MATRIX_MAGIC) + r" rows=(\d+) cols=(\d+)", header)
        if m is None:
            raise ValueError(f"{path}: not a sicsrec matrix file (header {header!r})")
        rows, cols = int(m.group(1)), int(m.group(2))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {data.shape}")
    return data
