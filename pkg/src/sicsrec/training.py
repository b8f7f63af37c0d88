"""Two-step training: ID-pathway pretraining with cross-entropy, then
post-training of the content towers with the contrastive term and LoRA.
End-to-end and content-first strategies are provided for comparison."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Corpus, PaddedBatch, batch_iterator
from .evaluate import evaluate
from .seqmodel import ModelConfig, SicsRecModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGE1_GROUPS = ("id_emb", "pos", "id_tower")
STAGE2_GROUPS = ("lora", "adapters", "con_tower", "mix", "agg")
ALL_GROUPS = ("id_emb", "pos", "id_tower", "adapters", "con_tower", "mix", "agg")
STRATEGIES = ("two-step", "fixed-conenc", "fixed-conemb", "end2end")


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainPlan:
    stage: int = 1
    epochs_max: int = 200
    patience: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    alpha: float = 0.1
    lam: float = 1e-4
    tau: float = 0.05
    seed: int = 0
    eval_batch_size: int = 512
    lora: bool = True
    debug_freeze_checks: bool = False

    def check(self) -> None:
        if self.patience < 1:
            raise nx.ParameterError("patience must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise nx.ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lam < 0:
            raise nx.ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.tau <= 1.0:
            raise nx.ParameterError(f"tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        plan = cls(**d)
        plan.check()
        return plan


@dataclass
class TrainReport:
    stage: str
    epochs: list[dict] = field(default_factory=list)
    initial_metric: float | None = None
    best_epoch: int = 0
    best_metric: float = float("-inf")
    stop_reason: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        """Timing-free fields, safe to embed in reproducible artifacts."""
        return {"stage": self.stage, "best_epoch": self.best_epoch, "best_metric": self.best_metric,
                "initial_metric": self.initial_metric, "stop_reason": self.stop_reason,
                "epochs_run": len(self.epochs)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


# ----------------------------------------------------------------- losses


def regularized_tables(model: SicsRecModel, stage: int) -> list[str]:
    return ["E_id"] if stage == 1 else ["E_id", "E_text", "E_ima"]


def total_loss(batch: PaddedBatch, model: SicsRecModel, stage: int, alpha: float, lam: float,
               tau: float, training: bool = False, rng=None, paths: str | None = None):
    """``L_CE + α·L_ConCL + λ·Σ‖Θ‖²``; stage 1 drops the contrastive term.

    Returns the loss tensor and a dict of its float components.
    """
    if not 0.0 <= alpha <= 1.0:
        raise nx.ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if lam < 0:
        raise nx.ParameterError(f"lambda must be >= 0, got {lam}")
    if paths is None:
        paths = "id" if stage == 1 else model.paths
    trace = model.forward(batch.ids, batch.mask, training=training, rng=rng, paths=paths)
    ce = nx.cross_entropy(trace.logits, batch.targets - 1)
    loss = ce
    parts = {"ce": ce.item(), "concl": 0.0}
    if stage != 1:
        e_c = model.item_content(batch.targets)
        concl = nx.info_nce(nx.matmul(trace.h_a, nx.transpose(e_c)), tau)
        parts["concl"] = concl.item()
        loss = nx.add(loss, nx.mul(concl, alpha))
    reg = None
    for name in regularized_tables(model, stage):
        term = nx.sum_squares(model[name])
        reg = term if reg is None else nx.add(reg, term)
    reg = nx.mul(reg, lam)
    parts["reg"] = reg.item()
    loss = nx.add(loss, reg)
    parts["total"] = loss.item()
    return loss, parts


# ---------------------------------------------------------- early stopping


def early_stop(history, patience: int) -> tuple[bool, int]:
    """``(stop, best_index)``: stop once ``patience`` epochs pass without a
    strict improvement; the earliest maximum is best."""
    if patience < 1:
        raise nx.ParameterError("patience must be >= 1")
    if not history:
        return False, -1
    best = int(np.argmax(history))   # argmax returns the first maximum
    return len(history) - 1 - best >= patience, best


# ---------------------------------------------------------------- trainer


def _validation_metric(model, corpus, plan) -> float:
    return evaluate(model, corpus.split, ks=(10,), batch_size=plan.eval_batch_size,
                    mode="valid").metrics["ndcg@10"]


def fit(model: SicsRecModel, corpus: Corpus, plan: TrainPlan, stage: int, label: str) -> TrainReport:
    """Adam over the currently trainable parameters with validation-based
    early stopping; the best state (epoch 0 = starting point) is restored."""
    plan.check()
    t0 = time.perf_counter()
    report = TrainReport(label)
    params = model.trainable()
    frozen = {k: v.value.copy() for k, v in model.params.items() if not v.trainable}
    opt = nx.Adam(params, lr=plan.lr)
    history = [_validation_metric(model, corpus, plan)]
    report.initial_metric = history[0]
    best_state = model.state_dict()
    report.stop_reason = "epochs_max"
    for epoch in range(1, plan.epochs_max + 1):
        sums = {"ce": 0.0, "concl": 0.0, "reg": 0.0, "total": 0.0}
        count = 0
        rng = nx.make_rng(plan.seed, label, "dropout", epoch)
        for batch in batch_iterator(corpus.split, plan.batch_size, model.config.n, "train",
                                    seed=plan.seed, epoch=epoch):
            opt.zero_grad()
            loss, parts = total_loss(batch, model, stage, plan.alpha, plan.lam, plan.tau,
                                     training=True, rng=rng)
            if not math.isfinite(parts["total"]):
                raise DivergenceError(f"{label}: non-finite loss at epoch {epoch}: {parts}")
            loss.backward()
            opt.step()
            for k in sums:
                sums[k] += parts[k] * len(batch)
            count += len(batch)
        if plan.debug_freeze_checks:
            for k, v in frozen.items():
                if not np.array_equal(model[k].value, v):
                    raise AssertionError(f"frozen parameter {k} changed in epoch {epoch}")
        metric = _validation_metric(model, corpus, plan)
        history.append(metric)
        row = {k: v / max(count, 1) for k, v in sums.items()}
        row.update(epoch=epoch, val_ndcg10=metric)
        report.epochs.append(row)
        stop, best = early_stop(history, plan.patience)
        if best == epoch:
            best_state = model.state_dict()
        if stop:
            report.stop_reason = "early_stop"
            break
    _, best = early_stop(history, plan.patience)
    model.load_state_dict(best_state)
    report.best_epoch = best
    report.best_metric = history[best]
    report.wall_time = time.perf_counter() - t0
    return report


def pretrain_stage1(model: SicsRecModel, corpus: Corpus, plan: TrainPlan,
                    checkpoint_path=None) -> TrainReport:
    """Cross-entropy training of E_id, P and the ID tower only."""
    model.paths = "id"
    model.set_trainable(STAGE1_GROUPS)
    report = fit(model, corpus, plan, stage=1, label="stage1")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, "stage1", extra={"report": report.summary()})
    return report


def posttrain_stage2(checkpoint, corpus: Corpus, E_text, E_ima, plan: TrainPlan,
                     checkpoint_path=None) -> tuple[SicsRecModel, TrainReport]:
    """Freeze the ID pathway, add LoRA factors, train the content side."""
    if E_text is None or E_ima is None:
        raise ValueError("stage 2 needs content embeddings (run the alignment step first)")
    if isinstance(checkpoint, SicsRecModel):
        model = checkpoint
    else:
        model, meta = load_checkpoint(checkpoint)
        if meta["stage"] != "stage1":
            raise ValueError(f"stage 2 needs a stage-1 checkpoint, got {meta['stage']!r}")
    model.set_content(E_text, E_ima)
    model.paths = "all"
    if plan.lora and model.config.lora_rank > 0:
        model.lora_apply()
    model.set_trainable(STAGE2_GROUPS)
    report = fit(model, corpus, plan, stage=2, label="stage2")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, "stage2", extra={"report": report.summary()})
    return model, report


def train_end2end(model: SicsRecModel, corpus: Corpus, E_text, E_ima, plan: TrainPlan,
                  checkpoint_path=None) -> TrainReport:
    """Everything trainable from scratch with the full loss."""
    model.set_content(E_text, E_ima)
    model.paths = "all"
    model.set_trainable(ALL_GROUPS)
    report = fit(model, corpus, plan, stage=2, label="end2end")
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, "end2end", extra={"report": report.summary()})
    return report


def _content_first(model, corpus, E_text, E_ima, plan_a, plan_b, fixed_groups):
    # content pathway first (with E_id for scoring), then the rest with the content part fixed
    model.set_content(E_text, E_ima)
    model.paths = "content"
    model.set_trainable(("id_emb", "pos", "adapters", "con_tower", "agg"))
    rep_a = fit(model, corpus, plan_a, stage=2, label="content_pre")
    model.paths = "all"
    model.set_trainable(tuple(g for g in ALL_GROUPS if g not in fixed_groups))
    rep_b = fit(model, corpus, plan_b, stage=2, label="content_post")
    return rep_a, rep_b


@dataclass
class StrategyResult:
    strategy: str
    seed: int
    val_ndcg10: float
    epochs_to_best: int
    total_epochs: int
    reports: list[dict]


def run_strategy(strategy: str, corpus: Corpus, model_cfg: ModelConfig, E_text, E_ima,
                 plan1: TrainPlan, plan2: TrainPlan) -> tuple[SicsRecModel, StrategyResult]:
    """Train one strategy from scratch.

    ``epochs_to_best`` counts the final (post-training) pass for staged
    strategies and the single pass for end-to-end training.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    model = SicsRecModel(model_cfg, corpus.catalog.num_items, E_text.shape[1], E_ima.shape[1])
    if strategy == "two-step":
        r1 = pretrain_stage1(model, corpus, plan1)
        model, r2 = posttrain_stage2(model, corpus, E_text, E_ima, plan2)
        reps = [r1, r2]
    elif strategy == "end2end":
        reps = [train_end2end(model, corpus, E_text, E_ima, plan1)]
    else:
        fixed = ("con_tower",) if strategy == "fixed-conenc" else ("adapters",)
        reps = list(_content_first(model, corpus, E_text, E_ima, plan1, plan2, fixed))
    last = reps[-1]
    result = StrategyResult(strategy, plan1.seed, last.best_metric, last.best_epoch,
                            sum(len(r.epochs) for r in reps), [r.to_dict() for r in reps])
    return model, result


def strategy_table(results: list[StrategyResult]) -> str:
    """Plain-text table of median NDCG@10 and epochs-to-best per strategy."""
    by: dict[str, list[StrategyResult]] = {}
    for r in results:
        by.setdefault(r.strategy, []).append(r)
    lines = [f"{'strategy':<14}{'seeds':>6}{'N@10 (median)':>16}{'#epo (median)':>15}"]
    for name, rs in by.items():
        lines.append(f"{name:<14}{len(rs):>6}{np.median([r.val_ndcg10 for r in rs]):>16.4f}"
                     f"{np.median([r.epochs_to_best for r in rs]):>15.1f}")
    return "\n".join(lines)
