"""Command-line pipeline: ``synth → pairs → sft → train → eval / bench``.

Every command reads one JSON config (defaults below, strict keys, dotted
``--set`` overrides), writes its artifact under ``--out`` and leaves a run
manifest in ``<out>/manifests/``.

Exit codes: 0 ok, 2 config error, 3 data error (including a missing
upstream artifact), 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .align import (ContentEncoderHead, CosineDiscriminator, ExternalCommandDiscriminator,
                    encode_content, load_matrix, load_pairs, mean_pair_cosine, run_sft,
                    save_matrix, save_pairs, select_pairs)
from .data import DataError, SynthSpec, load_catalog, load_corpus, save_catalog, save_clusters, \
    save_interactions, synth_generate
from .evaluate import bench_inference, evaluate, scaling_probe
from .numerics import ParameterError
from .seqmodel import ConfigError, ModelConfig, SicsRecModel, load_checkpoint, save_checkpoint, write_npz
from .training import (STRATEGIES, DivergenceError, TrainPlan, posttrain_stage2, pretrain_stage1,
                       run_strategy, train_end2end)

log = logging.getLogger("sicsrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

# Desk-scale defaults: the full pipeline finishes in a few minutes on a laptop.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "strategy": "two-step",
    "paths": {
        "catalog": "catalog.jsonl",
        "interactions": "interactions.csv",
        "clusters": "clusters.csv",
        "pairs": "pairs.csv",
        "heads": "heads.npz",
        "E_text": "E_text.csv",
        "E_ima": "E_ima.csv",
        "stage1": "stage1.npz",
        "stage2": "stage2.npz",
        "end2end": "end2end.npz",
        "reports": "reports",
    },
    "synth": {f.name: f.default for f in dataclasses.fields(SynthSpec) if f.name != "seed"},
    "align": {
        "discriminator": "builtin-cosine",
        "threshold": 0.6,
        "command": None,
        "timeout": 60.0,
        "max_candidates": 20,
        "sft_epochs": 30,
        "sft_lr": 1e-3,
        "sft_batch_size": 64,
        "sft_tau": 0.05,
        "head_hidden": None,
    },
    "model": {
        "n": 10, "d": 32, "num_blocks": 2, "num_heads": 1, "dropout": 0.5,
        "use_residual_layernorm": True, "tau": 0.05, "alpha": 0.1, "lam": 1e-4,
        "lora_rank": 4, "lora_targets": ["W_Q", "W_V"], "adapter_layers": 2,
        "init_std": 0.02, "agg_init": "selector",
    },
    "stage1": {"epochs_max": 200, "patience": 10, "batch_size": 128, "lr": 1e-3, "lam": 1e-4,
               "tau": 0.05, "eval_batch_size": 512, "debug_freeze_checks": False},
    "stage2": {"epochs_max": 200, "patience": 10, "batch_size": 128, "lr": 1e-3, "alpha": 0.1,
               "lam": 1e-4, "tau": 0.05, "eval_batch_size": 512, "lora": True,
               "debug_freeze_checks": False},
    "eval": {"ks": [5, 10], "mask_history": False, "batch_size": 256, "checkpoint": None},
    "bench": {"batch_sizes": [1, 64, 256], "warmup": 2, "repeats": 5,
              "probe_ns": [16, 32, 64], "probe_d": 16, "probe_batch_size": 128},
}


class MissingArtifact(DataError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}: run `sicsrec {producer}` first")


# ------------------------------------------------------------------ config


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    """Defaults ← JSON file ← ``--set a.b=v`` overrides ← ``--seed``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    for text in overrides:
        keys, value = _parse_override(text)
        nested: dict = value  # type: ignore[assignment]
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        synth_spec(cfg).check()
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    model_config(cfg)
    plan(cfg, 1)
    plan(cfg, 2)
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {cfg['strategy']!r}")
    a = cfg["align"]
    if a["discriminator"] not in ("builtin-cosine", "external-command"):
        raise ConfigError("align.discriminator must be 'builtin-cosine' or 'external-command'")
    if a["discriminator"] == "external-command" and not a["command"]:
        raise ConfigError("align.command is required for the external-command discriminator")
    if not cfg["eval"]["ks"] or any(int(k) < 1 for k in cfg["eval"]["ks"]):
        raise ConfigError("eval.ks must be a non-empty list of positive integers")


def synth_spec(cfg: dict) -> SynthSpec:
    try:
        return SynthSpec(seed=cfg["seed"], **cfg["synth"])
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "seed": cfg["seed"]})


def plan(cfg: dict, stage: int) -> TrainPlan:
    section = cfg["stage1" if stage == 1 else "stage2"]
    try:
        return TrainPlan.from_dict({**section, "stage": stage, "seed": cfg["seed"]})
    except ValueError as exc:
        raise ConfigError(f"stage{stage}: {exc}") from exc


# --------------------------------------------------------------- plumbing


class Run:
    """Artifact paths, input/output hashing and the manifest for one command."""

    def __init__(self, command: str, cfg: dict, out: Path, argv: list[str]):
        self.command, self.cfg, self.out, self.argv = command, cfg, out, argv
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.result: dict = {}
        self.t0 = time.perf_counter()
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        out.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        p = Path(self.cfg["paths"][key])
        return p if p.is_absolute() else self.out / p

    def need(self, key: str, producer: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise MissingArtifact(p, producer)
        self.inputs[self.key(p)] = sha256(p)
        return p

    def wrote(self, p: Path) -> Path:
        self.outputs[self.key(p)] = sha256(p)
        return p

    def key(self, p: Path) -> str:
        # relative keys keep manifests comparable across output directories
        try:
            return str(Path(p).relative_to(self.out))
        except ValueError:
            return str(p)

    def report_path(self, name: str) -> Path:
        d = self.path("reports")
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    def manifest(self, tag: str | None = None) -> Path:
        name = self.command if tag is None else f"{self.command}-{tag}"
        d = self.out / "manifests"
        d.mkdir(parents=True, exist_ok=True)
        body = {
            "command": self.command, "tag": tag, "version": __version__,
            "seed": self.cfg["seed"], "config": self.cfg,
            "inputs": self.inputs, "outputs": self.outputs, "result": self.result,
            "timing": {"started": self.started,
                       "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                       "seconds": time.perf_counter() - self.t0},
        }
        p = d / f"{name}.json"
        p.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _corpus(run: Run):
    cat = run.need("catalog", "synth")
    inter = run.need("interactions", "synth")
    return load_corpus(cat, inter)


def _embeddings(run: Run):
    et = load_matrix(run.need("E_text", "sft"))
    ei = load_matrix(run.need("E_ima", "sft"))
    return et, ei


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run, args) -> None:
    spec = synth_spec(run.cfg)
    catalog, log_ = synth_generate(spec)
    save_catalog(catalog, run.path("catalog"))
    save_interactions(log_, run.path("interactions"))
    save_clusters(catalog, run.path("clusters"))
    for key in ("catalog", "interactions", "clusters"):
        run.wrote(run.path(key))
    run.result = {"num_items": catalog.num_items, "num_users": log_.num_users,
                  "num_interactions": sum(len(s) for s in log_.sequences.values())}


def cmd_pairs(run: Run, args) -> None:
    corpus = _corpus(run)
    a = run.cfg["align"]
    if a["discriminator"] == "builtin-cosine":
        disc = CosineDiscriminator(corpus.catalog, a["threshold"])
    else:
        cmd = a["command"] if isinstance(a["command"], list) else str(a["command"]).split()
        disc = ExternalCommandDiscriminator(cmd, a["timeout"])
    pairs = select_pairs(corpus.log, corpus.catalog, disc, a["max_candidates"])
    save_pairs(pairs, run.path("pairs"))
    run.wrote(run.path("pairs"))
    run.result = {"discriminator": disc.name, "pairs": len(pairs),
                  **{k: getattr(pairs, k) for k in ("attempts", "valid", "sentinel", "invalid",
                                                    "failures", "skipped")}}


def cmd_sft(run: Run, args) -> None:
    catalog = load_catalog(run.need("catalog", "synth"))
    pairs = load_pairs(run.need("pairs", "pairs"))
    a, seed, d = run.cfg["align"], run.cfg["seed"], run.cfg["model"]["d"]
    heads = ContentEncoderHead.init(catalog.text_feat.shape[1], catalog.image_feat.shape[1], d,
                                    seed, a["head_hidden"])
    before = encode_content(catalog, heads, d)
    res = run_sft(pairs, catalog, heads, epochs=a["sft_epochs"], batch_size=a["sft_batch_size"],
                  tau=a["sft_tau"], lr=a["sft_lr"], seed=seed)
    et, ei = encode_content(catalog, heads, d)
    write_npz(run.path("heads"), heads.state())
    save_matrix(et, run.path("E_text"))
    save_matrix(ei, run.path("E_ima"))
    for key in ("heads", "E_text", "E_ima"):
        run.wrote(run.path(key))
    run.result = {"pairs": len(pairs), "loss_curve": res.loss_curve,
                  "t2i_cosine_before": mean_pair_cosine(before[0][1:], before[1][1:]),
                  "t2i_cosine_after": mean_pair_cosine(et[1:], ei[1:])}


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    corpus = _corpus(run)
    if args.strategy is not None:
        et, ei = _embeddings(run)
        model, result = run_strategy(args.strategy, corpus, model_config(cfg), et, ei,
                                     plan(cfg, 1), plan(cfg, 2))
        out = run.out / f"{args.strategy}.npz"
        save_checkpoint(model, out, args.strategy)
        run.wrote(out)
        summary = dataclasses.asdict(result)
        _write_json(run.report_path(f"train-{args.strategy}.json"), summary)
        summary.pop("reports")
        run.result = summary
        return
    if args.stage == "1":
        model = SicsRecModel(model_config(cfg), corpus.catalog.num_items,
                             cfg["model"]["d"], cfg["model"]["d"])
        report = pretrain_stage1(model, corpus, plan(cfg, 1), run.path("stage1"))
        out = run.path("stage1")
    elif args.stage == "2":
        ckpt = run.need("stage1", "train --stage 1")
        et, ei = _embeddings(run)
        _, report = posttrain_stage2(ckpt, corpus, et, ei, plan(cfg, 2), run.path("stage2"))
        out = run.path("stage2")
    else:
        et, ei = _embeddings(run)
        model = SicsRecModel(model_config(cfg), corpus.catalog.num_items, et.shape[1], ei.shape[1])
        report = train_end2end(model, corpus, et, ei, plan(cfg, 2), run.path("end2end"))
        out = run.path("end2end")
    run.wrote(out)
    report.save(run.report_path(f"train-{report.stage}.json"))
    run.result = report.summary()


def _checkpoint(run: Run, explicit) -> Path:
    if explicit:
        p = Path(explicit)
        if not p.exists():
            raise MissingArtifact(p, "train")
        run.inputs[run.key(p)] = sha256(p)
        return p
    for key in ("stage2", "stage1"):
        if run.path(key).exists():
            return run.need(key, "train")
    raise MissingArtifact(run.path("stage1"), "train --stage 1")


def cmd_eval(run: Run, args) -> None:
    e = run.cfg["eval"]
    corpus = _corpus(run)
    ckpt = _checkpoint(run, args.checkpoint or e["checkpoint"])
    model, meta = load_checkpoint(ckpt)
    rep = evaluate(model, corpus.split, ks=[int(k) for k in e["ks"]], batch_size=e["batch_size"],
                   mode=args.split, mask_history=e["mask_history"], seed=run.cfg["seed"])
    out = run.report_path(f"eval-{args.split}.json")
    rep.save(out)
    ranks = run.report_path(f"ranks-{args.split}.csv")
    rep.save_ranks(ranks)
    run.wrote(out)
    run.wrote(ranks)
    run.result = {"checkpoint_stage": meta["stage"], "num_users": rep.num_users, **rep.metrics}


def cmd_bench(run: Run, args) -> None:
    b = run.cfg["bench"]
    corpus = _corpus(run)
    model, _ = load_checkpoint(_checkpoint(run, args.checkpoint or run.cfg["eval"]["checkpoint"]))
    table = bench_inference(model, corpus.split, b["batch_sizes"], b["warmup"], b["repeats"])
    probe = scaling_probe(b["probe_ns"], d=b["probe_d"], batch_size=b["probe_batch_size"],
                          warmup=b["warmup"], repeats=max(b["repeats"], 3), seed=run.cfg["seed"])
    out = run.report_path("bench.json")
    # latencies are not reproducible, so the bench report is not hashed
    _write_json(out, {"latency": table, "scaling": dataclasses.asdict(probe)})
    run.result = {"scaling_exponent": probe.exponent}


COMMANDS = {"synth": cmd_synth, "pairs": cmd_pairs, "sft": cmd_sft, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench}


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="sicsrec-run", help="artifact directory (default: %(default)s)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.d=64 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sicsrec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the planted-cluster corpus")
    sub.add_parser("pairs", parents=[common], help="select similar-item pairs with the discriminator")
    sub.add_parser("sft", parents=[common], help="fine-tune the content heads and cache embeddings")
    t = sub.add_parser("train", parents=[common], help="train a stage or a whole strategy")
    t.add_argument("--stage", choices=["1", "2", "end2end"], default="1")
    t.add_argument("--strategy", choices=STRATEGIES,
                   help="train a whole strategy from scratch instead of a single stage")
    e = sub.add_parser("eval", parents=[common], help="leave-one-out full-ranking evaluation")
    e.add_argument("--split", choices=["valid", "test"], default="test")
    e.add_argument("--checkpoint", help="checkpoint path (default: stage2, else stage1)")
    b = sub.add_parser("bench", parents=[common], help="inference latency and scaling probe")
    b.add_argument("--checkpoint", help="checkpoint path (default: stage2, else stage1)")
    sub.add_parser("config", parents=[common], help="print the effective config as JSON")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if args.command == "config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        run = Run(args.command, cfg, Path(args.out), argv)
        COMMANDS[args.command](run, args)
        tag = getattr(args, "strategy", None) or (f"stage{args.stage}" if args.command == "train"
                                                  else getattr(args, "split", None))
        run.manifest(tag)
        print(json.dumps(run.result, sort_keys=True, default=_json_default))
        return EXIT_OK
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, OSError) as exc:
        # DataError and the loaders' format checks
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
