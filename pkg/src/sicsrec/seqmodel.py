"""Three-tower preference network: ID encoder, content encoder over fused
text/image embeddings, and a cross-attention decoder, aggregated by a linear
projection and scored against the item-ID table."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from . import numerics as nx
from .numerics import Param, Tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n: int = 50
    d: int = 256
    num_blocks: int = 2
    num_heads: int = 1
    dropout: float = 0.5
    use_residual_layernorm: bool = True
    tau: float = 0.05
    alpha: float = 0.1
    lam: float = 1e-4
    lora_rank: int = 8
    lora_targets: tuple[str, ...] = ("W_Q", "W_V")
    adapter_layers: int = 2
    init_std: float = 0.02
    agg_init: str = "selector"   # selector | normal
    seed: int = 0

    def check(self) -> None:
        if self.d <= 0 or self.n <= 0 or self.num_blocks < 1:
            raise ConfigError("d, n and num_blocks must be positive")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if self.adapter_layers not in (1, 2):
            raise ConfigError("adapter_layers must be 1 or 2")
        if self.agg_init not in ("selector", "normal"):
            raise ConfigError("agg_init must be 'selector' or 'normal'")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "lora_targets" in d:
            d["lora_targets"] = tuple(d["lora_targets"])
        cfg = cls(**d)
        cfg.check()
        return cfg


@dataclass
class ForwardTrace:
    M_e: Tensor | None
    M_c: Tensor | None
    H_e: Tensor | None
    H_c: Tensor | None
    H_m: Tensor | None
    h_e: Tensor
    h_c: Tensor
    h_m: Tensor
    h_a: Tensor
    logits: Tensor | None = None


def _trunc_normal(rng, std, shape):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


TOWER_WEIGHTS = ("W_Q", "W_K", "W_V", "W_1", "b_1", "W_2", "b_2")
LN_WEIGHTS = ("ln1.g", "ln1.b", "ln2.g", "ln2.b")


class SicsRecModel:
    """All learnable state lives in ``self.params`` (name -> Param)."""

    def __init__(self, config: ModelConfig, num_items: int, text_dim: int | None = None,
                 image_dim: int | None = None):
        config.check()
        self.config = config
        self.num_items = num_items
        d, n = config.d, config.n
        self.text_dim = text_dim or d
        self.image_dim = image_dim or d
        self.lora: dict[str, tuple[str, str]] = {}
        # which towers feed the aggregation: "all", "id" (ID-only) or "content"
        self.paths = "all"
        rng = nx.make_rng(config.seed, "init")
        std = config.init_std
        p: dict[str, Param] = {}
        p["E_id"] = Param(_trunc_normal(rng, std, (num_items + 1, d)), "E_id")
        p["P"] = Param(_trunc_normal(rng, std, (n, d)), "P")
        p["E_text"] = Param(np.zeros((num_items + 1, self.text_dim)), "E_text", trainable=False)
        p["E_ima"] = Param(np.zeros((num_items + 1, self.image_dim)), "E_ima", trainable=False)
        for tag, d_in in (("adapter_text", self.text_dim), ("adapter_ima", self.image_dim)):
            if config.adapter_layers == 2:
                p[f"{tag}.W_1"] = Param(_trunc_normal(rng, std, (d_in, d)), f"{tag}.W_1")
                p[f"{tag}.b_1"] = Param(np.zeros((1, d)), f"{tag}.b_1")
                p[f"{tag}.W_2"] = Param(_trunc_normal(rng, std, (d, d)), f"{tag}.W_2")
                p[f"{tag}.b_2"] = Param(np.zeros((1, d)), f"{tag}.b_2")
            else:
                p[f"{tag}.W_1"] = Param(_trunc_normal(rng, std, (d_in, d)), f"{tag}.W_1")
                p[f"{tag}.b_1"] = Param(np.zeros((1, d)), f"{tag}.b_1")
        prefixes = [f"id.{b}" for b in range(config.num_blocks)]
        prefixes += [f"con.{b}" for b in range(config.num_blocks)]
        prefixes += ["mix.0"]
        for pre in prefixes:
            for w in TOWER_WEIGHTS:
                shape = (1, d) if w.startswith("b") else (d, d)
                init = np.zeros(shape) if w.startswith("b") else _trunc_normal(rng, std, shape)
                p[f"{pre}.{w}"] = Param(init, f"{pre}.{w}")
            if config.use_residual_layernorm:
                for w in LN_WEIGHTS:
                    init = np.ones((1, d)) if w.endswith("g") else np.zeros((1, d))
                    p[f"{pre}.{w}"] = Param(init, f"{pre}.{w}")
        if config.agg_init == "selector":
            w_agg = np.vstack([np.eye(d), np.zeros((2 * d, d))])
        else:
            w_agg = _trunc_normal(rng, std, (3 * d, d))
        p["W_agg"] = Param(w_agg, "W_agg")
        p["b_agg"] = Param(np.zeros((1, d)), "b_agg")
        self.params = p

    # ---------------------------------------------------------- bookkeeping

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def trainable(self) -> list[Param]:
        return [q for q in self.params.values() if q.trainable]

    @staticmethod
    def group_of(name: str) -> str:
        if name == "E_id":
            return "id_emb"
        if name == "P":
            return "pos"
        if name in ("E_text", "E_ima"):
            return "content_tables"
        if ".lora_" in name:
            return "lora"
        if name.startswith("adapter_"):
            return "adapters"
        if name.startswith("id."):
            return "id_tower"
        if name.startswith("con."):
            return "con_tower"
        if name.startswith("mix."):
            return "mix"
        if name in ("W_agg", "b_agg"):
            return "agg"
        raise KeyError(name)

    def set_trainable(self, groups: Iterable[str]) -> None:
        """Make exactly the parameters in ``groups`` trainable."""
        groups = set(groups)
        for name, q in self.params.items():
            q.trainable = self.group_of(name) in groups

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise ConfigError(f"unexpected parameter {k!r}")
            if v.shape != self.params[k].shape:
                raise ConfigError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].value[...] = v

    def set_content(self, E_text: np.ndarray, E_ima: np.ndarray) -> None:
        """Install frozen per-item content tables (row 0 = padding)."""
        for key, tab in (("E_text", E_text), ("E_ima", E_ima)):
            want = self.params[key].shape
            if np.shape(tab) != want:
                raise ConfigError(f"{key} table has shape {np.shape(tab)}, model expects {want}")
            self.params[key].value[...] = tab

    # ---------------------------------------------------------------- LoRA

    def lora_apply(self, targets: Iterable[str] | None = None, r: int | None = None,
                   seed: int | None = None) -> None:
        """Attach ``W0 + B A`` factors (B zero, A normal) to ID-tower matrices."""
        targets = tuple(targets if targets is not None else self.config.lora_targets)
        r = self.config.lora_rank if r is None else r
        if r < 1:
            raise nx.ParameterError("LoRA rank must be >= 1")
        rng = nx.make_rng(self.config.seed if seed is None else seed, "lora")
        for b in range(self.config.num_blocks):
            for t in targets:
                name = f"id.{b}.{t}"
                if name not in self.params or t.startswith("b") or t.startswith("ln"):
                    raise nx.ParameterError(f"{name} is not an ID-tower weight matrix")
                if name in self.lora:
                    continue
                d_in, d_out = self.params[name].shape
                if r >= min(d_in, d_out):
                    raise nx.ParameterError(f"rank {r} must be below min{(d_in, d_out)}")
                a_name, b_name = f"{name}.lora_A", f"{name}.lora_B"
                self.params[a_name] = Param(rng.normal(0.0, 1.0 / math.sqrt(d_out), (r, d_out)), a_name)
                self.params[b_name] = Param(np.zeros((d_in, r)), b_name)
                self.params[name].trainable = False
                self.lora[name] = (a_name, b_name)

    def weight(self, name: str) -> Tensor:
        w = self.params[name]
        if name in self.lora:
            a_name, b_name = self.lora[name]
            return nx.add(w, nx.matmul(self.params[b_name], self.params[a_name]))
        return w

    def effective_weight(self, name: str) -> np.ndarray:
        with nx.no_grad():
            return self.weight(name).value.copy()

    # ------------------------------------------------------------- layers

    def embed_id(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.shape[-1] != self.config.n:
            raise nx.ShapeError(f"sequence length {ids.shape[-1]} != n={self.config.n}")
        return nx.add(nx.take_rows(self.params["E_id"], ids), self.params["P"])

    def _adapter(self, tag: str, x) -> Tensor:
        p = self.params
        if self.config.adapter_layers == 2:
            return nx.ffn(x, p[f"{tag}.W_1"], p[f"{tag}.b_1"], p[f"{tag}.W_2"], p[f"{tag}.b_2"])
        return nx.add(nx.matmul(x, p[f"{tag}.W_1"]), p[f"{tag}.b_1"])

    def content_rows(self, ids) -> tuple[Tensor, Tensor]:
        """Adapter outputs for item ids, before positions are added."""
        ids = np.asarray(ids)
        t = self._adapter("adapter_text", nx.take_rows(self.params["E_text"], ids))
        g = self._adapter("adapter_ima", nx.take_rows(self.params["E_ima"], ids))
        return t, g

    def embed_content(self, ids) -> tuple[Tensor, Tensor]:
        t, g = self.content_rows(ids)
        P = self.params["P"]
        return nx.add(t, P), nx.add(g, P)

    @staticmethod
    def fuse_content(M_t, M_g, eps: float = 1e-12) -> Tensor:
        return nx.l2_normalize_rows(nx.add(M_t, M_g), eps)

    def item_content(self, ids) -> Tensor:
        """Fused content embedding per item (no position term)."""
        return self.fuse_content(*self.content_rows(ids))

    def _attend(self, pre, x, kv, mask, training, rng) -> Tensor:
        cfg = self.config
        q = nx.matmul(x, self.weight(f"{pre}.W_Q"))
        k = nx.matmul(kv, self.weight(f"{pre}.W_K"))
        v = nx.matmul(kv, self.weight(f"{pre}.W_V"))
        rate = cfg.dropout if training else 0.0
        h = cfg.num_heads
        if h == 1:
            return nx.attention(q, k, v, causal_mask=True, scale=1.0 / math.sqrt(cfg.d),
                                key_mask=mask, dropout=rate, rng=rng)
        dh = cfg.d // h
        outs = []
        for i in range(h):
            cols = (Ellipsis, slice(i * dh, (i + 1) * dh))
            outs.append(nx.attention(nx.index(q, cols), nx.index(k, cols), nx.index(v, cols),
                                     causal_mask=True, scale=1.0 / math.sqrt(dh),
                                     key_mask=mask, dropout=rate, rng=rng))
        return nx.concat(outs, axis=-1)

    def _block(self, pre, x, kv, mask, training, rng) -> Tensor:
        cfg = self.config
        p = self.params
        rate = cfg.dropout if training else 0.0
        a = self._attend(pre, x, kv, mask, training, rng)
        if cfg.use_residual_layernorm:
            a = nx.layer_norm(nx.add(x, nx.dropout_(a, rate, rng)), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        f = nx.ffn(a, self.weight(f"{pre}.W_1"), p[f"{pre}.b_1"], self.weight(f"{pre}.W_2"), p[f"{pre}.b_2"])
        f = nx.dropout_(f, rate, rng)
        if cfg.use_residual_layernorm:
            f = nx.layer_norm(nx.add(a, f), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        return f

    def _encoder(self, tower, x, mask, training, rng) -> Tensor:
        rate = self.config.dropout if training else 0.0
        x = nx.dropout_(x, rate, rng)
        for b in range(self.config.num_blocks):
            x = self._block(f"{tower}.{b}", x, x, mask, training, rng)
        return x

    def id_encoder(self, M_e, mask, training=False, rng=None) -> Tensor:
        return self._encoder("id", M_e, mask, training, rng)

    def content_encoder(self, M_c, mask, training=False, rng=None) -> Tensor:
        return self._encoder("con", M_c, mask, training, rng)

    def mix_decoder(self, H_e, H_c, mask, training=False, rng=None) -> Tensor:
        return self._block("mix.0", H_e, H_c, mask, training, rng)

    @staticmethod
    def last(H) -> Tensor:
        # sequences are left-padded, so the last position is the last real item
        return nx.index(H, (Ellipsis, -1, slice(None)))

    def aggregate(self, h_e, h_c, h_m) -> Tensor:
        return nx.add(nx.matmul(nx.concat([h_e, h_c, h_m], axis=-1), self.params["W_agg"]),
                      self.params["b_agg"])

    def score_items(self, h_a) -> Tensor:
        """Logits over items 1..|I| (column j is item j+1)."""
        items = nx.index(self.params["E_id"], (slice(1, None),))
        return nx.matmul(h_a, nx.transpose(items))

    def forward(self, ids, mask, training: bool = False, rng=None, paths: str | None = None,
                score: bool = True) -> ForwardTrace:
        """Run the towers named by ``paths`` (default ``self.paths``).

        Towers left out contribute zero vectors to the aggregation, which is
        exactly what a selector projection would make of them.
        """
        paths = self.paths if paths is None else paths
        if paths not in ("all", "id", "content"):
            raise ValueError(f"unknown paths {paths!r}")
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        M_e = H_e = M_c = H_c = H_m = None
        zeros = nx.Tensor(np.zeros(ids.shape[:-1] + (self.config.d,)))
        h_e = h_c = h_m = zeros
        if paths in ("all", "id"):
            M_e = self.embed_id(ids)
            H_e = self.id_encoder(M_e, mask, training, rng)
            h_e = self.last(H_e)
        if paths in ("all", "content"):
            M_t, M_g = self.embed_content(ids)
            M_c = self.fuse_content(M_t, M_g)
            H_c = self.content_encoder(M_c, mask, training, rng)
            h_c = self.last(H_c)
        if paths == "all":
            H_m = self.mix_decoder(H_e, H_c, mask, training, rng)
            h_m = self.last(H_m)
        h_a = self.aggregate(h_e, h_c, h_m)
        logits = self.score_items(h_a) if score else None
        return ForwardTrace(M_e, M_c, H_e, H_c, H_m, h_e, h_c, h_m, h_a, logits)

    def predict(self, ids, mask, paths: str | None = None) -> np.ndarray:
        with nx.no_grad():
            return self.forward(ids, mask, training=False, paths=paths).logits.value


def save_checkpoint(model: SicsRecModel, path, stage: str, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Single ``.npz``: named arrays plus a JSON ``__meta__`` record."""
    meta = {
        "format": "sicsrec-checkpoint",
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": asdict(model.config),
        "num_items": model.num_items,
        "text_dim": model.text_dim,
        "image_dim": model.image_dim,
        "lora": {k: list(v) for k, v in model.lora.items()},
        "paths": model.paths,
        "trainable": {k: v.trainable for k, v in model.params.items()},
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "rng_state": rng_state,
        "extra": extra or {},
    }
    arrays = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    arrays.update((f"param/{k}", v.value) for k, v in model.params.items())
    write_npz(path, arrays)


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps entries with the current time; a fixed stamp keeps
    # identical checkpoints byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> tuple[SicsRecModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != "sicsrec-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format")
        cfg = ModelConfig.from_dict(meta["config"])
        model = SicsRecModel(cfg, meta["num_items"], meta["text_dim"], meta["image_dim"])
        if meta["lora"]:
            targets = sorted({k.split(".")[2] for k in meta["lora"]})
            rank = z[f"param/{next(iter(meta['lora'].values()))[0]}"].shape[0]
            model.lora_apply(targets, rank)
        expected = {k: tuple(v.shape) for k, v in model.params.items()}
        stored = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        if set(stored) != set(expected):
            raise ConfigError(f"{path}: parameter names do not match config "
                              f"(missing {sorted(set(expected) - set(stored))[:3]}, "
                              f"extra {sorted(set(stored) - set(expected))[:3]})")
        for k, v in stored.items():
            if tuple(v.shape) != expected[k]:
                raise ConfigError(f"{path}: {k} has shape {v.shape}, config implies {expected[k]}")
            model.params[k].value[...] = v
        model.paths = meta.get("paths", "all")
        for k, flag in meta.get("trainable", {}).items():
            model.params[k].trainable = bool(flag)
    return model, meta
