"""Decoder-only language model built from pre-norm MLA/MoE blocks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (KVCache, MhaLayerWeights, MlaLayerWeights, cache_bytes, mha_forward,
                        mla_forward)
from .config import ModelConfig
from .exceptions import CacheError, CheckpointError
from .moe import ExpertWeights, RouterState, RoutingDecision, expert_ffn, moe_forward, route
from .rope import RopeTable
from .tensor import Tensor, cross_entropy, dropout, flop_scope, layer_norm, matmul, no_grad, softmax

MAGIC = b"MMR1"

_RESIDUAL_OUT = ("attn.w_o", "ffn.w_out", ".w_out")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of every trainable tensor."""
    d, hd = cfg.d_model, cfg.n_heads * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.offset"] = (d,)
        shapes[p + "attn.w_q"] = (d, hd)
        if cfg.attention == "mla":
            r = cfg.latent_dim
            shapes[p + "attn.w_kc"] = (d, r)
            shapes[p + "attn.w_vc"] = (d, r)
            shapes[p + "attn.w_kr"] = (r, hd)
            shapes[p + "attn.w_vr"] = (r, hd)
        else:
            shapes[p + "attn.w_k"] = (d, hd)
            shapes[p + "attn.w_v"] = (d, hd)
        shapes[p + "attn.w_o"] = (hd, d)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.offset"] = (d,)
        if cfg.ffn == "dense":
            shapes[p + "ffn.w_in"] = (d, cfg.d_ff)
            shapes[p + "ffn.w_out"] = (cfg.d_ff, d)
        else:
            h = cfg.expert_hidden
            shapes[p + "moe.w_gate"] = (d, cfg.experts.n_routed)
            for e in range(cfg.experts.n_experts):
                shapes[p + f"moe.experts.{e}.w_in"] = (d, h)
                shapes[p + f"moe.experts.{e}.w_out"] = (h, d)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.offset"] = (d,)
    return shapes


def param_counts(cfg: ModelConfig) -> dict[str, int]:
    """Total parameters and parameters touched per token.

    Active excludes the routed experts a token does not select, so each
    MoE layer contributes ``n_shared + top_k`` of its experts.
    """
    total = sum(math.prod(s) for s in parameter_shapes(cfg).values())
    active = total
    if cfg.ffn == "moe":
        ex = cfg.experts
        per_expert = 2 * cfg.d_model * cfg.expert_hidden
        active -= cfg.n_layers * (ex.n_routed - ex.top_k) * per_expert
    return {"total": total, "active": active}


@dataclass
class Layer:
    ln1_gain: Tensor
    ln1_offset: Tensor
    attn: MlaLayerWeights | MhaLayerWeights
    ln2_gain: Tensor
    ln2_offset: Tensor
    ffn: ExpertWeights | tuple[Tensor, Tensor]
    router: RouterState | None


class LanguageModel:
    """Token embedding, ``n_layers`` pre-norm blocks, final norm, tied unembedding."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        dtype = cfg.dtype
        shapes = parameter_shapes(cfg)
        if params is None:
            params = self._init_params(shapes)
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name not in params:
                raise CheckpointError(f"missing tensor {name!r}")
            arr = np.asarray(params[name], dtype=dtype)
            if arr.shape != shape:
                raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr.copy(), requires_grad=True)
        self.rope = RopeTable.build(cfg.head_dim, cfg.max_seq, cfg.rope_base)
        self.layers = [self._layer(i) for i in range(cfg.n_layers)]
        self.training = False
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])
        self.last_routing: list[RoutingDecision] = []

    def _init_params(self, shapes):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        out_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".gain"):
                params[name] = np.ones(shape)
            elif name.endswith(".offset"):
                params[name] = np.zeros(shape)
            else:
                w = rng.normal(0.0, cfg.init_std, size=shape)
                if name.endswith(_RESIDUAL_OUT):
                    w *= out_scale
                params[name] = w
        return params

    def _layer(self, i: int) -> Layer:
        cfg, p = self.cfg, self.params
        pre = f"layers.{i}."
        if cfg.attention == "mla":
            attn = MlaLayerWeights(p[pre + "attn.w_q"], p[pre + "attn.w_kc"], p[pre + "attn.w_vc"],
                                   p[pre + "attn.w_kr"], p[pre + "attn.w_vr"], p[pre + "attn.w_o"],
                                   cfg.n_heads)
        else:
            attn = MhaLayerWeights(p[pre + "attn.w_q"], p[pre + "attn.w_k"], p[pre + "attn.w_v"],
                                   p[pre + "attn.w_o"], cfg.n_heads)
        router = None
        if cfg.ffn == "dense":
            ffn = (p[pre + "ffn.w_in"], p[pre + "ffn.w_out"])
        else:
            n = cfg.experts.n_experts
            ffn = ExpertWeights(p[pre + "moe.w_gate"],
                                [p[pre + f"moe.experts.{e}.w_in"] for e in range(n)],
                                [p[pre + f"moe.experts.{e}.w_out"] for e in range(n)],
                                cfg.experts.n_shared)
            router = RouterState(cfg.experts.n_routed)
        return Layer(p[pre + "ln1.gain"], p[pre + "ln1.offset"], attn,
                     p[pre + "ln2.gain"], p[pre + "ln2.offset"], ffn, router)

    # ------------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> LanguageModel:
        self.training = mode
        return self

    def eval(self) -> LanguageModel:
        return self.train(False)

    @property
    def routers(self) -> list[RouterState]:
        return [layer.router for layer in self.layers if layer.router is not None]

    def set_balancing(self, strategy: str, gamma: float, alpha: float) -> None:
        for r in self.routers:
            r.strategy, r.gamma, r.alpha = strategy, gamma, alpha
            r.__post_init__()

    def new_cache(self, capacity: int | None = None) -> KVCache:
        cfg = self.cfg
        width = cfg.latent_dim if cfg.attention == "mla" else cfg.d_model
        return KVCache(cfg.attention, cfg.n_layers, width, capacity or cfg.max_seq)

    def cache_bytes_expected(self, n: int, batch: int = 1) -> int:
        cfg = self.cfg
        return cache_bytes(cfg.attention, n, cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.latent_dim,
                           cfg.dtype.itemsize, batch)

    # ------------------------------------------------------------------
    def block_forward(self, i: int, x: Tensor, cache: KVCache | None = None,
                      frozen: np.ndarray | None = None) -> Tensor:
        """``h = x + Attn(LN(x))``; ``out = h + FFN(LN(h))`` for ``x`` of shape [B, n, d]."""
        layer = self.layers[i]
        rate = self.cfg.dropout if self.training else 0.0
        rng = self.dropout_rng if self.training else None
        layer_cache = cache.layers[i] if cache is not None else None
        attn_fn = mla_forward if self.cfg.attention == "mla" else mha_forward
        a = attn_fn(layer_norm(x, layer.ln1_gain, layer.ln1_offset), layer.attn, layer_cache,
                    self.rope, True, rate, rng)
        h = x + a
        z = layer_norm(h, layer.ln2_gain, layer.ln2_offset)
        b, n, d = z.shape
        flat = z.reshape(b * n, d)
        if layer.router is None:
            with flop_scope("ffn"):
                f = expert_ffn(flat, *layer.ffn)
        else:
            decision = route(flat, layer.router, layer.ffn, self.cfg.experts.top_k, frozen)
            self.last_routing.append(decision)
            f = moe_forward(flat, layer.ffn, decision)
        f = dropout(f, rate, rng)
        return h + f.reshape(b, n, d)

    def forward(self, tokens, cache: KVCache | None = None,
                frozen_routing: list[np.ndarray] | None = None) -> Tensor:
        """Next-token logits ``[B, n, vocab]`` (or ``[n, vocab]`` for 1-D input)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        b, n = tokens.shape
        start = cache.length if cache is not None else 0
        if start + n > self.cfg.max_seq:
            raise CacheError(f"sequence of {start + n} tokens exceeds max_seq={self.cfg.max_seq}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        embed = self.params["embed"]
        x = embed[tokens]
        self.last_routing = []
        moe_i = 0
        for i in range(self.cfg.n_layers):
            frozen = None
            if frozen_routing is not None and self.layers[i].router is not None:
                frozen = frozen_routing[moe_i]
                moe_i += 1
            x = self.block_forward(i, x, cache, frozen)
        x = layer_norm(x, self.params["ln_f.gain"], self.params["ln_f.offset"])
        with flop_scope("head"):
            logits = matmul(x, embed.T)
        return logits.reshape(n, -1) if squeeze else logits

    __call__ = forward

    def loss(self, tokens, targets, frozen_routing=None) -> Tensor:
        logits = self.forward(tokens, frozen_routing=frozen_routing)
        return cross_entropy(logits.reshape(-1, self.cfg.vocab_size), np.asarray(targets).reshape(-1))

    # ------------------------------------------------------------------
    def generate(self, prompt, max_new: int, mode: str = "greedy", temperature: float = 1.0,
                 top_p: float = 1.0, rng: np.random.Generator | None = None,
                 use_cache: bool = True) -> list[int]:
        """Autoregressive continuation of ``prompt``.

        ``mode`` is ``greedy``, ``temperature`` or ``top-p``. Sampling modes
        draw from ``rng`` (seeded from the config when omitted).
        """
        tokens = [int(t) for t in prompt]
        if max_new == 0:
            return tokens
        if not tokens:
            raise ValueError("generate needs a non-empty prompt")
        if len(tokens) + max_new > self.cfg.max_seq:
            raise CacheError(f"prompt {len(tokens)} + max_new {max_new} exceeds max_seq={self.cfg.max_seq}")
        if mode not in ("greedy", "temperature", "top-p"):
            raise ValueError(f"unknown decoding mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(self.cfg.seed)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                cache = self.new_cache() if use_cache else None
                feed = tokens
                for _ in range(max_new):
                    logits = self.forward(feed if use_cache else tokens, cache=cache)
                    nxt = _pick(logits.data[-1].astype(np.float64), mode, temperature, top_p, rng)
                    tokens.append(nxt)
                    feed = [nxt]
        finally:
            self.train(was_training)
        return tokens

    # ------------------------------------------------------------------
    def save(self, path, step: int = 0) -> None:
        save_checkpoint(path, self, step)

    @classmethod
    def load(cls, path) -> LanguageModel:
        return load_checkpoint(path)[0]


def _pick(logits: np.ndarray, mode: str, temperature: float, top_p: float, rng) -> int:
    if mode == "greedy" or temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    if mode == "top-p" and top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        keep = order[: int(np.searchsorted(cum, top_p) + 1)]
        mask = np.zeros_like(p)
        mask[keep] = p[keep]
        p = mask / mask.sum()
    return int(rng.choice(p.size, p=p))


# checkpoint format --------------------------------------------------------------
# "MMR1" | u32 LE header length | UTF-8 JSON header | float32 LE payload

def save_checkpoint(path, model: LanguageModel, step: int = 0, extra: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "config": model.cfg.to_dict(),
        "manifest": manifest,
        "step": step,
        "router_states": [r.to_dict() for r in model.routers],
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse header and tensors, validating magic and manifest layout."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (expected {MAGIC!r})")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = memoryview(data)[8 + hlen:]
    tensors = {}
    expected = 0
    for entry in header.get("manifest", []):
        size = 4 * math.prod(entry["shape"])
        if entry["offset"] != expected:
            raise CheckpointError(f"{path}: manifest entry {entry['name']!r} is not contiguous")
        if expected + size > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        arr = np.frombuffer(payload[expected:expected + size], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        expected += size
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload) - expected} trailing bytes")
    return header, tensors


def load_checkpoint(path) -> tuple[LanguageModel, dict]:
    header, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config in header: {exc}") from exc
    model = LanguageModel(cfg, tensors)
    states = header.get("router_states", [])
    for layer_state, router in zip(states, model.routers):
        r = RouterState.from_dict(layer_state)
        router.strategy, router.gamma, router.alpha = r.strategy, r.gamma, r.alpha
        router.bias, router.loads = r.bias, r.loads
    return model, header


def next_token_probs(model: LanguageModel, tokens) -> np.ndarray:
    with no_grad():
        return softmax(model.forward(tokens), axis=-1).data
