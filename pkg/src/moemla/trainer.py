"""Desk-scale training: tokenizers, batch sampling, AdamW with warmup/cosine, metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .exceptions import ConfigurationError, DecodeError
from .model import LanguageModel, save_checkpoint
from .moe import aux_balance_loss, balancer_update, expert_loads, load_cv, route_record
from .tensor import Tensor, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""


# tokenizers -------------------------------------------------------------------

class ByteTokenizer:
    vocab_size = 256

    def encode(self, text) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(bytes(text))

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def decode_bytes(self, ids) -> bytes:
        ids = list(ids)
        bad = [i for i in ids if not 0 <= i < 256]
        if bad:
            raise DecodeError(f"token id {bad[0]} is not a byte")
        return bytes(ids)


class VocabTokenizer:
    """Fixed vocabulary read from a JSON list of token strings; greedy longest match."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.max_len = max((len(t) for t in self.tokens), default=0)

    @classmethod
    def from_file(cls, path) -> VocabTokenizer:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        out, i = [], 0
        while i < len(text):
            for size in range(min(self.max_len, len(text) - i), 0, -1):
                tid = self.index.get(text[i:i + size])
                if tid is not None:
                    out.append(tid)
                    i += size
                    break
            else:
                raise DecodeError(f"no vocabulary entry covers {text[i]!r} at offset {i}")
        return out

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DecodeError(f"unknown token id {i}")
            out.append(self.tokens[i])
        return "".join(out)


def encode(text, tokenizer=None) -> list[int]:
    return (tokenizer or ByteTokenizer()).encode(text)


def decode(ids, tokenizer=None) -> str:
    return (tokenizer or ByteTokenizer()).decode(ids)


@dataclass
class Corpus:
    """Token stream split into a leading training slice and trailing validation slice."""

    tokens: np.ndarray
    val_fraction: float = 0.1

    @classmethod
    def from_file(cls, path, tokenizer=None, val_fraction: float = 0.1) -> Corpus:
        tok = tokenizer or ByteTokenizer()
        raw = Path(path).read_bytes()
        ids = tok.encode(raw if isinstance(tok, ByteTokenizer) else raw.decode("utf-8"))
        return cls(np.asarray(ids, dtype=np.int64), val_fraction)

    @property
    def split(self) -> int:
        return len(self.tokens) - int(len(self.tokens) * self.val_fraction)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def val(self) -> np.ndarray:
        return self.tokens[self.split:]


def sample_batch(data: np.ndarray, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random contiguous windows; targets are inputs shifted by one."""
    if len(data) < seq_len + 1:
        raise ConfigurationError(f"training slice of {len(data)} tokens is shorter than seq_len+1={seq_len + 1}")
    starts = rng.integers(0, len(data) - seq_len, size=batch_size)
    x = np.stack([data[s:s + seq_len] for s in starts])
    y = np.stack([data[s + 1:s + seq_len + 1] for s in starts])
    return x, y


# optimisation -----------------------------------------------------------------

def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to ``lr_floor`` at the last step."""
    warm = cfg.warmup_steps
    if step <= warm:
        return cfg.lr_peak * step / warm
    progress = min(1.0, (step - warm) / max(1, cfg.steps - warm))
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def clip_gradients(params, clip_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``clip_norm``; return the factor."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    scale = clip_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(scale)
    return scale


@dataclass
class AdamW:
    """Adam with decoupled weight decay, applied as ``theta -= lr*wd*theta`` first.

    Decay is applied only to tensors with two or more axes.
    """

    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step_count: int = 0
    m: list[np.ndarray] = field(default=None)
    v: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, m, v, t, lr, self.beta1, self.beta2, self.eps,
                       self.weight_decay if p.ndim >= 2 else 0.0, c1, c2)


def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8,
               weight_decay: float = 0.1, c1: float | None = None, c2: float | None = None) -> None:
    """In-place AdamW update of ``theta`` and its moment buffers."""
    c1 = c1 if c1 is not None else 1.0 - beta1**step
    c2 = c2 if c2 is not None else 1.0 - beta2**step
    if weight_decay:
        theta -= theta.dtype.type(lr * weight_decay) * theta
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)


# training loop ----------------------------------------------------------------

@dataclass
class TrainState:
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    window_counts: list[np.ndarray] = field(default_factory=list)


def new_train_state(model: LanguageModel, cfg: TrainConfig) -> TrainState:
    model.set_balancing(cfg.balancing, cfg.gamma, cfg.alpha)
    model.dropout_rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamW(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    return TrainState(opt, np.random.default_rng([cfg.seed, 0]))


def train_step(model: LanguageModel, batch: tuple[np.ndarray, np.ndarray], state: TrainState,
               cfg: TrainConfig) -> dict:
    """Forward, loss (+ auxiliary balance loss), backward, clip, AdamW, bias update."""
    x, y = batch
    state.step += 1
    lr = lr_at(state.step, cfg)
    model.train()
    model.zero_grad()
    logits = model.forward(x)
    loss = cross_entropy(logits.reshape(-1, model.cfg.vocab_size), y.reshape(-1))
    primary = loss.item()
    loads = [d.loads for d in model.last_routing]
    aux_value = None
    if cfg.balancing == "aux-loss" and loads:
        aux = None
        for d, f in zip(model.last_routing, loads):
            term = aux_balance_loss(d.probs, f, cfg.alpha)
            aux = term if aux is None else aux + term
        aux_value = aux.item()
        loss = loss + aux
    total = loss.item()
    if not math.isfinite(total):
        raise TrainingError(json.dumps({"step": state.step, "loss": total, "lr": lr, "error": "non-finite loss"}))
    backward(loss)
    grad_norm = global_grad_norm(model.parameters())
    clip_gradients(model.parameters(), cfg.clip_norm)
    state.optimizer.step(lr)
    for router, f in zip(model.routers, loads):
        balancer_update(router, f)
    if len(state.window_counts) != len(loads):
        state.window_counts = [[] for _ in loads]
    for buf, d in zip(state.window_counts, model.last_routing):
        buf.append(np.bincount(d.indices.ravel(), minlength=d.probs.shape[-1]))
        del buf[:-cfg.cv_window]
    record = {
        "step": state.step,
        "loss": primary,
        "lr": lr,
        "grad_norm": grad_norm,
        "cv": [load_cv(f) for f in loads],
    }
    if aux_value is not None:
        record["aux_loss"] = aux_value
    return record


def window_cv(state: TrainState) -> list[float]:
    """Per-layer load CV over the routed slots of the last ``cv_window`` steps."""
    return [load_cv(np.sum(buf, axis=0) / np.sum(buf)) for buf in state.window_counts]


def evaluate(model: LanguageModel, data: np.ndarray, seq_len: int, max_batches: int = 8,
             batch_size: int = 8) -> float:
    """Mean next-token loss over consecutive non-overlapping windows of ``data``."""
    n_windows = min((len(data) - 1) // seq_len, max_batches * batch_size)
    if n_windows <= 0:
        raise ConfigurationError(f"validation slice of {len(data)} tokens is too short for seq_len={seq_len}")
    model.eval()
    losses, counts = [], []
    with no_grad():
        for b0 in range(0, n_windows, batch_size):
            starts = range(b0 * seq_len, min(n_windows, b0 + batch_size) * seq_len, seq_len)
            x = np.stack([data[s:s + seq_len] for s in starts])
            y = np.stack([data[s + 1:s + seq_len + 1] for s in starts])
            logits = model.forward(x)
            losses.append(cross_entropy(logits.reshape(-1, model.cfg.vocab_size), y.reshape(-1)).item())
            counts.append(y.size)
    return float(np.average(losses, weights=counts))


def train(model: LanguageModel, corpus: Corpus, cfg: TrainConfig, metrics_path=None,
          routes_path=None, out_dir=None) -> dict:
    """Run ``cfg.steps`` steps, appending one JSON line per step to ``metrics_path``."""
    state = new_train_state(model, cfg)
    data = corpus.train
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    routes_fh = open(routes_path, "a", encoding="utf-8") if routes_path else None
    records = []
    try:
        for _ in range(cfg.steps):
            batch = sample_batch(data, cfg.batch_size, cfg.seq_len, state.rng)
            try:
                rec = train_step(model, batch, state, cfg)
            except TrainingError as exc:
                if metrics_fh:
                    metrics_fh.write(str(exc) + "\n")
                raise
            records.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
            if routes_fh:
                for i, router in enumerate(model.routers):
                    routes_fh.write(route_record(state.step, i, router) + "\n")
            if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"ckpt_{state.step:06d}.mmr", model, state.step)
            if state.step % 100 == 0:
                log.info("step %d loss %.4f lr %.2e", state.step, rec["loss"], rec["lr"])
    finally:
        if metrics_fh:
            metrics_fh.close()
        if routes_fh:
            routes_fh.close()
    if out_dir:
        save_checkpoint(Path(out_dir) / "final.mmr", model, state.step)
    summary = {"steps": state.step, "final_loss": records[-1]["loss"], "initial_loss": records[0]["loss"]}
    if state.window_counts:
        summary["final_cv"] = window_cv(state)
    if len(corpus.val) > cfg.seq_len:
        summary["val_loss"] = evaluate(model, corpus.val, cfg.seq_len)
    summary["records"] = records
    return summary


def expert_histogram(model: LanguageModel, tokens: np.ndarray, seq_len: int) -> list[np.ndarray]:
    """Per-MoE-layer routed slot counts over consecutive windows of ``tokens``, no learning."""
    counts = [np.zeros(r.n_routed, dtype=np.int64) for r in model.routers]
    model.eval()
    with no_grad():
        for s in range(0, max(1, len(tokens) - 1), seq_len):
            window = tokens[s:s + seq_len]
            if len(window) == 0:
                break
            model.forward(window)
            for c, d in zip(counts, model.last_routing):
                c += np.bincount(d.indices.ravel(), minlength=c.size)
    return counts


__all__ = [
    "AdamW", "ByteTokenizer", "Corpus", "TrainState", "TrainingError", "VocabTokenizer", "adamw_step",
    "clip_gradients", "decode", "encode", "evaluate", "expert_loads", "lr_at", "new_train_state",
    "sample_batch", "train", "train_step", "window_cv",
]
