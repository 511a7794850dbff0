"""Multi-head latent attention, the standard multi-head baseline, and KV caches.

Latent attention compresses every token once into two width-``r`` codes
(shared by all heads); only these codes are cached. Each decode step
reconstructs per-head keys and values from the whole cache, applies the
rotary embedding to queries and reconstructed keys, and attends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import CacheError, ConfigurationError
from .rope import RopeTable, rope_apply
from .tensor import Tensor, concat, dropout, flop_scope, masked_fill, matmul, softmax


@dataclass
class MlaLayerWeights:
    w_q: Tensor  # [d, H*d_k]
    w_kc: Tensor  # [d, r], shared across heads
    w_vc: Tensor  # [d, r], shared across heads
    w_kr: Tensor  # [r, H*d_k], head h owns columns h*d_k:(h+1)*d_k
    w_vr: Tensor  # [r, H*d_k]
    w_o: Tensor  # [H*d_k, d]
    n_heads: int

    def __post_init__(self):
        d, r = self.w_kc.shape
        if r > d:
            raise ConfigurationError(f"latent width r={r} exceeds model width d={d}")
        if self.w_q.shape[1] != d:
            raise ConfigurationError("H*d_k must equal d")

    @property
    def latent_dim(self) -> int:
        return self.w_kc.shape[1]


@dataclass
class MhaLayerWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int


class LayerKVCache:
    """Append-only key/value rows for one layer, shaped ``[batch, n_cached, width]``."""

    def __init__(self, width: int, capacity: int):
        self.width = width
        self.capacity = capacity
        self.keys: np.ndarray | None = None
        self.values: np.ndarray | None = None

    def __len__(self) -> int:
        return 0 if self.keys is None else self.keys.shape[1]

    def check_room(self, n_new: int) -> None:
        if len(self) + n_new > self.capacity:
            raise CacheError(f"cache holds {len(self)} rows; adding {n_new} exceeds capacity {self.capacity}")

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        self.check_room(keys.shape[1])
        if self.keys is None:
            self.keys, self.values = keys.copy(), values.copy()
        else:
            self.keys = np.concatenate([self.keys, keys], axis=1)
            self.values = np.concatenate([self.values, values], axis=1)

    @property
    def nbytes(self) -> int:
        if self.keys is None:
            return 0
        return self.keys.nbytes + self.values.nbytes


class KVCache:
    """Per-layer caches for one decoding session.

    ``kind`` is ``"mla"`` (width ``r`` latent codes) or ``"mha"`` (width
    ``H*d_k`` rotated keys and values).
    """

    def __init__(self, kind: str, n_layers: int, width: int, capacity: int):
        if kind not in ("mla", "mha"):
            raise ConfigurationError(f"unknown cache kind {kind!r}")
        self.kind = kind
        self.layers = [LayerKVCache(width, capacity) for _ in range(n_layers)]

    @property
    def length(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    @property
    def capacity(self) -> int:
        return self.layers[0].capacity

    @property
    def nbytes(self) -> int:
        return sum(layer.nbytes for layer in self.layers)


class LatentKVCache(KVCache):
    """Compressed cache: one shared ``C^K``/``C^V`` pair of width ``r`` per layer."""

    def __init__(self, n_layers: int, latent_dim: int, capacity: int):
        super().__init__("mla", n_layers, latent_dim, capacity)


def cache_bytes(kind: str, n: int, n_layers: int, n_heads: int, head_dim: int, latent_dim: int,
                bytes_per_elem: int, batch: int = 1) -> int:
    """Bytes held by a cache of ``n`` tokens: keys plus values, every layer."""
    if kind == "mha":
        width = n_heads * head_dim
    elif kind == "mla":
        width = latent_dim
    else:
        raise ConfigurationError(f"unknown cache kind {kind!r}")
    return 2 * batch * n * n_layers * width * bytes_per_elem


def compress_kv(x: Tensor, w: MlaLayerWeights) -> tuple[Tensor, Tensor]:
    """Shared latent key/value codes ``x @ W_Kc`` and ``x @ W_Vc``."""
    return matmul(x, w.w_kc), matmul(x, w.w_vc)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, hd = t.shape
    return t.reshape(b, n, n_heads, hd // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dk = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _attend(q: Tensor, k: Tensor, v: Tensor, start: int, causal: bool, drop_rate: float,
            rng) -> Tensor:
    """Scaled dot-product attention of rotated queries at ``start..`` over rotated keys."""
    n_new, total = q.shape[2], k.shape[2]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(q.shape[-1]))
    if causal:
        future = np.arange(total)[None, :] > np.arange(start, start + n_new)[:, None]
        scores = masked_fill(scores, future, -np.inf)
    probs = dropout(softmax(scores, axis=-1), drop_rate, rng)
    return matmul(probs, v)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def mla_forward(x: Tensor, w: MlaLayerWeights, cache: LayerKVCache | None, rope: RopeTable,
                causal: bool = True, drop_rate: float = 0.0, rng=None) -> Tensor:
    """Latent attention over ``x`` of shape ``[n_new, d]`` or ``[batch, n_new, d]``.

    New latent rows are appended to ``cache`` (when given) and keys/values
    are reconstructed from every cached row.
    """
    x, squeeze = _as_batch(x)
    n_new = x.shape[1]
    start = 0
    if cache is not None:
        cache.check_room(n_new)
        start = len(cache)
    with flop_scope("attn.q"):
        q = _split_heads(matmul(x, w.w_q), w.n_heads)
    with flop_scope("attn.compress"):
        c_k, c_v = compress_kv(x, w)
    if cache is not None:
        if start:
            c_k = concat([Tensor(cache.keys), c_k], axis=1)
            c_v = concat([Tensor(cache.values), c_v], axis=1)
            cache.append(c_k.data[:, start:], c_v.data[:, start:])
        else:
            cache.append(c_k.data, c_v.data)
    with flop_scope("attn.reconstruct"):
        k = _split_heads(matmul(c_k, w.w_kr), w.n_heads)
        v = _split_heads(matmul(c_v, w.w_vr), w.n_heads)
    q = rope_apply(q, np.arange(start, start + n_new), rope)
    k = rope_apply(k, np.arange(k.shape[2]), rope)
    with flop_scope("attn.scores"):
        ctx = _attend(q, k, v, start, causal, drop_rate, rng)
    with flop_scope("attn.out"):
        y = matmul(_merge_heads(ctx), w.w_o)
    return y.reshape(y.shape[1:]) if squeeze else y


def mha_forward(x: Tensor, w: MhaLayerWeights, cache: LayerKVCache | None, rope: RopeTable,
                causal: bool = True, drop_rate: float = 0.0, rng=None) -> Tensor:
    """Standard multi-head attention; the cache holds rotated keys and raw values."""
    x, squeeze = _as_batch(x)
    n_new = x.shape[1]
    start = 0
    if cache is not None:
        cache.check_room(n_new)
        start = len(cache)
    with flop_scope("attn.q"):
        q = _split_heads(matmul(x, w.w_q), w.n_heads)
    with flop_scope("attn.kv"):
        k = _split_heads(matmul(x, w.w_k), w.n_heads)
        v = _split_heads(matmul(x, w.w_v), w.n_heads)
    k = rope_apply(k, np.arange(start, start + n_new), rope)
    if cache is not None:
        b = x.shape[0]
        flat_k = k.transpose(0, 2, 1, 3).reshape(b, n_new, -1)
        flat_v = v.transpose(0, 2, 1, 3).reshape(b, n_new, -1)
        if start:
            flat_k = concat([Tensor(cache.keys), flat_k], axis=1)
            flat_v = concat([Tensor(cache.values), flat_v], axis=1)
            cache.append(flat_k.data[:, start:], flat_v.data[:, start:])
        else:
            cache.append(flat_k.data, flat_v.data)
        k = _split_heads(flat_k, w.n_heads)
        v = _split_heads(flat_v, w.n_heads)
    q = rope_apply(q, np.arange(start, start + n_new), rope)
    with flop_scope("attn.scores"):
        ctx = _attend(q, k, v, start, causal, drop_rate, rng)
    with flop_scope("attn.out"):
        y = matmul(_merge_heads(ctx), w.w_o)
    return y.reshape(y.shape[1:]) if squeeze else y
