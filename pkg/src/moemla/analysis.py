"""
Closed-form cost and memory models, reconciled against instrumented counts.

Two families of formulas live here:

* the reference attention forms (``flops_mha``, ``flops_mla(mode="as-stated")``),
  which count one operation per multiply-accumulate;
* "as-implemented" forms, which count exactly what ``tensor.matmul`` charges
  (2 FLOPs per multiply-accumulate) for the code paths in this package.

The reference latent-attention form charges ``2n^2 r`` for attention in the
compressed space. This package rotates reconstructed keys, which rules that
shortcut out, so attention runs at full width ``d`` and the reconciliation
target is the as-implemented form.

MoE costs are per token. The asymptotic per-token terms are
``O(dN)`` routing, ``O(k d^2 N_s / N)`` active experts and ``O(N_s d^2 / N)``
shared experts; they are documented only since they cannot be checked
exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .config import ModelConfig
from .tensor import counting_flops, no_grad

MB = 1 << 20


def _ratio(rho) -> Fraction:
    if isinstance(rho, Fraction):
        return rho
    if isinstance(rho, str):
        return Fraction(rho)
    return Fraction(rho).limit_denominator(1 << 20)


def _exact(value: Fraction):
    return int(value) if value.denominator == 1 else value


def flops_mha(n: int, d: int) -> int:
    """Per-layer multi-head attention cost ``4nd^2 + 2n^2 d`` (multiply-accumulates)."""
    return 4 * n * d * d + 2 * n * n * d


def flops_mla(n: int, d: int, rho, mode: str = "as-stated"):
    """Per-layer latent-attention cost.

    ``as-stated`` evaluates ``2nd^2(1 + rho) + 2n^2 d rho`` in multiply-
    accumulates. ``as-implemented`` returns the FLOPs this package's
    ``mla_forward`` charges on a fresh length-``n`` sequence::

        query + output projections   2 * 2nd^2
        shared K/V compression       2 * 2ndr
        per-head K/V reconstruction  2 * 2nrd
        scores and weighted values   2 * 2n^2 d
    """
    rho = _ratio(rho)
    if not 0 < rho <= 1:
        raise ValueError(f"compression ratio must lie in (0, 1], got {rho}")
    if mode == "as-stated":
        return _exact(2 * n * d * d * (1 + rho) + 2 * n * n * d * rho)
    if mode == "as-implemented":
        r = rho * d
        if r.denominator != 1:
            raise ValueError(f"rho*d = {r} is not an integer latent width")
        r = int(r)
        return 4 * n * d * d + 8 * n * d * r + 4 * n * n * d
    raise ValueError(f"unknown mode {mode!r}")


def mha_flops_implemented(n: int, d: int) -> int:
    """FLOPs ``mha_forward`` charges on a fresh sequence: twice ``flops_mha``."""
    return 2 * flops_mha(n, d)


def dense_ffn_flops(n: int, d: int, d_ff: int) -> int:
    return 2 * 2 * n * d * d_ff


def head_flops(n: int, d: int, vocab: int) -> int:
    return 2 * n * d * vocab


def cost_moe(d: int, n_experts: int, n_shared: int, k: int, hidden: int | None = None) -> dict[str, int]:
    """Per-token MoE FLOPs split into routing, active routed experts and shared experts."""
    h = d if hidden is None else hidden
    n_routed = n_experts - n_shared
    return {
        "routing": 2 * d * n_routed,
        "active_experts": k * 2 * 2 * d * h,
        "shared_experts": n_shared * 2 * 2 * d * h,
    }


def speedup_asymptotic(rho, n_experts: int, n_shared: int, k: int) -> float:
    """Asymptotic speedup ``(1/rho) * N / (k + N_s)`` over a dense transformer."""
    rho = _ratio(rho)
    if rho <= 0 or k + n_shared <= 0:
        raise ValueError("need rho > 0 and k + n_shared > 0")
    return float(Fraction(1) / rho * Fraction(n_experts, k + n_shared))


def kv_cache_model(n: int, n_layers: int, n_heads: int, head_dim: int, latent_dim: int,
                   bytes_per_elem: int, variant: str = "shared", batch: int = 1) -> int:
    """Modelled KV-cache bytes.

    ``shared`` caches one latent key and value row per token and layer
    (``2nLr``); ``per-head`` multiplies that by the head count
    (``2nLHr``); ``baseline`` is uncompressed attention (``2nLHd_k``).
    """
    per_token = {
        "shared": latent_dim,
        "per-head": n_heads * latent_dim,
        "baseline": n_heads * head_dim,
    }
    if variant not in per_token:
        raise ValueError(f"unknown variant {variant!r}")
    return 2 * batch * n * n_layers * per_token[variant] * bytes_per_elem


def reduction_factor(rho) -> Fraction:
    """Fractional KV memory saved by shared latent caching at ratio ``rho``."""
    return 1 - _ratio(rho)


@dataclass
class ComplexityReport:
    inputs: dict
    analytic: dict
    measured: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> ComplexityReport:
        return cls(d["inputs"], d["analytic"], d.get("measured", {}), d.get("deltas", {}))

    @classmethod
    def from_json(cls, s: str) -> ComplexityReport:
        return cls.from_dict(json.loads(s))

    def rows(self) -> list[tuple[str, str, object]]:
        out = [("input", k, v) for k, v in self.inputs.items()]
        out += [("analytic", k, v) for k, v in self.analytic.items()]
        out += [("measured", k, v) for k, v in self.measured.items()]
        out += [("delta", k, v) for k, v in self.deltas.items()]
        return out

    def to_table(self) -> str:
        rows = self.rows()
        w1 = max(len(r[0]) for r in rows)
        w2 = max(len(r[1]) for r in rows)
        lines = [f"{'section':<{w1}}  {'quantity':<{w2}}  value"]
        lines += [f"{s:<{w1}}  {k:<{w2}}  {_fmt(v)}" for s, k, v in rows]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["section", "quantity", "value"])
        for s, k, v in self.rows():
            writer.writerow([s, k, _fmt(v)])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:g}"
    return str(v)


def analytic_costs(cfg: ModelConfig, n: int, bytes_per_elem: int | None = None, batch: int = 1) -> dict:
    """Every closed-form quantity for ``cfg`` at sequence length ``n`` (batch 1 FLOPs)."""
    d, L, H = cfg.d_model, cfg.n_layers, cfg.n_heads
    r, rho = cfg.latent_dim, cfg.compression_ratio
    ex = cfg.experts
    nbytes = bytes_per_elem if bytes_per_elem is not None else cfg.dtype.itemsize

    moe = cost_moe(d, ex.n_experts, ex.n_shared, ex.top_k, cfg.expert_hidden)
    moe_layer = n * sum(moe.values())
    dense_layer = dense_ffn_flops(n, d, cfg.d_ff)
    mla_layer = flops_mla(n, d, rho, "as-implemented")
    mha_layer = mha_flops_implemented(n, d)
    attn_layer = mla_layer if cfg.attention == "mla" else mha_layer
    ffn_layer = moe_layer if cfg.ffn == "moe" else dense_layer

    kv = dict(n=n, n_layers=L, n_heads=H, head_dim=cfg.head_dim, latent_dim=r,
              bytes_per_elem=nbytes, batch=batch)
    kv_baseline = kv_cache_model(variant="baseline", **kv)
    kv_shared = kv_cache_model(variant="shared", **kv)
    kv_live_model = kv_shared if cfg.attention == "mla" else kv_baseline
    return {
        "c_mha": flops_mha(n, d),
        "c_mla_as_stated": _jsonable(flops_mla(n, d, rho, "as-stated")),
        "c_mla_as_implemented": mla_layer,
        "c_mha_as_implemented": mha_layer,
        "c_moe_routing_per_token": moe["routing"],
        "c_moe_active_per_token": moe["active_experts"],
        "c_moe_shared_per_token": moe["shared_experts"],
        "c_dense_ffn_layer": dense_layer,
        "c_attention_layer": attn_layer,
        "c_ffn_layer": ffn_layer,
        "c_head": head_flops(n, d, cfg.vocab_size),
        "c_combined": L * (attn_layer + ffn_layer) + head_flops(n, d, cfg.vocab_size),
        "speedup_asymptotic": speedup_asymptotic(rho, ex.n_experts, ex.n_shared, ex.top_k),
        "kv_bytes_baseline": kv_baseline,
        "kv_bytes_shared": kv_shared,
        "kv_bytes_per_head": kv_cache_model(variant="per-head", **kv),
        "kv_mb_baseline": kv_baseline / MB,
        "kv_mb_shared": kv_shared / MB,
        "kv_bytes_model": kv_live_model,
        "reduction_factor": float(reduction_factor(rho)),
    }


def _jsonable(v):
    return v if isinstance(v, int) else str(v)


def measure(cfg: ModelConfig, n: int) -> dict:
    """Run one batch-1 forward of ``n`` random tokens through a cache; count FLOPs and bytes."""
    from .model import LanguageModel

    model = LanguageModel(cfg.replace(max_seq=max(cfg.max_seq, n), dropout=0.0)).eval()
    tokens = np.random.default_rng(cfg.seed).integers(0, cfg.vocab_size, size=n)
    cache = model.new_cache()
    with no_grad(), counting_flops() as counter:
        model.forward(tokens, cache=cache)
    attn = sum(v for k, v in counter.by_scope.items() if k.startswith("attn."))
    ffn = sum(v for k, v in counter.by_scope.items() if k == "ffn" or k.startswith("moe."))
    return {
        "flops_forward": counter.total,
        "flops_attention": attn,
        "flops_ffn": ffn,
        "flops_head": counter.by_scope.get("head", 0),
        "kv_bytes_live": cache.nbytes,
    }


def complexity_report(cfg: ModelConfig, n: int, measure_forward: bool = True,
                      bytes_per_elem: int | None = None, batch: int = 1) -> ComplexityReport:
    """Analytic costs for ``cfg`` at length ``n``, optionally reconciled against a live run.

    Reconciliation compares measured counts with the as-implemented forms at
    the compute element width.
    """
    ex = cfg.experts
    inputs = {
        "n": n, "d": cfg.d_model, "rho": str(cfg.compression_ratio), "N": ex.n_experts,
        "N_s": ex.n_shared, "k": ex.top_k, "L": cfg.n_layers, "H": cfg.n_heads,
        "vocab": cfg.vocab_size, "attention": cfg.attention, "ffn": cfg.ffn, "batch": batch,
    }
    analytic = analytic_costs(cfg, n, bytes_per_elem, batch)
    report = ComplexityReport(inputs, analytic)
    if measure_forward:
        m = measure(cfg, n)
        live = analytic_costs(cfg, n)
        report.measured = m
        report.deltas = {
            "flops_forward": m["flops_forward"] - live["c_combined"],
            "flops_attention": m["flops_attention"] - cfg.n_layers * live["c_attention_layer"],
            "flops_ffn": m["flops_ffn"] - cfg.n_layers * live["c_ffn_layer"],
            "flops_head": m["flops_head"] - live["c_head"],
            "kv_bytes": m["kv_bytes_live"] - live["kv_bytes_model"],
        }
    return report
