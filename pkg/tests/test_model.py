import math

import numpy as np
import pytest

from moemla.config import ModelConfig
from moemla.exceptions import CacheError, CheckpointError, ConfigurationError
from moemla.model import LanguageModel, load_checkpoint, param_counts, parameter_shapes, save_checkpoint
from moemla.moe import ExpertConfig
from moemla.tensor import Tensor, backward, no_grad

from conftest import numeric_grad, rel_err, toy_config


def model_gradcheck(cfg, n=8, coords_per_tensor=None, seed=0):
    """Max per-tensor relative error between backward and central differences (routing frozen)."""
    model = LanguageModel(cfg)
    r = np.random.default_rng(seed)
    tokens = r.integers(0, cfg.vocab_size, size=(1, n + 1))
    x, y = tokens[:, :-1], tokens[:, 1:]
    with no_grad():
        model.forward(x)
    frozen = [d.indices.copy() for d in model.last_routing] or None

    model.zero_grad()
    backward(model.loss(x, y, frozen_routing=frozen))
    worst = {}
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        if coords_per_tensor is None or flat.size <= coords_per_tensor:
            idx = np.arange(flat.size)
        else:
            idx = r.choice(flat.size, coords_per_tensor, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + 1e-3
            with no_grad():
                up = model.loss(x, y, frozen_routing=frozen).item()
            flat[i] = old - 1e-3
            with no_grad():
                down = model.loss(x, y, frozen_routing=frozen).item()
            flat[i] = old
            numeric[j] = (up - down) / 2e-3
        worst[name] = rel_err(p.grad.reshape(-1)[idx], numeric)
    return worst


GRAD_CFG = ModelConfig(vocab_size=17, d_model=32, n_layers=2, n_heads=2, latent_dim=16,
                       experts=ExpertConfig(4, 1, 2), dropout=0.0, max_seq=16, precision="double")


class TestBlock:
    def test_zero_weights_residual_identity(self):
        m = LanguageModel(toy_config())
        for name, p in m.params.items():
            if not name.endswith(".gain"):
                p.data[...] = 0.0
        x = np.random.default_rng(0).normal(size=(1, 6, 32)).astype(np.float32)
        with no_grad():
            out = m.block_forward(0, Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_mla_matches_constructed_mha(self):
        kw = dict(n_layers=1, latent_dim=32, precision="double", ffn="dense")
        mha = LanguageModel(toy_config(attention="mha", **kw))
        mla_cfg = toy_config(attention="mla", **kw)
        params = {k: v.data for k, v in mha.params.items()}
        params["layers.0.attn.w_kc"] = np.eye(32)
        params["layers.0.attn.w_vc"] = np.eye(32)
        params["layers.0.attn.w_kr"] = params.pop("layers.0.attn.w_k")
        params["layers.0.attn.w_vr"] = params.pop("layers.0.attn.w_v")
        mla = LanguageModel(mla_cfg, params)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 7, 32)))
        with no_grad():
            np.testing.assert_allclose(mla.block_forward(0, x).data, mha.block_forward(0, x).data, atol=1e-5)


class TestForward:
    def test_init_loss_near_uniform(self):
        for seed in range(10):
            m = LanguageModel(toy_config(seed=seed))
            toks = np.random.default_rng(seed).integers(0, 256, size=(2, 33))
            with no_grad():
                loss = m.loss(toks[:, :-1], toks[:, 1:]).item()
            assert abs(loss - math.log(256)) / math.log(256) < 0.05

    def test_deterministic(self):
        toks = np.arange(20) % 256
        a = LanguageModel(toy_config(seed=4)).forward(toks).data
        b = LanguageModel(toy_config(seed=4)).forward(toks).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("attention", ["mla", "mha"])
    def test_suffix_permutation_is_causal(self, attention):
        m = LanguageModel(toy_config(attention=attention))
        toks = np.random.default_rng(0).integers(0, 256, size=24)
        perm = toks.copy()
        perm[15:] = perm[15:][::-1]
        with no_grad():
            a, b = m.forward(toks).data, m.forward(perm).data
        np.testing.assert_array_equal(a[:15], b[:15])

    def test_bad_token(self):
        with pytest.raises(IndexError):
            LanguageModel(toy_config()).forward([1, 256])

    def test_too_long(self):
        with pytest.raises(CacheError):
            LanguageModel(toy_config(max_seq=8)).forward(np.zeros(9, dtype=int))

    def test_batched_equals_rows(self):
        m = LanguageModel(toy_config(precision="double"))
        toks = np.random.default_rng(1).integers(0, 256, size=(3, 10))
        with no_grad():
            batched = m.forward(toks).data
            rows = np.stack([m.forward(t).data for t in toks])
        np.testing.assert_allclose(batched, rows, atol=1e-12)


class TestGenerate:
    @pytest.mark.parametrize("attention", ["mla", "mha"])
    def test_cached_equals_uncached(self, attention):
        m = LanguageModel(toy_config(attention=attention, seed=3))
        prompt = [72, 101, 108, 108, 111]
        assert m.generate(prompt, 64) == m.generate(prompt, 64, use_cache=False)

    def test_low_temperature_is_greedy(self):
        m = LanguageModel(toy_config(init_std=0.5))
        prompt = [1, 2, 3]
        greedy = m.generate(prompt, 16)
        cold = m.generate(prompt, 16, mode="temperature", temperature=1e-6, rng=np.random.default_rng(9))
        assert cold == greedy

    def test_top_p_sampling_reproducible(self):
        m = LanguageModel(toy_config(init_std=0.5))
        a = m.generate([5], 10, mode="top-p", temperature=1.0, top_p=0.9, rng=np.random.default_rng(1))
        b = m.generate([5], 10, mode="top-p", temperature=1.0, top_p=0.9, rng=np.random.default_rng(1))
        assert a == b and len(a) == 11

    def test_zero_new_tokens(self):
        assert LanguageModel(toy_config()).generate([4, 5, 6], 0) == [4, 5, 6]

    def test_overflow(self):
        with pytest.raises(CacheError):
            LanguageModel(toy_config(max_seq=10)).generate([1] * 6, 5)


class TestParamCounts:
    def test_dense_all_active(self):
        c = param_counts(toy_config(ffn="dense"))
        assert c["active"] == c["total"]

    def test_full_activation(self):
        c = param_counts(toy_config(experts=ExpertConfig(6, 2, 4)))
        assert c["active"] == c["total"]

    def test_hand_summed(self):
        cfg = ModelConfig(vocab_size=256, d_model=128, n_layers=4, n_heads=4,
                          experts=ExpertConfig(16, 2, 4, 128))
        d, r, V, h = 128, 64, 256, 128
        per_layer = (2 * d  # ln1
                     + d * d + 2 * d * r + 2 * r * d + d * d  # q, compress, reconstruct, out
                     + 2 * d  # ln2
                     + d * 14  # router
                     + 16 * 2 * d * h)  # experts
        total = V * d + 4 * per_layer + 2 * d
        assert total == 2_401_536
        assert param_counts(cfg) == {"total": total, "active": total - 4 * 10 * 2 * d * h}

    def test_matches_instantiated_model(self):
        cfg = toy_config()
        assert param_counts(cfg)["total"] == sum(p.size for p in LanguageModel(cfg).parameters())


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        m = LanguageModel(toy_config(seed=5))
        m.routers[0].bias[:] = np.linspace(-1, 1, 14)
        path = tmp_path / "m.mmr"
        save_checkpoint(path, m, step=12)
        loaded, header = load_checkpoint(path)
        assert header["step"] == 12
        toks = np.arange(30) % 256
        with no_grad():
            np.testing.assert_array_equal(m.forward(toks).data, loaded.forward(toks).data)
        np.testing.assert_array_equal(loaded.routers[0].bias, m.routers[0].bias)

    def test_layout(self, tmp_path):
        import json
        import struct
        m = LanguageModel(toy_config(n_layers=1))
        path = tmp_path / "m.mmr"
        save_checkpoint(path, m)
        raw = path.read_bytes()
        assert raw[:4] == b"MMR1"
        (hlen,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + hlen])
        sizes = [4 * math.prod(e["shape"]) for e in header["manifest"]]
        assert [e["offset"] for e in header["manifest"]] == list(np.cumsum([0] + sizes[:-1]))
        assert len(raw) - 8 - hlen == sum(sizes)
        assert [e["name"] for e in header["manifest"]] == list(parameter_shapes(m.cfg))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mmr"
        p.write_bytes(b"XXXX" + b"\0" * 20)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        m = LanguageModel(toy_config(n_layers=1))
        p = tmp_path / "m.mmr"
        save_checkpoint(p, m)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestConfig:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match="model.depth"):
            ModelConfig.from_dict({"depth": 3})

    def test_nested_experts(self):
        cfg = ModelConfig.from_dict({"experts": {"n_experts": 8, "n_shared": 1, "top_k": 2}})
        assert cfg.experts.n_routed == 7
        with pytest.raises(ConfigurationError, match="model.experts.k"):
            ModelConfig.from_dict({"experts": {"k": 2}})

    @pytest.mark.parametrize("rho", ["1", "1/2", "1/4", "1/8"])
    def test_ablation_ratios(self, rho):
        from fractions import Fraction
        cfg = toy_config(d_model=64, latent_dim=int(64 * Fraction(rho)))
        assert cfg.compression_ratio == Fraction(rho)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            toy_config(n_heads=3)
        with pytest.raises(ConfigurationError):
            toy_config(latent_dim=64)


def test_end_to_end_gradients_sampled():
    worst = model_gradcheck(GRAD_CFG, coords_per_tensor=6)
    assert max(worst.values()) < 1e-3, worst
