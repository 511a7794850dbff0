import json
import math

import numpy as np
import pytest

from moemla.config import TrainConfig
from moemla.exceptions import ConfigurationError, DecodeError
from moemla.model import LanguageModel
from moemla.tensor import Tensor
from moemla.trainer import (AdamW, ByteTokenizer, Corpus, VocabTokenizer, adamw_step, clip_gradients,
                            evaluate, lr_at, new_train_state, sample_batch, train, train_step)

from conftest import toy_config


class TestSchedule:
    cfg = TrainConfig(steps=1000, lr_peak=3e-4, lr_floor=1e-5)

    def test_starts_at_zero(self):
        assert lr_at(0, self.cfg) == 0.0

    def test_peak_at_warmup_end(self):
        assert self.cfg.warmup_steps == 100
        assert lr_at(100, self.cfg) == pytest.approx(3e-4, abs=1e-15)

    def test_floor_at_final_step(self):
        assert abs(lr_at(1000, self.cfg) - 1e-5) < 1e-12

    def test_continuous_and_monotone_after_warmup(self):
        lrs = [lr_at(s, self.cfg) for s in range(0, 1001)]
        assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 3e-4 / 50
        assert all(a >= b for a, b in zip(lrs[100:], lrs[101:]))

    def test_midpoint_of_cosine(self):
        # halfway through decay the cosine term is exactly one half
        assert lr_at(550, self.cfg) == pytest.approx((3e-4 + 1e-5) / 2)


class TestClip:
    def test_known_vector(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_gradients([p], 1.0) == pytest.approx(0.2)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_under_threshold_untouched(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        assert clip_gradients([p], 1.0) == 1.0
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])

    def test_post_norm_bounded(self, rng):
        ps = [Tensor(np.zeros(s), requires_grad=True) for s in [(3, 4), (5,), (2, 2, 2)]]
        for p in ps:
            p.grad = rng.normal(size=p.shape) * 10
        clip_gradients(ps, 0.5)
        assert math.sqrt(sum((p.grad**2).sum() for p in ps)) <= 0.5 + 1e-6


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        theta = np.array([1.0, -2.0])
        adamw_step(theta, np.zeros(2), np.zeros(2), np.zeros(2), 1, lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(theta, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        theta = np.array([0.5, 0.5])
        adamw_step(theta, np.array([2.0, -0.1]), np.zeros(2), np.zeros(2), 1, lr=1e-3, weight_decay=0.0)
        np.testing.assert_allclose(theta, [0.5 - 1e-3, 0.5 + 1e-3], rtol=1e-6)

    def test_decay_only(self):
        theta = np.ones(3)
        adamw_step(theta, np.zeros(3), np.zeros(3), np.zeros(3), 1, lr=1e-3, weight_decay=0.1)
        np.testing.assert_allclose(theta, 0.9999)

    def test_vectors_not_decayed(self):
        mat = Tensor(np.ones((2, 2)), requires_grad=True)
        vec = Tensor(np.ones(2), requires_grad=True)
        mat.grad, vec.grad = np.zeros((2, 2)), np.zeros(2)
        AdamW([mat, vec], weight_decay=0.1).step(1e-3)
        np.testing.assert_allclose(mat.data, 0.9999)
        np.testing.assert_array_equal(vec.data, 1.0)


def small_run(balancing="bias-diff", steps=3, seed=0):
    cfg = TrainConfig(steps=steps, batch_size=2, seq_len=16, lr_peak=1e-3, seed=seed, balancing=balancing)
    model = LanguageModel(toy_config(seed=seed))
    state = new_train_state(model, cfg)
    data = np.random.default_rng(0).integers(0, 256, size=500)
    return [train_step(model, sample_batch(data, 2, 16, state.rng), state, cfg) for _ in range(steps)], model


class TestTrainStep:
    def test_record_keys(self):
        recs, _ = small_run(steps=1)
        assert set(recs[0]) == {"step", "loss", "lr", "grad_norm", "cv"}
        assert len(recs[0]["cv"]) == 2
        json.dumps(recs[0])

    def test_aux_loss_recorded(self):
        recs, _ = small_run("aux-loss", steps=1)
        assert recs[0]["aux_loss"] > 0

    def test_deterministic(self):
        a, ma = small_run()
        b, mb = small_run()
        assert a == b
        for k in ma.params:
            np.testing.assert_array_equal(ma.params[k].data, mb.params[k].data)

    def test_strategy_does_not_change_first_loss(self):
        assert small_run("none", 1)[0][0]["loss"] == small_run("bias-diff", 1)[0][0]["loss"]

    def test_bias_moves_only_with_bias_strategy(self):
        _, balanced = small_run("bias-diff")
        _, plain = small_run("none")
        assert np.abs(balanced.routers[0].bias).sum() > 0
        assert not plain.routers[0].bias.any()


class TestTraining:
    def test_loss_drops_on_ten_sentences(self, ten_sentences, tmp_path):
        cfg = TrainConfig(steps=200, batch_size=8, seq_len=32, lr_peak=3e-3, val_fraction=0.0, gamma=0.1)
        corpus = Corpus(np.frombuffer(ten_sentences, dtype=np.uint8).astype(np.int64), 0.0)
        summary = train(LanguageModel(toy_config()), corpus, cfg, metrics_path=tmp_path / "m.jsonl",
                        out_dir=tmp_path)
        assert summary["final_loss"] <= 0.7 * summary["initial_loss"]
        lines = (tmp_path / "m.jsonl").read_text().splitlines()
        assert len(lines) == 200 and json.loads(lines[-1])["step"] == 200
        assert (tmp_path / "final.mmr").exists()

    def test_evaluate_uniform_model(self):
        model = LanguageModel(toy_config(init_std=0.0))
        data = np.arange(300) % 256
        assert evaluate(model, data, 32) == pytest.approx(math.log(256), rel=1e-5)

    def test_corpus_too_short(self):
        with pytest.raises(ConfigurationError):
            sample_batch(np.arange(10), 2, 16, np.random.default_rng(0))


class TestTokenizers:
    def test_empty_round_trip(self):
        tok = ByteTokenizer()
        assert tok.encode("") == [] and tok.decode([]) == ""

    def test_ascii(self):
        assert ByteTokenizer().encode("ab") == [97, 98]

    def test_random_bytes_round_trip(self):
        raw = np.random.default_rng(0).integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
        tok = ByteTokenizer()
        assert tok.decode_bytes(tok.encode(raw)) == raw

    def test_byte_out_of_range(self):
        with pytest.raises(DecodeError):
            ByteTokenizer().decode([300])

    def test_vocab_longest_match(self, tmp_path):
        path = tmp_path / "vocab.json"
        path.write_text(json.dumps(["a", "b", "ab", " "]))
        tok = VocabTokenizer.from_file(path)
        assert tok.encode("ab a") == [2, 3, 0]
        assert tok.decode([2, 3, 0]) == "ab a"
        with pytest.raises(DecodeError):
            tok.decode([9])
        with pytest.raises(DecodeError):
            tok.encode("c")
