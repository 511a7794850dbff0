import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from moemla import MoEMLALanguageModel
from moemla._validation import as_token_stream, check_tokens

from conftest import DATA

SMALL = dict(d_model=32, n_layers=1, n_heads=2, n_experts=8, n_shared=2, top_k=2, steps=40,
             batch_size=4, seq_len=32, max_seq=64)


@pytest.fixture(scope="module")
def fitted():
    return MoEMLALanguageModel(**SMALL).fit((DATA / "ten_sentences.txt").read_text())


def test_params_round_trip():
    est = MoEMLALanguageModel(d_model=48, gamma=0.5)
    params = est.get_params()
    assert params["d_model"] == 48 and params["gamma"] == 0.5
    est.set_params(top_k=3)
    assert est.top_k == 3
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "model_")


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MoEMLALanguageModel().predict([1, 2, 3])


def test_fit_attributes(fitted):
    assert len(fitted.history_) == 40
    assert fitted.summary_["final_loss"] < fitted.summary_["initial_loss"]


def test_predict_shapes(fitted):
    seq = np.array([84, 104, 101, 32])
    assert fitted.predict(seq).shape == (4,)
    proba = fitted.predict_proba(np.stack([seq, seq]))
    assert proba.shape == (2, 4, 256)
    np.testing.assert_allclose(proba.sum(-1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(fitted.predict(seq), proba[0].argmax(-1))


def test_score_is_negative_loss(fitted):
    s = fitted.score("The rabbit ran fast.")
    assert s < 0 and np.isfinite(s)


def test_generate(fitted):
    text = fitted.generate("The ", 10)
    assert text.startswith("The ") and len(text.encode("latin-1", "replace")) >= 4


def test_refit_is_deterministic():
    data = "the turtle is slow. " * 20
    a = MoEMLALanguageModel(**dict(SMALL, steps=5)).fit(data)
    b = MoEMLALanguageModel(**dict(SMALL, steps=5)).fit(data)
    assert a.history_ == b.history_


class TestValidation:
    def test_documents_joined(self):
        np.testing.assert_array_equal(as_token_stream(["a", "b"]), [97, 10, 98])

    def test_int_array(self):
        assert as_token_stream(np.array([[1, 2], [3, 4]])).tolist() == [1, 2, 3, 4]

    def test_float_rejected(self):
        with pytest.raises(TypeError):
            as_token_stream([0.5, 1.5])

    @pytest.mark.parametrize("bad", [[-1, 2], [256], [[[1]]], []])
    def test_check_tokens(self, bad):
        with pytest.raises(ValueError):
            check_tokens(np.array(bad, dtype=int), 256)

    def test_too_long(self):
        with pytest.raises(ValueError, match="context"):
            check_tokens(np.zeros(10, dtype=int), 256, max_len=8)
