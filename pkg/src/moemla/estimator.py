"""scikit-learn compatible wrapper around the language model and trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_token_stream, check_tokens
from .config import ModelConfig, TrainConfig
from .model import LanguageModel
from .moe import ExpertConfig
from .tensor import cross_entropy, no_grad, softmax
from .trainer import ByteTokenizer, Corpus, train


class MoEMLALanguageModel(BaseEstimator):
    """Byte-level causal language model with latent attention and routed experts.

    ``fit`` trains on a text corpus (a string, bytes, a list of documents or
    an array of token ids). ``predict`` returns the most likely next token at
    every position, ``predict_proba`` the full distribution, and ``score``
    the negative mean next-token cross-entropy.
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=2, latent_dim=None, attention="mla", ffn="moe",
                 n_experts=16, n_shared=2, top_k=4, expert_hidden=None, dropout=0.0, max_seq=128,
                 steps=200, batch_size=8, seq_len=64, lr_peak=3e-3, lr_floor=1e-5, warmup_fraction=0.1,
                 weight_decay=0.1, clip_norm=1.0, balancing="bias-diff", gamma=0.1, alpha=0.01,
                 val_fraction=0.0, seed=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.latent_dim = latent_dim
        self.attention = attention
        self.ffn = ffn
        self.n_experts = n_experts
        self.n_shared = n_shared
        self.top_k = top_k
        self.expert_hidden = expert_hidden
        self.dropout = dropout
        self.max_seq = max_seq
        self.steps = steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr_peak = lr_peak
        self.lr_floor = lr_floor
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.balancing = balancing
        self.gamma = gamma
        self.alpha = alpha
        self.val_fraction = val_fraction
        self.seed = seed

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=ByteTokenizer.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
            n_heads=self.n_heads, latent_dim=self.latent_dim, attention=self.attention, ffn=self.ffn,
            experts=ExpertConfig(self.n_experts, self.n_shared, self.top_k, self.expert_hidden),
            dropout=self.dropout, max_seq=self.max_seq, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, seq_len=self.seq_len, lr_peak=self.lr_peak,
            lr_floor=self.lr_floor, warmup_fraction=self.warmup_fraction, weight_decay=self.weight_decay,
            clip_norm=self.clip_norm, seed=self.seed, balancing=self.balancing, gamma=self.gamma,
            alpha=self.alpha, val_fraction=self.val_fraction,
        )

    def fit(self, X, y=None):
        tokens = as_token_stream(X)
        tcfg = self.train_config()
        if tcfg.seq_len > self.max_seq:
            raise ValueError(f"seq_len={tcfg.seq_len} exceeds max_seq={self.max_seq}")
        self.model_ = LanguageModel(self.model_config())
        summary = train(self.model_, Corpus(tokens, tcfg.val_fraction), tcfg)
        self.history_ = summary.pop("records")
        self.summary_ = summary
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        tokens = check_tokens(X, self.model_.cfg.vocab_size, self.model_.cfg.max_seq)
        self.model_.eval()
        with no_grad():
            return self.model_.forward(tokens)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self._logits(X), axis=-1).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self._logits(X).data, axis=-1)

    def score(self, X, y=None) -> float:
        tokens = check_tokens(X, ByteTokenizer.vocab_size)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        logits = self._logits(tokens[:, :-1])
        return -cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1)).item()

    def generate(self, prompt, max_new: int = 64, **kwargs) -> str:
        check_is_fitted(self, "model_")
        tok = ByteTokenizer()
        ids = self.model_.generate(tok.encode(prompt), max_new, **kwargs)
        return tok.decode(ids)
