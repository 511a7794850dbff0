"""Input validation helpers shared by the estimator wrapper."""

from __future__ import annotations

import numpy as np

from .trainer import ByteTokenizer


def as_token_stream(X) -> np.ndarray:
    """Flatten text, bytes, a list of documents, or an integer array into one token stream."""
    tok = ByteTokenizer()
    if isinstance(X, (str, bytes, bytearray)):
        return np.asarray(tok.encode(X), dtype=np.int64)
    if isinstance(X, np.ndarray) and X.dtype.kind in "iu":
        return X.astype(np.int64).ravel()
    items = list(X)
    if items and all(isinstance(x, (str, bytes, bytearray)) for x in items):
        sep = b"\n"
        joined = sep.join(x.encode("utf-8") if isinstance(x, str) else bytes(x) for x in items)
        return np.asarray(tok.encode(joined), dtype=np.int64)
    arr = np.asarray(items)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"expected text or integer token ids, got array of dtype {arr.dtype}")
    return arr.astype(np.int64).ravel()


def check_tokens(X, vocab_size: int, max_len: int | None = None) -> np.ndarray:
    """Validate a 1-D or 2-D array of token ids against the vocabulary and context size."""
    if isinstance(X, (str, bytes, bytearray)):
        X = ByteTokenizer().encode(X)
    arr = np.asarray(X)
    if arr.dtype.kind not in "iu":
        raise TypeError(f"token ids must be integers, got dtype {arr.dtype}")
    if arr.ndim not in (1, 2):
        raise ValueError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[-1] == 0:
        raise ValueError("token sequence is empty")
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    if max_len is not None and arr.shape[-1] > max_len:
        raise ValueError(f"sequence length {arr.shape[-1]} exceeds the model context of {max_len}")
    return arr.astype(np.int64)
