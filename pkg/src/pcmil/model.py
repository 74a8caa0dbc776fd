"""Gated-attention bag classifier with exact analytic gradients.

Forward, for a bag F of n instance embeddings (n x D):

    T = tanh(F V^T)                 n x A
    S = sigmoid(F U^T)              n x A
    e = (T * S) w                   n      gated attention scores
    a = softmax(e)                  n      max-subtracted for stability
    z = F^T a                       D      bag embedding
    logit = W_c . z + b
    p_hat = sigmoid(logit)

The backward pass propagates the binary cross-entropy of (p_hat, label)
through the softmax and both gates; see ``backward`` for the derivation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError

CHECKPOINT_MAGIC = b"PCMW"

PARAM_FIELDS = ("V", "U", "w", "W_c", "b")


@dataclass
class AbmilParams:
    """Attention weights (V, U, w) and linear classifier head (W_c, b).

    Also serves as the container for gradients and optimizer moments, which
    share its shape.
    """

    V: np.ndarray
    U: np.ndarray
    w: np.ndarray
    W_c: np.ndarray
    b: float

    @property
    def embed_dim(self) -> int:
        return self.V.shape[1]

    @property
    def attention_dim(self) -> int:
        return self.V.shape[0]

    def copy(self) -> "AbmilParams":
        return AbmilParams(
            self.V.copy(), self.U.copy(), self.w.copy(), self.W_c.copy(), self.b
        )

    def allclose(self, other: "AbmilParams", atol: float = 0.0) -> bool:
        return all(
            np.allclose(getattr(self, f), getattr(other, f), rtol=0.0, atol=atol)
            for f in PARAM_FIELDS
        )


@dataclass
class BagScore:
    """Forward outputs for one bag. ``attention`` is None for max pooling."""

    attention: Optional[np.ndarray]
    z: np.ndarray
    logit: float
    p_hat: float


def zeros_like_params(params: AbmilParams) -> AbmilParams:
    return AbmilParams(
        np.zeros_like(params.V),
        np.zeros_like(params.U),
        np.zeros_like(params.w),
        np.zeros_like(params.W_c),
        0.0,
    )


def init_params(embed_dim: int, attention_dim: int, seed: int) -> AbmilParams:
    """Uniform init in [-s, s] with s = sqrt(6 / (fan_in + fan_out)) per matrix."""
    if embed_dim < 1 or attention_dim < 1:
        raise ValueError("dims must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def draw(shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=shape)

    return AbmilParams(
        V=draw((attention_dim, embed_dim), embed_dim, attention_dim),
        U=draw((attention_dim, embed_dim), embed_dim, attention_dim),
        w=draw((attention_dim,), attention_dim, 1),
        W_c=draw((embed_dim,), embed_dim, 1),
        b=0.0,
    )


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    # tanh form is stable for any argument without branching.
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    exp = np.exp(shifted)
    return exp / np.sum(exp)


def _embedding_matrix(bag) -> np.ndarray:
    arr = bag.embeddings if hasattr(bag, "embeddings") else bag
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("bag embeddings must be a nonempty n x D matrix")
    return arr


def _check_dims(params: AbmilParams, F: np.ndarray) -> None:
    if F.shape[1] != params.embed_dim:
        raise ValueError(
            f"embedding width {F.shape[1]} does not match model width {params.embed_dim}"
        )


def forward(params: AbmilParams, bag) -> BagScore:
    """Score one bag; accepts a Bag or a raw n x D embedding matrix."""
    F = _embedding_matrix(bag)
    _check_dims(params, F)
    T = np.tanh(F @ params.V.T)
    S = sigmoid(F @ params.U.T)
    e = (T * S) @ params.w
    a = softmax(e)
    z = F.T @ a
    logit = float(params.W_c @ z + params.b)
    return BagScore(attention=a, z=z, logit=logit, p_hat=float(sigmoid(logit)))


def backward(params: AbmilParams, bag, label: int) -> AbmilParams:
    """Exact gradients of the single-bag BCE loss.

    With g = p_hat - label:
        dW_c = g z                      db = g
        dz   = g W_c
        da_j = dz . f_j                 (value-aggregation path)
        de   = a * (da - a.da)          (softmax jacobian)
        dw   = (T*S)^T de
        dT   = (de w^T) * S             dS = (de w^T) * T
        dV   = (dT * (1 - T^2))^T F     dU = (dS * S * (1 - S))^T F
    """
    F = _embedding_matrix(bag)
    _check_dims(params, F)
    T = np.tanh(F @ params.V.T)
    S = sigmoid(F @ params.U.T)
    G = T * S
    e = G @ params.w
    a = softmax(e)
    z = F.T @ a
    logit = float(params.W_c @ z + params.b)
    g = float(sigmoid(logit)) - float(label)

    dz = g * params.W_c
    da = F @ dz
    de = a * (da - float(a @ da))
    dw = G.T @ de
    dTS = de[:, None] * params.w[None, :]
    dV = (dTS * S * (1.0 - T * T)).T @ F
    dU = (dTS * T * S * (1.0 - S)).T @ F
    return AbmilParams(V=dV, U=dU, w=dw, W_c=g * z, b=g)


def predict(p_hat: float, tau: float) -> int:
    """Threshold a probability; the comparison is inclusive."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return int(p_hat >= tau)


# Ablation aggregators. They reuse the classifier head (W_c, b) and leave the
# attention parameters untouched; gradients for V, U, w are zero.

def pooled_forward(params: AbmilParams, bag, pooling: str) -> BagScore:
    F = _embedding_matrix(bag)
    _check_dims(params, F)
    n = F.shape[0]
    if pooling == "mean":
        a = np.full(n, 1.0 / n)
        z = F.T @ a
    elif pooling == "max":
        a = None
        z = F.max(axis=0)
    else:
        raise ValueError(f"unknown pooling: {pooling!r}")
    logit = float(params.W_c @ z + params.b)
    return BagScore(attention=a, z=z, logit=logit, p_hat=float(sigmoid(logit)))


def pooled_backward(params: AbmilParams, bag, label: int, pooling: str) -> AbmilParams:
    score = pooled_forward(params, bag, pooling)
    g = score.p_hat - float(label)
    grads = zeros_like_params(params)
    grads.W_c = g * score.z
    grads.b = g
    return grads


def save_params(path: str | Path, params: AbmilParams) -> None:
    """Checkpoint: magic, u32 D, u32 A, then V, U, w, W_c, b as f64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", params.embed_dim, params.attention_dim))
        for name in PARAM_FIELDS:
            value = np.asarray(getattr(params, name), dtype="<f8")
            fh.write(value.tobytes())


def load_params(path: str | Path) -> AbmilParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a parameter checkpoint (bad magic)")
    dim, att = struct.unpack_from("<II", raw, 4)
    counts = (att * dim, att * dim, att, dim, 1)
    expected = 12 + 8 * sum(counts)
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: size {len(raw)} does not match dims D={dim}, A={att}"
        )
    offset = 12
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy())
        offset += 8 * count
    return AbmilParams(
        V=arrays[0].reshape(att, dim),
        U=arrays[1].reshape(att, dim),
        w=arrays[2],
        W_c=arrays[3],
        b=float(arrays[4][0]),
    )
