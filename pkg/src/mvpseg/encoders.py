"""Frozen toy stand-ins for the CLIP text encoder and dense image head.

All weights are drawn once from ``numpy.random.default_rng(seed)`` (PCG64),
entries uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, in a fixed order:
text W1, b1, W2, b2, then proj_v, proj_c, proj_q, proj_k. None of them ever
require grad; gradients pass through to the token inputs only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.numgrad import Node


@dataclass(frozen=True)
class EncoderConfig:
    D: int = 32
    T_temp: float | None = None
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden is None:
            object.__setattr__(self, "hidden", 2 * self.D)
        if self.T_temp is None:
            object.__setattr__(self, "T_temp", math.sqrt(self.D))
        if self.D < 2:
            raise ValueError(f"D must be >= 2, got {self.D}")
        if self.hidden < self.D:
            raise ValueError(f"hidden ({self.hidden}) must be >= D ({self.D})")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Node:
    bound = 1.0 / math.sqrt(fan_in)
    return ng.constant(rng.uniform(-bound, bound, size=shape))


@dataclass
class ToyTextEncoder:
    """Mean-pool the tokens, two-layer tanh MLP, L2-normalize."""

    W1: Node
    b1: Node
    W2: Node
    b2: Node

    @classmethod
    def from_rng(cls, rng: np.random.Generator, D: int, hidden: int) -> ToyTextEncoder:
        return cls(
            W1=_uniform(rng, (hidden, D), D),
            b1=_uniform(rng, (hidden,), D),
            W2=_uniform(rng, (D, hidden), hidden),
            b2=_uniform(rng, (D,), hidden),
        )

    def parameters(self) -> list[Node]:
        return [self.W1, self.b1, self.W2, self.b2]

    def encode_text(self, tokens) -> Node:
        tokens = ng.as_node(tokens)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError("empty token sequence")
        x = ng.mean_axis(tokens, 0)
        h = ng.tanh(ng.add(ng.matmul(self.W1, x), self.b1))
        return ng.l2_normalize(ng.add(ng.matmul(self.W2, h), self.b2))


@dataclass
class DenseProjector:
    """Per-pixel value and output projections (1x1 convolutions)."""

    proj_v: Node
    proj_c: Node

    def parameters(self) -> list[Node]:
        return [self.proj_v, self.proj_c]

    @property
    def matrix(self) -> np.ndarray:
        """The composed map ``Proj_c @ Proj_v`` acting on a pixel column."""
        return self.proj_c.value @ self.proj_v.value


@dataclass
class Encoders:
    cfg: EncoderConfig
    text: ToyTextEncoder
    projector: DenseProjector
    proj_q: Node
    proj_k: Node

    def parameters(self) -> list[Node]:
        return [*self.text.parameters(), *self.projector.parameters(), self.proj_q, self.proj_k]

    def fingerprint(self) -> list[bytes]:
        """Raw bytes of every frozen parameter, for bitwise comparisons."""
        return [p.value.tobytes() for p in self.parameters()]


def build_encoders(cfg: EncoderConfig) -> Encoders:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.D
    text = ToyTextEncoder.from_rng(rng, D, cfg.hidden)
    projector = DenseProjector(proj_v=_uniform(rng, (D, D), D), proj_c=_uniform(rng, (D, D), D))
    proj_q = _uniform(rng, (D, D), D)
    proj_k = _uniform(rng, (D, D), D)
    return Encoders(cfg, text, projector, proj_q, proj_k)


def _pixels(X) -> tuple[Node, tuple[int, int]]:
    X = ng.as_node(X)
    if X.ndim != 3:
        raise ng.ShapeError(f"expected an H x W x D feature map, got shape {X.shape}")
    H, W, D = X.shape
    if H * W < 1:
        raise ng.ShapeError("feature map has no pixels")
    return ng.reshape(X, (H * W, D)), (H, W)


def attn_pool(X, proj_q, proj_k, dp: DenseProjector, T_temp: float) -> Node:
    """Attention pooling with the spatially averaged query; returns a D vector."""
    Xf, _ = _pixels(X)
    Q = ng.matmul(Xf, ng.transpose(proj_q))
    K = ng.matmul(Xf, ng.transpose(proj_k))
    V = ng.matmul(Xf, ng.transpose(dp.proj_v))
    q_bar = ng.mean_axis(Q, 0)
    weights = ng.softmax_axis(ng.mul_scalar(ng.matmul(K, q_bar), 1.0 / T_temp), 0)
    pooled = ng.matmul(ng.transpose(V), weights)
    return ng.matmul(dp.proj_c, pooled)


def dense_project(X, dp: DenseProjector, normalize: bool = True) -> Node:
    """``Proj_c(Proj_v(x))`` at every pixel, then per-pixel L2 normalization."""
    Xf, (H, W) = _pixels(X)
    D_out = dp.proj_c.shape[0]
    F = ng.matmul(ng.matmul(Xf, ng.transpose(dp.proj_v)), ng.transpose(dp.proj_c))
    if normalize:
        try:
            F = ng.l2_normalize(F, axis=1)
        except ValueError:
            raise ValueError("degenerate pixel feature") from None
    return ng.reshape(F, (H, W, D_out))


def dense_features(X: np.ndarray, enc: Encoders) -> np.ndarray:
    """Normalized dense features as a plain array (no graph kept)."""
    return dense_project(X, enc.projector).value
