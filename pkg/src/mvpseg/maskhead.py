"""Pixel classification against prompt text vectors, mask fusion, global
prompt refining (GPR) and the three training losses.

Layouts: dense features are (H, W, D); text vectors (k+1, C, D); the mask
stack (k+1, C, H, W); fused and gated masks (C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.numgrad import Node

IGNORE = 65535


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 3.0
    lambda3: float = 100.0
    gamma: float = 10.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def pixel_masks(F, tvecs) -> Node:
    """Cosine scores of every pixel against every ``t_c^i``: (k+1, C, H, W)."""
    F, tvecs = ng.as_node(F), ng.as_node(tvecs)
    if F.ndim != 3 or tvecs.ndim != 3 or F.shape[2] != tvecs.shape[2]:
        raise ng.ShapeError(f"pixel_masks: feature map {F.shape} vs text vectors {tvecs.shape}")
    H, W, D = F.shape
    n_prompts, C, _ = tvecs.shape
    pix = ng.transpose(ng.reshape(F, (H * W, D)))
    scores = ng.matmul(ng.reshape(tvecs, (n_prompts * C, D)), pix)
    return ng.reshape(scores, (n_prompts, C, H, W))


def fuse(stack, tau1) -> Node:
    """Softmax over classes of ``tau1 * sum_{i>=1} m^i``; the global mask is excluded."""
    stack = ng.as_node(stack)
    if stack.ndim != 4 or stack.shape[0] < 2:
        raise ng.ShapeError(f"fuse: need a (k+1, C, H, W) stack with k >= 1, got {stack.shape}")
    seg = ng.slice_axis(stack, 1, stack.shape[0], 0)
    summed = ng.sum_axis(seg, 0)
    return ng.softmax_axis(ng.mul_scalar(summed, tau1), 0)


def gpr_pooled(m0, gamma: float) -> Node:
    """Per-class softmax(gamma * m0)-weighted spatial pooling of the global mask."""
    m0 = ng.as_node(m0)
    C = m0.shape[0]
    flat = ng.reshape(m0, (C, -1))
    weights = ng.softmax_axis(ng.mul_scalar(flat, gamma), 1)
    return ng.sum_axis(ng.mul(flat, weights), 1)


def gpr_score(m0, gamma: float, tau2) -> Node:
    """Image-level class scores ``g_c = sigmoid(pooled_c / tau2)``."""
    return ng.sigmoid(ng.div_scalar(gpr_pooled(m0, gamma), tau2))


def apply_gpr(m_f, g) -> Node:
    m_f, g = ng.as_node(m_f), ng.as_node(g)
    C = m_f.shape[0]
    if g.shape != (C,):
        raise ng.ShapeError(f"apply_gpr: gate shape {g.shape} vs {C} classes")
    gate = ng.expand(ng.reshape(g, (C,) + (1,) * (m_f.ndim - 1)), m_f.shape)
    return ng.mul(m_f, gate)


def loss_cls(g, y, negative: bool = False) -> Node:
    """``-sum_c y_c log g_c``; ``negative=True`` adds the absent-class term."""
    g = ng.as_node(g)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != g.shape:
        raise ng.ShapeError(f"loss_cls: targets {y.shape} vs scores {g.shape}")
    loss = ng.mul_scalar(ng.sum_axis(ng.mul(ng.constant(y), ng.log_eps(g))), -1.0)
    if negative:
        neg = ng.sum_axis(ng.mul(ng.constant(1.0 - y), ng.log_eps(ng.sub(np.ones(g.shape), g))))
        loss = ng.sub(loss, neg)
    return loss


def _one_hot(gt: np.ndarray, C: int) -> tuple[np.ndarray, int]:
    gt = np.asarray(gt)
    valid = gt != IGNORE
    if np.any(gt[valid] < 0) or np.any(gt[valid] >= C):
        raise ValueError(f"labels must lie in [0, {C}) or be IGNORE")
    onehot = np.zeros((C,) + gt.shape)
    rows, cols = np.nonzero(valid)
    onehot[gt[valid], rows, cols] = 1.0
    return onehot, int(valid.sum())


def loss_seg(m, gt) -> Node:
    """Per-pixel mean of ``-log m_{gt}`` over non-ignored pixels."""
    m = ng.as_node(m)
    onehot, n = _one_hot(gt, m.shape[0])
    if onehot.shape != m.shape:
        raise ng.ShapeError(f"loss_seg: masks {m.shape} vs labels {np.shape(gt)}")
    if n == 0:
        raise ValueError("no supervised pixels")
    return ng.mul_scalar(ng.sum_axis(ng.mul(ng.constant(onehot), ng.log_eps(m))), -1.0 / n)


def total_loss(seg, cls, oc, w: LossWeights) -> Node:
    terms = [ng.mul_scalar(seg, w.lambda1), ng.mul_scalar(cls, w.lambda2), ng.mul_scalar(oc, w.lambda3)]
    return ng.add(ng.add(terms[0], terms[1]), terms[2])


def predict(m, eval_classes: Sequence[int]) -> np.ndarray:
    """Argmax over ``eval_classes`` per pixel, returned as original class ids.

    Ties go to the lowest class index.
    """
    m = m.value if isinstance(m, Node) else np.asarray(m)
    ids = np.array(sorted(set(eval_classes)), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("eval_classes must be nonempty")
    return ids[np.argmax(m[ids], axis=0)]


class SegOutput(NamedTuple):
    stack: Node
    fused: Node
    gate: Node | None
    masks: Node  # gated if GPR is on, else the fused masks


def segment(F, tvecs, tau1, tau2, gamma: float, use_gpr: bool = True) -> SegOutput:
    """Full head: pixel scores, fusion, and optional GPR gating."""
    stack = pixel_masks(F, tvecs)
    fused = fuse(stack, tau1)
    if not use_gpr:
        return SegOutput(stack, fused, None, fused)
    m0 = ng.reshape(ng.slice_axis(stack, 0, 1, 0), stack.shape[1:])
    g = gpr_score(m0, gamma, tau2)
    return SegOutput(stack, fused, g, apply_gpr(fused, g))
