"""Synthetic part-structured segmentation scenes.

The generator plays the role of CLIP pre-training for the toy encoders. Each
class has frozen word tokens, and there are P hidden "part views" (think
"the head of", "the tail of"), shared by all classes. The concept direction
of part p of class c is the frozen text encoding of the sentence
[view_p ; words_c]; the C*P directions are then symmetrically orthogonalized
so parts are near-orthonormal. A pixel of part (c, p) has dense feature
``normalize(u_cp + noise)``, and the stored raw feature map is that vector
pulled back through the frozen projector, so ``dense_project`` recovers it.

Learnable prompts can therefore transfer to unseen classes: a prompt close to
a view reproduces that part's direction for every class, seen or not.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from mvpseg.encoders import Encoders
from mvpseg.prompts import ClassVocab


@dataclass(frozen=True)
class SynthConfig:
    C: int = 6
    P: int = 3
    seen_count: int = 4
    H: int = 16
    W: int = 16
    D: int = 32
    scenes_n: int = 40
    noise_std: float = 0.1
    seed: int = 0
    scene_seed: int = 0
    view_tokens: int = 8
    view_scale: float = 20.0
    word_std: float = 0.5

    def __post_init__(self):
        if not 0 < self.seen_count < self.C:
            raise ValueError(f"need 0 < seen_count < C, got seen_count={self.seen_count}, C={self.C}")
        if self.P < 1:
            raise ValueError("P must be >= 1")


@dataclass
class Scene:
    features: np.ndarray  # (H, W, D) raw feature map X
    labels: np.ndarray  # (H, W) int64, IGNORE allowed


def _orthonormalize(E: np.ndarray) -> np.ndarray:
    """Closest orthonormal row set to ``E`` (symmetric / Loewdin)."""
    u, _, vt = np.linalg.svd(E, full_matrices=False)
    return u @ vt


def part_directions(cfg: SynthConfig, enc: Encoders) -> tuple[np.ndarray, ClassVocab, np.ndarray]:
    """World construction: (u: C x P x D dense directions, vocab, views: P x D)."""
    if cfg.D != enc.cfg.D:
        raise ValueError(f"synthetic D={cfg.D} does not match encoder D={enc.cfg.D}")
    if cfg.C * cfg.P > cfg.D:
        warnings.warn(f"C*P={cfg.C * cfg.P} exceeds D={cfg.D}; part directions cannot be orthonormal")
    rng = np.random.default_rng([cfg.seed, 0])
    D = cfg.D
    words = [rng.normal(0.0, cfg.word_std, size=(int(rng.integers(1, 3)), D)) for _ in range(cfg.C)]
    q, _ = np.linalg.qr(rng.normal(size=(D, cfg.P)))
    views = cfg.view_scale * q.T
    concepts = np.empty((cfg.C, cfg.P, D))
    for c in range(cfg.C):
        for p in range(cfg.P):
            sentence = np.vstack([np.tile(views[p], (cfg.view_tokens, 1)), words[c]])
            concepts[c, p] = enc.text.encode_text(sentence).value
    n = min(cfg.C * cfg.P, D)
    flat = concepts.reshape(cfg.C * cfg.P, D)
    u = flat.copy()
    u[:n] = _orthonormalize(flat[:n])
    vocab = ClassVocab(
        names=[f"class{c}" for c in range(cfg.C)],
        word_embeds=words,
        seen=[c < cfg.seen_count for c in range(cfg.C)],
    )
    return u.reshape(cfg.C, cfg.P, D), vocab, views


def _layout(rng: np.random.Generator, cfg: SynthConfig, first: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Class map and part map for one scene: a background class plus 1-2 rectangles."""
    H, W, P = cfg.H, cfg.W, cfg.P
    n_obj = int(rng.integers(2, 4))
    classes = list(rng.permutation(cfg.C)[:n_obj])
    if first is not None and first not in classes:
        classes[0] = first
    elif first is not None:
        classes.remove(first)
        classes.insert(0, first)
    labels = np.full((H, W), classes[0], dtype=np.int64)
    rows = np.arange(H)[:, None].repeat(W, axis=1)
    parts = (rows * P) // H
    for c in classes[1:]:
        h = int(rng.integers(max(1, H // 4), H // 2 + 1))
        w = int(rng.integers(max(1, W // 4), W // 2 + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        labels[top:top + h, left:left + w] = c
        band = ((np.arange(h) * P) // h)[:, None].repeat(w, axis=1)
        parts[top:top + h, left:left + w] = band
    return labels, parts


def gen_synthetic(cfg: SynthConfig, enc: Encoders) -> tuple[list[Scene], ClassVocab]:
    u, vocab, _ = part_directions(cfg, enc)
    inv = np.linalg.inv(enc.projector.matrix)
    rng = np.random.default_rng([cfg.seed, 1, cfg.scene_seed])
    unseen = vocab.unseen_ids
    scenes = []
    for i in range(cfg.scenes_n):
        # scene 0 is anchored on an unseen class so unseen support is never empty
        first = unseen[int(rng.integers(len(unseen)))] if i == 0 else None
        labels, parts = _layout(rng, cfg, first)
        dense = u[labels, parts] + cfg.noise_std * rng.normal(size=(cfg.H, cfg.W, cfg.D))
        dense /= np.linalg.norm(dense, axis=-1, keepdims=True)
        raw = dense @ inv.T
        raw /= np.linalg.norm(raw, axis=-1, keepdims=True)
        # stored as f32 on disk, so keep only f32-representable values
        scenes.append(Scene(raw.astype(np.float32).astype(np.float64), labels))
    return scenes, vocab


def mask_unseen(scenes: list[Scene], vocab: ClassVocab) -> list[Scene]:
    """Copy of ``scenes`` with unseen-class pixels set to IGNORE."""
    from mvpseg.maskhead import IGNORE

    unseen = np.array(vocab.unseen_ids, dtype=np.int64)
    return [Scene(s.features, np.where(np.isin(s.labels, unseen), IGNORE, s.labels)) for s in scenes]
