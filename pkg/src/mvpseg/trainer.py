"""Prompt-learning loop: SGD with weight decay and linear warmup, seen classes only."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.encoders import Encoders, dense_features
from mvpseg.evalio.metrics import Confusion
from mvpseg.evalio.synthetic import Scene
from mvpseg.maskhead import IGNORE, LossWeights, loss_cls, loss_seg, predict, segment, total_loss
from mvpseg.numgrad import Node
from mvpseg.prompts import ClassVocab, PromptBank, class_vectors, max_abs_cos, ocloss


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 5e-4
    warmup_iters: int = 1000
    warmup_ratio: float = 1e-3
    total_iters: int = 2000
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 3
    use_ocloss: bool = True
    use_gpr: bool = True
    cls_negative: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError(f"need 0 <= warmup_iters <= total_iters, got {self.warmup_iters} > {self.total_iters}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def desk_config(pixels: int = 256, **overrides) -> TrainConfig:
    """Desk training recipe for the per-pixel-mean segmentation loss.

    A summed loss over ``pixels`` pixels with weights (1, 3, 100) and decay
    5e-4 has the same minimizer as the mean loss with the cls/OC weights and
    the decay divided by ``pixels``. lr and warmup are desk-tuned for 2000
    iterations with the small frozen encoder.
    """
    kw = dict(
        lr=2.0,
        weight_decay=5e-4 / pixels,
        warmup_iters=200,
        weights=LossWeights(1.0, 3.0 / pixels, 100.0 / pixels, 10.0),
    )
    kw.update(overrides)
    return TrainConfig(**kw)


LOG_FIELDS = ("iter", "lr", "l_seg", "l_cls", "l_oc", "l_total", "max_abs_cos")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r["iter"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def warmup_lr(it: int, lr: float, warmup_iters: int, warmup_ratio: float) -> float:
    """Linear warmup from ``lr * warmup_ratio`` to ``lr``, constant afterwards."""
    if it < 0:
        raise ValueError("iteration must be >= 0")
    if it < warmup_iters:
        return lr * (warmup_ratio + (1.0 - warmup_ratio) * it / warmup_iters)
    return lr


def sgd_step(
    params: Sequence[Node],
    lr: float,
    weight_decay: float,
    lower_bounds: Sequence[float | None] | None = None,
) -> None:
    """``theta <- theta - lr * (grad + weight_decay * theta)``, then zero the
    grads and clamp any parameter with a lower bound."""
    bounds = lower_bounds or [None] * len(params)
    for p, lo in zip(params, bounds):
        new = p.value - lr * (p.grad + weight_decay * p.value)
        if lo is not None:
            new = np.maximum(new, lo)
        p.assign(new)
        p.zero_grad()


def cyclic_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[list[int]]:
    """Endless batches; each epoch is a fresh seeded permutation."""
    order, pos = rng.permutation(n), 0
    while True:
        batch = []
        while len(batch) < batch_size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            batch.append(int(order[pos]))
            pos += 1
        yield batch


def _check_seen_only(scenes: Sequence[Scene], vocab: ClassVocab) -> None:
    unseen = vocab.unseen_ids
    for s in scenes:
        if np.isin(s.labels, unseen).any():
            raise ValueError("unseen label leaked into training")


def present_classes(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Image-level targets y_c (1 if class c has a pixel in the label map)."""
    present = set(np.unique(labels[labels != IGNORE]).tolist())
    return np.array([1.0 if c in present else 0.0 for c in classes])


def _remap(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    lut = {c: j for j, c in enumerate(classes)}
    out = np.full(labels.shape, IGNORE, dtype=np.int64)
    for c, j in lut.items():
        out[labels == c] = j
    return out


def batch_loss(
    bank: PromptBank,
    vocab: ClassVocab,
    enc: Encoders,
    feats: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    cfg: TrainConfig,
) -> tuple[Node, dict]:
    """Total loss averaged over a batch of (dense features, labels) pairs,
    with the class axis restricted to seen classes."""
    seen = vocab.seen_ids
    tvecs = class_vectors(bank, vocab, enc.text, seen)
    seg_terms, cls_terms = [], []
    for F, lab in zip(feats, labels):
        out = segment(F, tvecs, bank.tau1, bank.tau2, cfg.weights.gamma, cfg.use_gpr)
        seg_terms.append(loss_seg(out.masks, _remap(lab, seen)))
        if cfg.use_gpr:
            cls_terms.append(loss_cls(out.gate, present_classes(lab, seen), cfg.cls_negative))
    seg = ng.mean_axis(ng.stack(seg_terms))
    cls = ng.mean_axis(ng.stack(cls_terms)) if cls_terms else ng.constant(0.0)
    oc = ocloss(bank) if cfg.use_ocloss else ng.constant(0.0)
    total = total_loss(seg, cls, oc, cfg.weights)
    parts = {"l_seg": seg.item(), "l_cls": cls.item(), "l_oc": oc.item(), "l_total": total.item()}
    return total, parts


def train_prompts(
    scenes: Sequence[Scene],
    bank: PromptBank,
    vocab: ClassVocab,
    enc: Encoders,
    cfg: TrainConfig,
) -> tuple[PromptBank, TrainLog]:
    """Train a copy of ``bank``; encoders and vocabulary are never touched.

    Scenes without a single supervised pixel are dropped before sampling.
    """
    _check_seen_only(scenes, vocab)
    scenes = [s for s in scenes if np.any(s.labels != IGNORE)]
    if not scenes and cfg.total_iters:
        raise ValueError("no supervised pixels")
    bank = bank.copy()
    log = TrainLog()
    if cfg.total_iters == 0:
        return bank, log
    feats = [dense_features(s.features, enc) for s in scenes]
    batches = cyclic_batches(len(scenes), cfg.batch_size, np.random.default_rng(cfg.seed))
    params = bank.parameters()
    for it in range(cfg.total_iters):
        idx = next(batches)
        lr = warmup_lr(it, cfg.lr, cfg.warmup_iters, cfg.warmup_ratio)
        cos = max_abs_cos(bank)
        total, parts = batch_loss(bank, vocab, enc, [feats[i] for i in idx], [scenes[i].labels for i in idx], cfg)
        ng.backward(total)
        sgd_step(params, lr, cfg.weight_decay, bank.lower_bounds())
        log.append(iter=it, lr=lr, max_abs_cos=cos, **parts)
    return bank, log


# ---------------------------------------------------------------------------
# inference


def infer(
    bank: PromptBank,
    vocab: ClassVocab,
    enc: Encoders,
    F: np.ndarray,
    gamma: float = 10.0,
    use_gpr: bool = True,
    tvecs: np.ndarray | None = None,
):
    """Segment one dense feature map over all classes."""
    if tvecs is None:
        tvecs = class_vectors(bank, vocab, enc.text).value
    return segment(F, tvecs, float(bank.tau1.value), float(bank.tau2.value), gamma, use_gpr)


def evaluate(
    bank: PromptBank,
    vocab: ClassVocab,
    enc: Encoders,
    scenes: Sequence[Scene],
    gamma: float = 10.0,
    use_gpr: bool = True,
) -> Confusion:
    tvecs = class_vectors(bank, vocab, enc.text).value
    conf = Confusion(vocab.C)
    for s in scenes:
        out = infer(bank, vocab, enc, dense_features(s.features, enc), gamma, use_gpr, tvecs)
        conf.add(s.labels, predict(out.masks, range(vocab.C)))
    return conf
