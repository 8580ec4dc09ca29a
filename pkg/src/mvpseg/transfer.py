"""Knowledge transfer: pseudo-label training of a small student, then self-training.

The student maps raw scene features to the embedding space with a per-pixel
two-layer MLP. Its classifier is a frozen snapshot of the teacher's
multi-view class vectors (plus tau1, tau2), so it keeps scoring every class,
including the ones never labeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.encoders import Encoders, dense_features
from mvpseg.evalio.synthetic import Scene
from mvpseg.maskhead import IGNORE, SegOutput, loss_seg, predict, segment
from mvpseg.numgrad import Node
from mvpseg.prompts import ClassVocab, PromptBank, class_vectors
from mvpseg.trainer import cyclic_batches, sgd_step, warmup_lr


@dataclass
class Teacher:
    """Trained prompts plus the frozen encoders, used read-only."""

    bank: PromptBank
    vocab: ClassVocab
    enc: Encoders
    gamma: float = 10.0
    use_gpr: bool = True

    def __post_init__(self):
        tv = class_vectors(self.bank, self.vocab, self.enc.text).value.copy()
        tv.flags.writeable = False
        self.tvecs = tv

    def segment(self, X: np.ndarray) -> SegOutput:
        F = dense_features(X, self.enc)
        return segment(F, self.tvecs, float(self.bank.tau1.value), float(self.bank.tau2.value), self.gamma, self.use_gpr)


def _threshold(m: np.ndarray, labels: np.ndarray, threshold: float | None) -> np.ndarray:
    if threshold is None:
        return labels
    conf = np.take_along_axis(m, labels[None], axis=0)[0]
    return np.where(conf < threshold, IGNORE, labels)


def pseudo_labels(teacher: Teacher, X: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Teacher argmax over all classes; low-confidence pixels become IGNORE."""
    m = teacher.segment(X).masks.value
    return _threshold(m, predict(m, range(m.shape[0])), threshold)


@dataclass
class StudentModel:
    W1: Node
    b1: Node
    W2: Node
    b2: Node
    head: np.ndarray  # frozen (k+1, C, D) class vectors
    tau1: float
    tau2: float
    gamma: float = 10.0
    use_gpr: bool = True

    def __post_init__(self):
        self.head = np.array(self.head, dtype=np.float64)
        self.head.flags.writeable = False

    def parameters(self) -> list[Node]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> StudentModel:
        return StudentModel(
            *(ng.parameter(p.value) for p in self.parameters()),
            head=self.head, tau1=self.tau1, tau2=self.tau2, gamma=self.gamma, use_gpr=self.use_gpr,
        )


STUDENT_INITS = ("warm", "identity", "random")


def init_student(
    teacher: Teacher,
    D_in: int,
    hidden: int | None = None,
    seed: int = 0,
    init: str = "warm",
    use_gpr: bool | None = None,
) -> StudentModel:
    """Student with the teacher's class-vector snapshot as its classifier.

    ``init`` picks the backbone start. "random" draws uniform +-1/sqrt(fan_in)
    weights. The other two set ``W1 = s*B`` and ``W2 = I/s`` (biases zero) so
    that ``W2 tanh(W1 x) ~= B x``:

    - "identity": B = I with s = 1e-4, a near-exact identity map.
    - "warm": B = M / c with M the frozen dense projector matrix and
      ``c = sqrt(D) / ||M^-1||_F`` (a typical ``||M x||`` for unit x), s = 1.
      This starts from the teacher's own image path with unit-scale outputs.

    Both need ``D_in == D`` and ``hidden >= D``.
    """
    if init not in STUDENT_INITS:
        raise ValueError(f"unknown student init {init!r}, expected one of {STUDENT_INITS}")
    D = teacher.tvecs.shape[2]
    hidden = hidden or 2 * D
    if init == "random":
        rng = np.random.default_rng(seed)
        W1 = rng.uniform(-1, 1, (hidden, D_in)) / math.sqrt(D_in)
        b1 = rng.uniform(-1, 1, hidden) / math.sqrt(D_in)
        W2 = rng.uniform(-1, 1, (D, hidden)) / math.sqrt(hidden)
        b2 = rng.uniform(-1, 1, D) / math.sqrt(hidden)
    else:
        if D_in != D or hidden < D:
            raise ValueError(f"{init} init needs D_in == D and hidden >= D")
        if init == "identity":
            B, s = np.eye(D), 1e-4
        else:
            M = teacher.enc.projector.matrix
            B, s = M * (np.linalg.norm(np.linalg.inv(M)) / math.sqrt(D)), 1.0
        W1 = np.zeros((hidden, D_in))
        W1[:D] = s * B
        W2 = np.zeros((D, hidden))
        W2[:, :D] = np.eye(D) / s
        b1, b2 = np.zeros(hidden), np.zeros(D)
    return StudentModel(
        ng.parameter(W1), ng.parameter(b1), ng.parameter(W2), ng.parameter(b2),
        head=teacher.tvecs,
        tau1=float(teacher.bank.tau1.value),
        tau2=float(teacher.bank.tau2.value),
        gamma=teacher.gamma,
        use_gpr=teacher.use_gpr if use_gpr is None else use_gpr,
    )


def embed(student: StudentModel, X) -> Node:
    """Unit-normalize each input pixel, apply the MLP, normalize again:
    (H, W, D_in) -> (H, W, D)."""
    X = np.asarray(X.value if isinstance(X, Node) else X, dtype=np.float64)
    H, W, D_in = X.shape
    n = H * W
    hidden = student.W1.shape[0]
    D = student.W2.shape[0]
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("degenerate pixel embedding")
    x = ng.constant((X / norms).reshape(n, D_in))
    h = ng.tanh(ng.add(ng.matmul(x, ng.transpose(student.W1)), ng.expand(student.b1, (n, hidden))))
    out = ng.add(ng.matmul(h, ng.transpose(student.W2)), ng.expand(student.b2, (n, D)))
    try:
        out = ng.l2_normalize(out, axis=1)
    except ValueError:
        raise ValueError("degenerate pixel embedding") from None
    return ng.reshape(out, (H, W, D))


def student_forward(student: StudentModel, X) -> SegOutput:
    return segment(embed(student, X), student.head, student.tau1, student.tau2, student.gamma, student.use_gpr)


def student_infer(student: StudentModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = student_forward(student, X).masks.value
    return m, predict(m, range(m.shape[0]))


@dataclass(frozen=True)
class TransferConfig:
    total_iters: int = 1000
    guided_fraction: float = 0.1
    lr: float = 0.05
    weight_decay: float = 5e-4
    warmup_iters: int = 50
    warmup_ratio: float = 1e-3
    batch_size: int = 4
    hidden: int | None = None
    seed: int = 0
    pseudo_confidence_threshold: float | None = None

    def __post_init__(self):
        if not 0 < self.guided_fraction < 1:
            raise ValueError(f"guided_fraction must lie in (0, 1), got {self.guided_fraction}")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters must not exceed total_iters")

    @property
    def guided_iters(self) -> int:
        return int(round(self.guided_fraction * self.total_iters))


def train_student(
    scenes: Sequence[Scene],
    teacher: Teacher,
    student: StudentModel,
    cfg: TransferConfig,
) -> tuple[StudentModel, list[dict]]:
    """Guided phase on teacher pseudo-labels, then self-training on the
    student's own current predictions. Returns a trained copy and a log."""
    student = student.copy()
    teacher_labels = [pseudo_labels(teacher, s.features, cfg.pseudo_confidence_threshold) for s in scenes]
    batches = cyclic_batches(len(scenes), cfg.batch_size, np.random.default_rng(cfg.seed))
    params = student.parameters()
    log = []
    for it in range(cfg.total_iters):
        guided = it < cfg.guided_iters
        terms = []
        for i in next(batches):
            out = student_forward(student, scenes[i].features)
            if guided:
                labels = teacher_labels[i]
            else:
                m = out.masks.value
                labels = _threshold(m, predict(m, range(m.shape[0])), cfg.pseudo_confidence_threshold)
            if np.any(labels != IGNORE):
                terms.append(loss_seg(out.masks, labels))
        lr = warmup_lr(it, cfg.lr, cfg.warmup_iters, cfg.warmup_ratio)
        if terms:
            loss = ng.mean_axis(ng.stack(terms))
            ng.backward(loss)
            sgd_step(params, lr, cfg.weight_decay)
            log.append({"iter": it, "lr": lr, "guided": guided, "loss": loss.item()})
    return student, log


def agreement(student: StudentModel, teacher: Teacher, scenes: Sequence[Scene]) -> float:
    """Fraction of pixels where student and teacher predict the same class."""
    same = total = 0
    for s in scenes:
        _, ls = student_infer(student, s.features)
        lt = pseudo_labels(teacher, s.features)
        same += int(np.sum(ls == lt))
        total += ls.size
    return same / total
