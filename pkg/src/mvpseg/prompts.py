"""Learnable prompt bank, class vocabulary, sentence building and OCLoss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mvpseg import numgrad as ng
from mvpseg.encoders import ToyTextEncoder
from mvpseg.numgrad import Node

TAU_FLOOR = 1e-3


@dataclass
class PromptBank:
    """``prompts[0]`` is the global classification prompt, ``prompts[1:]`` the
    k segmentation prompts. All are shared by every class."""

    prompts: Node  # (k+1, T, D)
    tau1: Node
    tau2: Node

    def __post_init__(self):
        if self.prompts.ndim != 3 or self.prompts.shape[0] < 2 or self.prompts.shape[1] < 1:
            raise ValueError(f"prompts must be (k+1, T, D) with k >= 1, T >= 1; got {self.prompts.shape}")

    @property
    def k(self) -> int:
        return self.prompts.shape[0] - 1

    @property
    def T(self) -> int:
        return self.prompts.shape[1]

    @property
    def D(self) -> int:
        return self.prompts.shape[2]

    def parameters(self) -> list[Node]:
        return [self.prompts, self.tau1, self.tau2]

    def lower_bounds(self) -> list[float | None]:
        return [None, TAU_FLOOR, TAU_FLOOR]

    def copy(self) -> PromptBank:
        return PromptBank(
            ng.parameter(self.prompts.value),
            ng.parameter(self.tau1.value),
            ng.parameter(self.tau2.value),
        )

    def to_bytes(self) -> bytes:
        return b"".join(p.value.tobytes() for p in self.parameters())


def init_prompt_bank(
    k: int, T: int, D: int, seed: int, std: float = 0.02, tau1: float = 1.0, tau2: float = 1.0
) -> PromptBank:
    if k < 1 or T < 1:
        raise ValueError(f"need k >= 1 and T >= 1, got k={k}, T={T}")
    rng = np.random.default_rng(seed)
    return PromptBank(
        prompts=ng.parameter(rng.normal(0.0, std, size=(k + 1, T, D))),
        tau1=ng.parameter(tau1),
        tau2=ng.parameter(tau2),
    )


@dataclass
class ClassVocab:
    names: list[str]
    word_embeds: list[np.ndarray]  # each (L_c, D), frozen
    seen: list[bool]

    def __post_init__(self):
        if not (len(self.names) == len(self.word_embeds) == len(self.seen)):
            raise ValueError("names, word_embeds and seen must have equal length")
        self.word_embeds = [np.array(w, dtype=np.float64) for w in self.word_embeds]
        for w in self.word_embeds:
            w.flags.writeable = False

    @property
    def C(self) -> int:
        return len(self.names)

    @property
    def seen_ids(self) -> list[int]:
        return [c for c, s in enumerate(self.seen) if s]

    @property
    def unseen_ids(self) -> list[int]:
        return [c for c, s in enumerate(self.seen) if not s]

    def fingerprint(self) -> list[bytes]:
        return [w.tobytes() for w in self.word_embeds]


def build_sentence(bank: PromptBank, i: int, c: int, vocab: ClassVocab) -> Node:
    """Prompt tokens of ``p_i`` followed by the word tokens of class ``c``."""
    if not 0 <= i <= bank.k:
        raise IndexError(f"prompt index {i} out of range [0, {bank.k}]")
    if not 0 <= c < vocab.C:
        raise IndexError(f"class index {c} out of range [0, {vocab.C})")
    p = ng.reshape(ng.slice_axis(bank.prompts, i, i + 1, 0), (bank.T, bank.D))
    return ng.concat_axis([p, ng.constant(vocab.word_embeds[c])], 0)


def class_vectors(
    bank: PromptBank, vocab: ClassVocab, enc: ToyTextEncoder, classes: list[int] | None = None
) -> Node:
    """Text vectors ``t_c^i`` for every prompt and class, shape (k+1, C, D).

    ``classes`` restricts (and orders) the class axis; training passes the
    seen classes only.
    """
    classes = list(range(vocab.C)) if classes is None else list(classes)
    rows = [
        enc.encode_text(build_sentence(bank, i, c, vocab))
        for i in range(bank.k + 1)
        for c in classes
    ]
    return ng.reshape(ng.stack(rows, 0), (bank.k + 1, len(classes), bank.D))


def avg_prompt(bank: PromptBank, i: int) -> Node:
    if i == 0:
        raise ValueError("OCLoss excludes the global prompt")
    if not 1 <= i <= bank.k:
        raise IndexError(f"segmentation prompt index {i} out of range [1, {bank.k}]")
    p = ng.reshape(ng.slice_axis(bank.prompts, i, i + 1, 0), (bank.T, bank.D))
    return ng.mean_axis(p, 0)


def ocloss(bank: PromptBank) -> Node:
    """Sum of |cos| over all pairs of token-averaged segmentation prompts."""
    if bank.k == 1:
        return ng.constant(0.0)
    try:
        units = [ng.l2_normalize(avg_prompt(bank, i)) for i in range(1, bank.k + 1)]
    except ValueError:
        raise ValueError("degenerate averaged prompt") from None
    terms = [
        ng.abs_(ng.dot(units[i], units[j]))
        for i in range(bank.k)
        for j in range(i + 1, bank.k)
    ]
    return ng.sum_axis(ng.stack(terms, 0))


def max_abs_cos(bank: PromptBank) -> float:
    """Largest pairwise |cos| among averaged segmentation prompts (0 if k == 1)."""
    if bank.k == 1:
        return 0.0
    avg = bank.prompts.value[1:].mean(axis=1)
    unit = avg / np.linalg.norm(avg, axis=1, keepdims=True)
    cos = np.abs(unit @ unit.T)
    return float(cos[np.triu_indices(bank.k, 1)].max())
