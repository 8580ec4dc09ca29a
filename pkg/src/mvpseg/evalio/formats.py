"""Binary file formats. All integers and floats are little-endian.

Dataset (``MVPS``)::

    magic "MVPS" | u32 version=1 | u32 H, W, D, C, N, seen_count
    N x ( f32 features[H][W][D] | u16 labels[H][W] )   65535 = IGNORE
    "VOCB" | u64 encoder_seed | C x ( u32 L_c | f64 word_embeds[L_c][D] )

The vocabulary trailer carries the class word tokens and the seed of the
frozen encoders the scenes were generated against.

Prompt checkpoint (``MVPP``)::

    magic "MVPP" | u32 version=1 | u32 k, T, D
    f64 prompts[k+1][T][D] | f64 tau1, tau2
    u64 encoder_seed, prompt_seed, train_seed

Student checkpoint (``MVSS``)::

    magic "MVSS" | u32 version=1 | u32 D_in, hidden, D, k, C, use_gpr
    f64 W1[hidden][D_in], b1[hidden], W2[D][hidden], b2[D]
    f64 head[k+1][C][D] | f64 tau1, tau2, gamma
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from mvpseg.evalio.synthetic import Scene
from mvpseg.prompts import ClassVocab, PromptBank
from mvpseg import numgrad as ng

VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"truncated file: wanted {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals[0] if n == 1 else vals

    def u64(self, n: int = 1):
        vals = struct.unpack(f"<{n}Q", self.take(8 * n))
        return vals[0] if n == 1 else vals

    def array(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).reshape(shape)

    def header(self, magic: bytes) -> None:
        got = self.take(4) if len(self.data) >= 4 else self.data
        if got != magic:
            raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")
        version = self.u32()
        if version != VERSION:
            raise VersionMismatchError(f"version mismatch: file has {version}, reader supports {VERSION}")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes")


def _read(path: str) -> _Reader:
    with open(path, "rb") as f:
        return _Reader(f.read())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    scenes: list[Scene]
    vocab: ClassVocab
    encoder_seed: int


def dataset_size(N: int, H: int, W: int, D: int, token_counts: list[int]) -> int:
    """Exact byte size of a dataset file."""
    header = 4 + 4 * 7
    scenes = N * (H * W * D * 4 + H * W * 2)
    trailer = 4 + 8 + sum(4 + 8 * L * D for L in token_counts)
    return header + scenes + trailer


def write_dataset(scenes: list[Scene], vocab: ClassVocab, path: str, encoder_seed: int) -> None:
    if not scenes:
        raise ValueError("no scenes to write")
    H, W, D = scenes[0].features.shape
    seen_count = sum(vocab.seen)
    if vocab.seen != [c < seen_count for c in range(vocab.C)]:
        raise ValueError("the file format requires seen classes to come first")
    parts = [b"MVPS", struct.pack("<7I", VERSION, H, W, D, vocab.C, len(scenes), seen_count)]
    for s in scenes:
        if s.features.shape != (H, W, D):
            raise ValueError(f"scene shape {s.features.shape} differs from {(H, W, D)}")
        parts.append(s.features.astype("<f4").tobytes())
        parts.append(s.labels.astype("<u2").tobytes())
    parts.append(b"VOCB" + struct.pack("<Q", encoder_seed))
    for w in vocab.word_embeds:
        parts.append(struct.pack("<I", w.shape[0]) + w.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_dataset(path: str) -> Dataset:
    r = _read(path)
    r.header(b"MVPS")
    H, W, D, C, N, seen_count = r.u32(6)
    scenes = []
    for _ in range(N):
        feats = r.array("<f4", (H, W, D)).astype(np.float64)
        labels = r.array("<u2", (H, W)).astype(np.int64)
        scenes.append(Scene(feats, labels))
    tag = r.take(4)
    if tag != b"VOCB":
        raise BadMagicError(f"bad magic: expected vocabulary tag b'VOCB', got {tag!r}")
    encoder_seed = r.u64()
    words = []
    for _ in range(C):
        L = r.u32()
        words.append(r.array("<f8", (L, D)).copy())
    r.done()
    vocab = ClassVocab([f"class{c}" for c in range(C)], words, [c < seen_count for c in range(C)])
    return Dataset(scenes, vocab, encoder_seed)


# ---------------------------------------------------------------------------
# prompt checkpoints


@dataclass
class PromptCheckpoint:
    bank: PromptBank
    encoder_seed: int
    prompt_seed: int
    train_seed: int


def save_prompts(bank: PromptBank, path: str, encoder_seed: int, prompt_seed: int, train_seed: int) -> None:
    blob = [
        b"MVPP",
        struct.pack("<4I", VERSION, bank.k, bank.T, bank.D),
        bank.prompts.value.astype("<f8").tobytes(),
        struct.pack("<2d", float(bank.tau1.value), float(bank.tau2.value)),
        struct.pack("<3Q", encoder_seed, prompt_seed, train_seed),
    ]
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def load_prompts(path: str, expect_D: int | None = None, expect_k: int | None = None) -> PromptCheckpoint:
    r = _read(path)
    r.header(b"MVPP")
    k, T, D = r.u32(3)
    if expect_D is not None and D != expect_D:
        raise DimensionMismatchError(f"dimension mismatch: checkpoint D={D}, expected D={expect_D}")
    if expect_k is not None and k != expect_k:
        raise DimensionMismatchError(f"dimension mismatch: checkpoint k={k}, expected k={expect_k}")
    prompts = r.array("<f8", (k + 1, T, D))
    tau1, tau2 = struct.unpack("<2d", r.take(16))
    seeds = r.u64(3)
    r.done()
    bank = PromptBank(ng.parameter(prompts), ng.parameter(tau1), ng.parameter(tau2))
    return PromptCheckpoint(bank, *seeds)


# ---------------------------------------------------------------------------
# student checkpoints


def save_student(student, path: str) -> None:
    W1, b1, W2, b2 = (p.value for p in student.parameters())
    k1, C, D = student.head.shape
    blob = [
        b"MVSS",
        struct.pack("<7I", VERSION, W1.shape[1], W1.shape[0], D, k1 - 1, C, int(student.use_gpr)),
        *(a.astype("<f8").tobytes() for a in (W1, b1, W2, b2, student.head)),
        struct.pack("<3d", student.tau1, student.tau2, student.gamma),
    ]
    with open(path, "wb") as f:
        f.write(b"".join(blob))


def load_student(path: str):
    from mvpseg.transfer import StudentModel

    r = _read(path)
    r.header(b"MVSS")
    D_in, hidden, D, k, C, use_gpr = r.u32(6)
    W1 = r.array("<f8", (hidden, D_in))
    b1 = r.array("<f8", (hidden,))
    W2 = r.array("<f8", (D, hidden))
    b2 = r.array("<f8", (D,))
    head = r.array("<f8", (k + 1, C, D)).copy()
    tau1, tau2, gamma = struct.unpack("<3d", r.take(24))
    r.done()
    return StudentModel(
        W1=ng.parameter(W1), b1=ng.parameter(b1), W2=ng.parameter(W2), b2=ng.parameter(b2),
        head=head, tau1=tau1, tau2=tau2, gamma=gamma, use_gpr=bool(use_gpr),
    )
