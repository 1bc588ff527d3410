"""Byte-level corpora, train/validation splitting, deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256


def tokenize_bytes(text) -> np.ndarray:
    """Identity byte mapping; accepts str or bytes, returns int64 ids."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize_bytes(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass
class Batch:
    inputs: np.ndarray   # [batch, seq_len] token ids
    targets: np.ndarray  # inputs shifted one position left


@dataclass
class Corpus:
    """Token store with a hard train/validation boundary.

    Validation is the final `val_fraction` of the token stream; training
    windows never cross the boundary, so the two ranges stay disjoint.
    """

    tokens: np.ndarray
    val_fraction: float = 0.1
    split: int = field(init=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        self.split = int(len(self.tokens) * (1.0 - self.val_fraction))

    @classmethod
    def from_paths(cls, paths, val_fraction: float = 0.1) -> "Corpus":
        blobs = [Path(p).read_bytes() for p in paths]
        return cls(tokenize_bytes(b"".join(blobs)), val_fraction)

    @property
    def train_tokens(self) -> np.ndarray:
        return self.tokens[: self.split]

    @property
    def val_tokens(self) -> np.ndarray:
        return self.tokens[self.split:]


def _windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Starts of non-overlapping (seq_len + 1)-token windows."""
    width = seq_len + 1
    count = len(tokens) // width
    return np.arange(count) * width


def batches(corpus: Corpus, batch: int, seq_len: int, seed: int,
            split: str = "train", epochs: int | None = None):
    """Yield deterministic shuffled batches of contiguous windows.

    Identical (corpus, batch, seq_len, seed) always produces the identical
    stream. Windows are non-overlapping; the train stream draws only from
    tokens before the validation boundary. epochs=None streams forever.
    """
    tokens = corpus.train_tokens if split == "train" else corpus.val_tokens
    starts = _windows(tokens, seq_len)
    if len(starts) < batch:
        raise ValueError(
            f"corpus too small: {len(starts)} windows of {seq_len + 1} tokens, "
            f"need at least {batch}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(starts)
        for i in range(0, len(order) - batch + 1, batch):
            rows = np.stack([tokens[s: s + seq_len + 1] for s in order[i: i + batch]])
            yield Batch(inputs=rows[:, :-1].copy(), targets=rows[:, 1:].copy())
        epoch += 1


def window_count(corpus: Corpus, seq_len: int, split: str = "train") -> int:
    tokens = corpus.train_tokens if split == "train" else corpus.val_tokens
    return len(tokens) // (seq_len + 1)


def make_skewed_synthetic(n_tokens: int, modes: int, seed: int,
                          tile_len: int = 16, segment_len: int = 64,
                          val_fraction: float = 0.1,
                          mutation_rate: float = 0.0) -> Corpus:
    """Corpus of repetitive byte tiles drawn from `modes` pattern families.

    Each segment repeats one family's fixed random tile; family k is chosen
    with probability proportional to 1/(k+1), so the stream is dominated by
    a few patterns. Narrow data like this lets a router without balancing
    pressure collapse onto a small expert subset. The first byte of every
    tile is the family id, which keeps families disjoint by construction.

    mutation_rate randomizes that fraction of non-tag bytes per segment
    instance. A fully memorizable stream stops producing gradient once
    learned, freezing the router in its initial spread; the irreducible
    entropy from mutations keeps gradients flowing, which is what lets an
    unbalanced router drift toward collapse over a long run.
    """
    if modes < 2:
        raise ValueError("need at least 2 modes")
    if not 0.0 <= mutation_rate < 1.0:
        raise ValueError("mutation_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    tiles = []
    for k in range(modes):
        tile = rng.integers(modes, 256, size=tile_len)
        tile[0] = k  # family tag byte, below the random-byte range
        tiles.append(tile)
    weights = 1.0 / (np.arange(modes) + 1.0)
    weights /= weights.sum()
    reps = segment_len // tile_len
    out = []
    total = 0
    while total < n_tokens:
        k = rng.choice(modes, p=weights)
        seg = np.tile(tiles[k], reps)
        if mutation_rate:
            hit = rng.random(len(seg)) < mutation_rate
            hit[::tile_len] = False  # never corrupt the family tags
            seg = np.where(hit, rng.integers(modes, 256, size=len(seg)), seg)
        out.append(seg)
        total += len(seg)
    tokens = np.concatenate(out)[:n_tokens]
    return Corpus(tokens, val_fraction)
