"""Synthetic speech-like dataset: each target token becomes a run of noisy
repeated codebook frames, so sources are several times longer than targets
and carry heavy redundancy. The supervised target applies a fixed token
substitution (a stand-in for translation) and wraps the result in BOS/EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS = 0, 1, 2
FIRST_CONTENT = 3


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int = 32
    frame_dim: int = 16
    target_len: tuple[int, int] = (5, 20)
    upsample: tuple[int, int] = (6, 10)
    noise_sigma: float = 0.1
    permutation_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (PAD, BOS, EOS plus content)")
        if self.upsample[0] < 1 or self.upsample[0] > self.upsample[1]:
            raise ValueError(f"bad upsample range {self.upsample}")
        if self.target_len[0] < 1 or self.target_len[0] > self.target_len[1]:
            raise ValueError(f"bad target_len range {self.target_len}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class ToyExample:
    source: np.ndarray  # (L, frame_dim) float32
    target: list[int]   # BOS, content..., EOS


def task_tables(cfg: ToyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Frozen per-task tables: token codebook and substitution permutation.

    Derived from permutation_seed only, so train and eval splits generated
    with different seeds share the same underlying task.
    """
    rng = np.random.default_rng(cfg.permutation_seed)
    codebook = rng.standard_normal((cfg.vocab_size, cfg.frame_dim)).astype(np.float32)
    subst = np.arange(cfg.vocab_size)
    content = np.arange(FIRST_CONTENT, cfg.vocab_size)
    subst[FIRST_CONTENT:] = rng.permutation(content)
    return codebook, subst


def generate_dataset(cfg: ToyConfig, n: int, seed: int) -> list[ToyExample]:
    """n examples, deterministic given (cfg, n, seed)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    codebook, subst = task_tables(cfg)
    rng = np.random.default_rng(seed)
    lo_t, hi_t = cfg.target_len
    lo_u, hi_u = cfg.upsample
    examples = []
    for _ in range(n):
        tlen = int(rng.integers(lo_t, hi_t + 1))
        tokens = rng.integers(FIRST_CONTENT, cfg.vocab_size, size=tlen)
        reps = rng.integers(lo_u, hi_u + 1, size=tlen)
        frames = np.repeat(codebook[tokens], reps, axis=0)
        noise = rng.standard_normal(frames.shape) * cfg.noise_sigma
        source = (frames + noise).astype(np.float32)
        target = [BOS] + [int(subst[t]) for t in tokens] + [EOS]
        examples.append(ToyExample(source=source, target=target))
    return examples


def target_content(target: list[int]) -> list[int]:
    """Tokens between BOS and the first EOS."""
    body = target[1:] if target and target[0] == BOS else list(target)
    if EOS in body:
        body = body[: body.index(EOS)]
    return body


def save_dataset(path: str | Path, examples: list[ToyExample]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            row = {
                "source": [[float(v) for v in frame] for frame in ex.source],
                "target": [int(t) for t in ex.target],
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset(path: str | Path) -> list[ToyExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            examples.append(
                ToyExample(
                    source=np.asarray(row["source"], dtype=np.float32),
                    target=[int(t) for t in row["target"]],
                )
            )
    return examples
