"""Same-concept history windows: gathering, forgetting decay, reshape/stack.

For a prediction at step t+1 on concept c, the window holds the up-to-k most
recent interactions with concept c at steps <= t, oldest first.  Missing
slots are filled with all-zero embeddings on the oldest side, so the most
recent attempt always occupies the last slice.  Each real slot is scaled by
``exp(-gap / theta)`` where ``gap`` is the step distance to t+1 and theta a
learnable positive scalar.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


class ConceptHistoryIndex:
    """Per-concept index of (step, embedding) pairs in ascending step order."""

    def __init__(self):
        self._by_concept = defaultdict(list)
        self._count = 0
        self._dim = None

    def add(self, step: int, concept: int, embedding) -> None:
        entries = self._by_concept[concept]
        if entries and entries[-1][0] >= step:
            raise ValueError(f"steps must be added in increasing order, got {step}")
        entries.append((step, embedding))
        if self._dim is None:
            self._dim = np.asarray(embedding).shape
        self._count += 1

    def entries(self, concept: int) -> list:
        return self._by_concept.get(concept, [])

    def __len__(self) -> int:
        return self._count


@dataclass
class HistoryTensor:
    """k x H x W stack of decayed same-concept embeddings, oldest first."""

    values: torch.Tensor
    gaps: list
    pad_mask: list


def gather_same_concept(index: ConceptHistoryIndex, t: int, next_concept: int, k: int):
    """Return (slots, gaps, pad_mask) for the k most recent same-concept steps <= t.

    Zero slots are prepended when fewer than k matches exist; their gap is 0
    and their pad_mask entry is True.  Real gaps are (t+1) - step.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    matches = [(s, e) for s, e in index.entries(next_concept) if s <= t][-k:]
    n_pad = k - len(matches)
    zero = np.zeros(index._dim) if index._dim is not None else None
    slots = [zero] * n_pad + [e for _, e in matches]
    gaps = [0] * n_pad + [(t + 1) - s for s, _ in matches]
    pad_mask = [True] * n_pad + [False] * len(matches)
    return slots, gaps, pad_mask


def history_indices(concepts, k: int) -> tuple:
    """Vectorized per-sequence gather plan for batched forwards.

    For a sequence of length T returns int arrays of shape (T-1, k):
    ``idx[t, j]`` is the step index feeding slot j of the window that predicts
    step t+1, or -1 for a padding slot; ``gaps[t, j]`` is (t+1) - idx[t, j]
    (0 for padding).  Slots are ordered oldest first.
    """
    T = len(concepts)
    idx = np.full((max(T - 1, 0), k), -1, dtype=np.int64)
    gaps = np.zeros((max(T - 1, 0), k), dtype=np.float32)
    seen = defaultdict(list)
    for t in range(T - 1):
        seen[concepts[t]].append(t)
        recent = seen[concepts[t + 1]][-k:]
        if recent:
            idx[t, k - len(recent) :] = recent
            gaps[t, k - len(recent) :] = [(t + 1) - s for s in recent]
    return idx, gaps


class ExponentialDecay(nn.Module):
    """Forgetting-curve scaling ``exp(-gap / theta)`` with learnable theta > 0.

    theta is parameterized through softplus and initialized near ``init_theta``
    (typically the window size k) for a gentle decay over the window.
    """

    def __init__(self, init_theta: float):
        super().__init__()
        if init_theta <= 0:
            raise ValueError(f"init_theta must be > 0, got {init_theta}")
        raw = math.log(math.expm1(init_theta))
        self.theta_raw = nn.Parameter(torch.tensor(raw, dtype=torch.float32))

    @property
    def theta(self) -> torch.Tensor:
        return nn.functional.softplus(self.theta_raw)

    def scale(self, gaps: torch.Tensor) -> torch.Tensor:
        return torch.exp(-gaps / self.theta)

    def forward(self, slots: torch.Tensor, gaps: torch.Tensor, pad_mask: torch.Tensor):
        """Scale non-padding slots elementwise; padding slots pass through.

        ``slots``: (..., k, d); ``gaps``/``pad_mask``: (..., k).
        """
        factor = torch.where(
            pad_mask, torch.ones_like(gaps), torch.exp(-gaps / self.theta)
        )
        return slots * factor.unsqueeze(-1)


def apply_exponential_decay(slots, gaps, pad_mask, theta):
    """Functional form of the decay for plain arrays; returns scaled slots."""
    if float(theta) <= 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    out = []
    for slot, gap, pad in zip(slots, gaps, pad_mask):
        if pad or slot is None:
            out.append(slot)
        else:
            out.append(np.asarray(slot) * math.exp(-gap / float(theta)))
    return out


def reshape_stack(slots, H: int, W: int, gaps=None, pad_mask=None) -> HistoryTensor:
    """Reshape each length-(H*W) slot row-major into H x W and stack oldest first."""
    k = len(slots)
    gaps = list(gaps) if gaps is not None else [0] * k
    pad_mask = list(pad_mask) if pad_mask is not None else [s is None for s in slots]
    mats = []
    for slot in slots:
        arr = np.zeros(H * W) if slot is None else np.asarray(slot, dtype=np.float64)
        if arr.size != H * W:
            raise ValueError(f"embedding size {arr.size} != H*W = {H * W}")
        mats.append(arr.reshape(H, W))
    values = torch.from_numpy(np.stack(mats, axis=0))
    return HistoryTensor(values=values, gaps=gaps, pad_mask=pad_mask)
