"""Weighted blending of converted feature sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .feature_store import FeatureSequence

WEIGHT_TOL = 1e-6


@dataclass(frozen=True)
class SpeakerDistribution:
    """Non-negative weights over named speakers that sum to one."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(s), float(w)) for s, w in self.entries)
        if not entries:
            raise ValueError("distribution has no entries")
        ids = [s for s, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("speaker ids in a distribution must be unique")
        w = np.array([w for _, w in entries])
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum():.9g}, expected 1")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_weights(cls, speaker_ids: Sequence[str], weights) -> "SpeakerDistribution":
        return cls(tuple(zip(speaker_ids, np.asarray(weights, dtype=np.float64).tolist())))

    @classmethod
    def one_hot(cls, speaker_ids: Sequence[str], chosen: str) -> "SpeakerDistribution":
        return cls(tuple((s, 1.0 if s == chosen else 0.0) for s in speaker_ids))

    @property
    def speaker_ids(self) -> list[str]:
        return [s for s, _ in self.entries]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.entries])

    def argmax(self) -> str:
        return self.entries[int(np.argmax(self.weights))][0]

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def support(self) -> list[str]:
        return [s for s, w in self.entries if w > 0]


def renormalize_topm(dist: SpeakerDistribution, m: int) -> SpeakerDistribution:
    """Keep the ``m`` heaviest speakers and rescale their weights to sum to one.

    Ties are broken by speaker id. Retained entries keep their original order.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if m >= len(dist.entries):
        return dist
    ranked = sorted(range(len(dist.entries)), key=lambda i: (-dist.entries[i][1], dist.entries[i][0]))
    keep = sorted(ranked[:m])
    total = sum(dist.entries[i][1] for i in keep)
    if total <= 0:
        raise ValueError("retained weights sum to zero")
    return SpeakerDistribution(tuple((dist.entries[i][0], dist.entries[i][1] / total) for i in keep))


def interpolate(seqs: Sequence[FeatureSequence] | Mapping[str, FeatureSequence],
                dist: SpeakerDistribution) -> FeatureSequence:
    """Frame-wise weighted sum of sequences, one per distribution entry.

    ``seqs`` is either aligned with ``dist.entries`` by position or keyed by
    speaker id. Zero-weight sequences are skipped entirely, so a one-hot
    distribution reproduces its sequence exactly.
    """
    if isinstance(seqs, Mapping):
        missing = [s for s in dist.speaker_ids if s not in seqs]
        if missing:
            raise ValueError(f"no converted sequence for speaker(s) {missing}")
        ordered = [seqs[s] for s in dist.speaker_ids]
    else:
        ordered = list(seqs)
        if len(ordered) != len(dist.entries):
            raise ValueError(f"{len(ordered)} sequences for {len(dist.entries)} distribution entries")
    if not ordered:
        raise ValueError("nothing to interpolate")
    ref = ordered[0]
    for s in ordered[1:]:
        if s.frames.shape != ref.frames.shape or s.frame_period_ms != ref.frame_period_ms:
            raise ValueError(
                f"sequence {s.source_id!r} has shape {s.frames.shape} @ {s.frame_period_ms} ms, "
                f"expected {ref.frames.shape} @ {ref.frame_period_ms} ms")

    w = dist.weights
    w = w / w.sum()
    acc = None
    for seq, wi in zip(ordered, w):
        if wi == 0:
            continue
        term = seq.frames.astype(np.float64)
        if wi != 1.0:
            term = term * wi
        acc = term if acc is None else acc + term
    return ref.with_frames(acc.astype(np.float32), source_id=ref.source_id)
