"""Evaluation metrics for transcripts, speaker verification trials and embedding distributions."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# --------------------------------------------------------------------------
# error rates


@dataclass(frozen=True)
class TranscriptPair:
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(self.reference))
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        if any(not t for t in self.reference + self.hypothesis):
            raise ValueError("tokens must be non-empty strings")


_PUNCT = re.compile(r"[^\w' ]", flags=re.UNICODE)


def normalize_text(text: str, lowercase: bool = True, strip_punctuation: bool = True) -> str:
    """Lowercase the text and replace punctuation other than apostrophes with single spaces."""
    text = unicodedata.normalize("NFKC", text)
    if lowercase:
        text = text.lower()
    if strip_punctuation:
        text = _PUNCT.sub(" ", text.replace("_", " "))
    return " ".join(text.split())


def tokenize(text: str, level: str = "word", normalize: bool = True) -> list[str]:
    if normalize:
        text = normalize_text(text)
    if level == "word":
        return text.split()
    if level == "char":
        # spaces are not scored at character level
        return [c for c in text if not c.isspace()]
    raise ValueError(f"level must be 'word' or 'char', got {level!r}")


def make_pair(reference: str, hypothesis: str, level: str = "word", normalize: bool = True) -> TranscriptPair:
    return TranscriptPair(tokenize(reference, level, normalize), tokenize(hypothesis, level, normalize))


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """Minimal (substitutions, insertions, deletions) turning ``ref`` into ``hyp``.

    The traceback prefers a substitution (or match), then a deletion, then an
    insertion whenever several moves reach the same cost.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), prev[j] + 1, row[j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(subs), ins, dels


def error_counts(pairs: Iterable[TranscriptPair]) -> tuple[int, int, int, int]:
    """Corpus totals ``(S, I, D, reference_tokens)``."""
    s = i = d = n = 0
    for p in pairs:
        ps, pi, pd = edit_distance(p.reference, p.hypothesis)
        s, i, d, n = s + ps, i + pi, d + pd, n + len(p.reference)
    return s, i, d, n


def wer(pairs: Iterable[TranscriptPair], level: str = "word") -> float:
    """Corpus-level error rate: all edits over all reference tokens.

    ``level`` only labels the result; tokenisation happens when the pairs are
    built (see :func:`make_pair`).
    """
    if level not in ("word", "char"):
        raise ValueError(f"level must be 'word' or 'char', got {level!r}")
    s, i, d, n = error_counts(pairs)
    if n == 0:
        raise ValueError("reference corpus has no tokens")
    return (s + i + d) / n


def read_transcript_pairs(path, level: str = "word", normalize: bool = True) -> list[TranscriptPair]:
    """Pairs file: one ``reference<TAB>hypothesis`` per line."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'reference<TAB>hypothesis'")
            ref, hyp = line.split("\t", 1)
            pairs.append(make_pair(ref, hyp, level, normalize))
    return pairs


# --------------------------------------------------------------------------
# equal error rate


@dataclass(frozen=True)
class TrialSet:
    """Verification trials: label 1 for real/real pairs, 0 for real/generated."""

    scores: np.ndarray
    labels: np.ndarray
    ids: tuple[tuple[str, str], ...] | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        lab = np.asarray(self.labels).reshape(-1).astype(np.int8)
        if s.shape != lab.shape:
            raise ValueError("scores and labels differ in length")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        if not np.isin(lab, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if not ((lab == 1).any() and (lab == 0).any()):
            raise ValueError("a trial set needs at least one trial of each label")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", lab)

    @classmethod
    def from_scores(cls, genuine, impostor) -> "TrialSet":
        genuine, impostor = np.asarray(genuine, float), np.asarray(impostor, float)
        return cls(np.concatenate([genuine, impostor]),
                   np.concatenate([np.ones(len(genuine)), np.zeros(len(impostor))]))

    def __len__(self):
        return len(self.scores)


def error_rates(trials: TrialSet):
    """FAR and FRR at every unique score used as threshold.

    A trial scoring exactly at the threshold counts as neither a false accept
    nor a false reject.
    """
    thr = np.unique(trials.scores)
    pos = np.sort(trials.scores[trials.labels == 1])
    neg = np.sort(trials.scores[trials.labels == 0])
    far = (len(neg) - np.searchsorted(neg, thr, side="right")) / len(neg)
    frr = np.searchsorted(pos, thr, side="left") / len(pos)
    return thr, far, frr


def eer(trials: TrialSet) -> tuple[float, float]:
    """Equal error rate and the threshold where FAR meets FRR.

    Between the two adjacent thresholds where ``FAR - FRR`` changes sign the
    rates are interpolated linearly.
    """
    thr, far, frr = error_rates(trials)
    diff = far - frr
    hit = np.flatnonzero(diff == 0)
    if hit.size:
        i = hit[0]
        return float(far[i]), float(thr[i])
    # diff >= 0 at the lowest score (FRR = 0) and <= 0 at the highest (FAR = 0)
    j = np.flatnonzero(diff < 0)[0]
    i = j - 1
    alpha = diff[i] / (diff[i] - diff[j])
    rate = far[i] + alpha * (far[j] - far[i])
    return float(rate), float(thr[i] + alpha * (thr[j] - thr[i]))


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pairing_plan(real_speakers: dict[str, str], generated_targets: dict[str, str], seed: int = 0):
    """Default trial plan.

    Each generated utterance is paired with one genuine utterance of its
    target speaker (label 0), and every genuine utterance with one other
    genuine utterance of the same speaker (label 1). Partners are drawn with
    a seeded generator. Returns a list of ``(id_a, id_b, label)``.
    """
    rng = np.random.default_rng(seed)
    by_speaker: dict[str, list[str]] = {}
    for utt, spk in real_speakers.items():
        by_speaker.setdefault(spk, []).append(utt)
    plan = []
    for utt, spk in real_speakers.items():
        others = [u for u in by_speaker[spk] if u != utt]
        if others:
            plan.append((utt, others[rng.integers(len(others))], 1))
    for gen, spk in generated_targets.items():
        real = by_speaker.get(spk)
        if not real:
            raise ValueError(f"no genuine utterances for target speaker {spk!r}")
        plan.append((real[rng.integers(len(real))], gen, 0))
    return plan


def score_trials(real_embeddings: dict, generated_embeddings: dict, plan) -> TrialSet:
    """Cosine similarity for every ``(id_a, id_b, label)`` in the plan.

    ``id_a`` is looked up among the real embeddings; ``id_b`` among the
    generated ones for label 0 and the real ones for label 1.
    """
    scores, labels, ids = [], [], []
    for a, b, label in plan:
        other = generated_embeddings[b] if label == 0 else real_embeddings[b]
        scores.append(cosine_similarity(real_embeddings[a], other))
        labels.append(label)
        ids.append((a, b))
    return TrialSet(np.array(scores), np.array(labels), tuple(ids))


def write_trials(trials: TrialSet, path) -> None:
    """One ``id_a id_b score label`` line per trial."""
    ids = trials.ids or tuple((f"a{i}", f"b{i}") for i in range(len(trials)))
    with open(path, "w", encoding="utf-8") as f:
        for (a, b), s, lab in zip(ids, trials.scores, trials.labels):
            f.write(f"{a}\t{b}\t{float(s)!r}\t{int(lab)}\n")


def read_trials(path) -> TrialSet:
    scores, labels, ids = [], [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 'id_a id_b score label'")
            ids.append((parts[0], parts[1]))
            scores.append(float(parts[2]))
            labels.append(int(parts[3]))
    return TrialSet(np.array(scores), np.array(labels), tuple(ids))


# --------------------------------------------------------------------------
# Fréchet audio distance

EIG_FLOOR = 1e-10


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {mu.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise ValueError("covariance is not symmetric")
        if self.count < 2:
            raise ValueError("statistics need at least two samples")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased (N-1) covariance, symmetrised."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an N x D array with N >= 2, got shape {x.shape}")
    mu = x.mean(axis=0)
    c = x - mu
    cov = c.T @ c / (x.shape[0] - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, x.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    w = np.where(w < EIG_FLOOR, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` via the symmetric product ``A^{1/2} B A^{1/2}``."""
    root_a = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    return float(np.sqrt(np.where(w < EIG_FLOOR, 0.0, w)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    try:
        tr_sqrt = trace_sqrt_product(a.cov, b.cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition failed: {exc}") from exc
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt
    return max(float(d), 0.0)


def fad(embeddings_a, embeddings_b) -> float:
    return frechet_distance(gaussian_stats(embeddings_a), gaussian_stats(embeddings_b))
