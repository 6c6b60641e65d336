"""Binary feature and embedding files plus JSON-lines manifests with annotation slicing.

Binary layouts (all little-endian):

* feature file: ``b"FSEQ1"`` + 3 pad bytes, ``u32 T``, ``u32 D``,
  ``f32 frame_period_ms``, 12 reserved zero bytes, then ``T*D`` f32 values in
  frame-major order.
* embedding file: ``b"EMB1"``, ``u32 count``, ``u32 D``, then per record a
  ``u16`` id length, the UTF-8 id and ``D`` f32 values.

Manifests are JSON lines, one utterance per line.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"FSEQ1"
EMBEDDING_MAGIC = b"EMB1"
_FEATURE_HEADER = struct.Struct("<5s3xIIf12x")
_EMB_HEADER = struct.Struct("<4sII")
HEADER_BYTES = _FEATURE_HEADER.size  # 32

DEFAULT_FRAME_PERIOD_MS = 20.0
EMBEDDING_KINDS = ("speaker", "sentence", "music")
ROLES = ("source", "reference")


class FeatureFormatError(ValueError):
    """Malformed or invalid feature/embedding data."""


class ManifestError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D frames sampled every ``frame_period_ms`` milliseconds.

    Frames are stored as float32; the period is rounded to float32 so that a
    sequence survives a trip through the file format unchanged.
    """

    frames: np.ndarray
    frame_period_ms: float = DEFAULT_FRAME_PERIOD_MS
    source_id: str = ""

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, order="C", copy=True)
        if frames.ndim != 2:
            raise FeatureFormatError(f"frames must be 2-D (T x D), got shape {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise FeatureFormatError(f"frames must be non-empty, got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise FeatureFormatError(f"non-finite values in sequence {self.source_id!r}")
        period = float(np.float32(self.frame_period_ms))
        if not (np.isfinite(period) and period > 0):
            raise FeatureFormatError(f"frame period must be positive, got {self.frame_period_ms}")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "frame_period_ms", period)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.num_frames * self.frame_period_ms

    def with_frames(self, frames, source_id=None) -> "FeatureSequence":
        return FeatureSequence(frames, self.frame_period_ms,
                               self.source_id if source_id is None else source_id)

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (self.frame_period_ms == other.frame_period_ms
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes())

    __hash__ = None


# --------------------------------------------------------------------------
# feature files


def encode_features(seq: FeatureSequence) -> bytes:
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, seq.num_frames, seq.dim, seq.frame_period_ms)
    return header + seq.frames.astype("<f4").tobytes()


def write_feature_file(seq: FeatureSequence, path) -> None:
    if not np.isfinite(seq.frames).all():
        raise FeatureFormatError("refusing to write non-finite values")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_features(seq))
    os.replace(tmp, path)


def read_feature_header(path) -> tuple[int, int, float]:
    """Return ``(T, D, frame_period_ms)`` without loading the payload."""
    with open(path, "rb") as f:
        head = f.read(HEADER_BYTES)
    return _parse_feature_header(head, path)


def _parse_feature_header(head: bytes, path) -> tuple[int, int, float]:
    if len(head) < HEADER_BYTES:
        raise FeatureFormatError(f"{path}: file too short for header ({len(head)} < {HEADER_BYTES} bytes)")
    magic, t, d, period = _FEATURE_HEADER.unpack_from(head)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if d == 0:
        raise FeatureFormatError(f"{path}: header declares dimension 0")
    if t == 0:
        raise FeatureFormatError(f"{path}: header declares 0 frames")
    if not (np.isfinite(period) and period > 0):
        raise FeatureFormatError(f"{path}: invalid frame period {period}")
    return t, d, float(period)


def decode_features(data: bytes, source_id: str = "", path="<bytes>") -> FeatureSequence:
    t, d, period = _parse_feature_header(data[:HEADER_BYTES], path)
    expected = HEADER_BYTES + 4 * t * d
    if len(data) != expected:
        raise FeatureFormatError(
            f"{path}: expected {expected} bytes for T={t}, D={d}, got {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).reshape(t, d)
    if not np.isfinite(frames).all():
        raise FeatureFormatError(f"{path}: payload contains non-finite values")
    return FeatureSequence(frames, period, source_id)


def read_feature_file(path, source_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    return decode_features(path.read_bytes(), source_id if source_id is not None else path.stem, path)


# --------------------------------------------------------------------------
# embeddings


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    kind: str = "speaker"

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise FeatureFormatError(f"unknown embedding kind {self.kind!r}")
        v = np.array(self.vector, dtype=np.float32, copy=True).reshape(-1)
        if v.size == 0 or not np.isfinite(v).all():
            raise FeatureFormatError(f"embedding {self.id!r} is empty or non-finite")
        object.__setattr__(self, "vector", _frozen(v))


def write_embedding_file(records: Sequence[EmbeddingRecord], path) -> None:
    if not records:
        raise FeatureFormatError("no embedding records to write")
    dim = records[0].vector.size
    parts = [_EMB_HEADER.pack(EMBEDDING_MAGIC, len(records), dim)]
    seen = set()
    for rec in records:
        if rec.vector.size != dim:
            raise FeatureFormatError(f"embedding {rec.id!r} has dim {rec.vector.size}, expected {dim}")
        if rec.id in seen:
            raise FeatureFormatError(f"duplicate embedding id {rec.id!r}")
        seen.add(rec.id)
        raw = rec.id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FeatureFormatError(f"embedding id too long ({len(raw)} bytes)")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(rec.vector.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embedding_file(path, kind: str = "speaker") -> list[EmbeddingRecord]:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise FeatureFormatError(f"{path}: file too short for header")
    magic, count, dim = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if dim == 0:
        raise FeatureFormatError(f"{path}: header declares dimension 0")
    pos = _EMB_HEADER.size
    out = []
    for i in range(count):
        if pos + 2 > len(data):
            raise FeatureFormatError(f"{path}: truncated at record {i}")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        end = pos + n + 4 * dim
        if end > len(data):
            raise FeatureFormatError(
                f"{path}: truncated at record {i}: expected {end} bytes, got {len(data)}")
        rid = data[pos:pos + n].decode("utf-8")
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + n)
        out.append(EmbeddingRecord(rid, vec, kind))
        pos = end
    if pos != len(data):
        raise FeatureFormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out


def stack_embeddings(records: Iterable[EmbeddingRecord]) -> tuple[list[str], np.ndarray]:
    records = list(records)
    ids = [r.id for r in records]
    return ids, np.stack([r.vector.astype(np.float64) for r in records])


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    role: str
    feature_path: Path
    transcript: str | None = None
    language: str | None = None
    annotations: tuple[tuple[float, float], ...] | None = None

    def to_json(self, base: Path | None = None) -> str:
        path = self.feature_path
        if base is not None:
            try:
                path = path.relative_to(base)
            except ValueError:
                pass
        rec = {"utterance_id": self.utterance_id, "speaker_id": self.speaker_id,
               "role": self.role, "feature_path": str(path)}
        if self.transcript is not None:
            rec["transcript"] = self.transcript
        if self.language is not None:
            rec["language"] = self.language
        if self.annotations is not None:
            rec["annotations"] = [list(iv) for iv in self.annotations]
        return json.dumps(rec, ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()
    path: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.utterance_id in seen:
                raise ManifestError(f"duplicate utterance_id {e.utterance_id!r}")
            seen.add(e.utterance_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, role=None, speaker_id=None, language=None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (role is None or e.role == role)
                and (speaker_id is None or e.speaker_id == speaker_id)
                and (language is None or e.language == language)]

    def speakers(self, role=None) -> list[str]:
        """Speaker ids in order of first appearance."""
        return list(dict.fromkeys(e.speaker_id for e in self.entries if role is None or e.role == role))

    def by_id(self, utterance_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.utterance_id == utterance_id:
                return e
        raise KeyError(utterance_id)


def _parse_annotations(raw, where: str):
    if raw is None:
        return None
    out = []
    for iv in raw:
        if not isinstance(iv, (list, tuple)) or len(iv) != 2:
            raise ManifestError(f"{where}: annotation {iv!r} is not a [start_ms, end_ms] pair")
        start, end = float(iv[0]), float(iv[1])
        if not (0 <= start < end):
            raise ManifestError(f"{where}: annotation [{iv[0]}, {iv[1]}] violates 0 <= start < end")
        out.append((start, end))
    return tuple(out)


def parse_manifest_line(line: str, base: Path, where: str) -> ManifestEntry:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{where}: {exc.msg}") from None
    if not isinstance(rec, dict):
        raise ManifestError(f"{where}: expected a JSON object")
    missing = [k for k in ("utterance_id", "speaker_id", "feature_path") if k not in rec]
    if missing:
        raise ManifestError(f"{where}: missing field(s) {', '.join(missing)}")
    role = rec.get("role", "source")
    if role not in ROLES:
        raise ManifestError(f"{where}: role must be one of {ROLES}, got {role!r}")
    path = Path(rec["feature_path"])
    if not path.is_absolute():
        path = base / path
    return ManifestEntry(
        utterance_id=str(rec["utterance_id"]),
        speaker_id=str(rec["speaker_id"]),
        role=role,
        feature_path=path,
        transcript=rec.get("transcript"),
        language=rec.get("language"),
        annotations=_parse_annotations(rec.get("annotations"), where),
    )


def load_manifest(path, strict: bool = False) -> Manifest:
    """Read a JSON-lines manifest.

    Blank lines and lines starting with ``#`` are skipped. Relative feature
    paths resolve against the manifest's directory. Missing feature files
    raise in ``strict`` mode and are logged as warnings otherwise.
    """
    path = Path(path)
    base = path.parent
    entries = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            where = f"{path}:{lineno}"
            entry = parse_manifest_line(line, base, where)
            if entry.utterance_id in seen:
                raise ManifestError(
                    f"{where}: duplicate utterance_id {entry.utterance_id!r} (first on line {seen[entry.utterance_id]})")
            seen[entry.utterance_id] = lineno
            if not entry.feature_path.exists():
                msg = f"{where}: feature file {entry.feature_path} does not exist"
                if strict:
                    raise ManifestError(msg)
                log.warning(msg)
            entries.append(entry)
    return Manifest(tuple(entries), path)


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [e.to_json(base) for e in entries]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_entry_features(entry: ManifestEntry) -> FeatureSequence:
    return read_feature_file(entry.feature_path, source_id=entry.utterance_id)


# --------------------------------------------------------------------------
# slicing


def segment_mask(num_frames: int, frame_period_ms: float, intervals) -> np.ndarray:
    """Boolean mask of frames whose start time lies in any ``[start, end)``."""
    starts = np.arange(num_frames, dtype=np.float64) * frame_period_ms
    total = num_frames * frame_period_ms
    mask = np.zeros(num_frames, dtype=bool)
    for iv in intervals:
        start, end = float(iv[0]), float(iv[1])
        if not (0 <= start < end):
            raise ValueError(f"interval [{start}, {end}] violates 0 <= start < end")
        if end > total:
            raise ValueError(f"interval [{start}, {end}] exceeds sequence duration {total} ms")
        mask |= (starts >= start) & (starts < end)
    return mask


def slice_segments(seq: FeatureSequence, intervals) -> FeatureSequence:
    """Keep the frames whose start time falls inside any interval, in time order.

    Frame ``k`` covers ``[k * period, (k + 1) * period)``; overlapping
    intervals never duplicate a frame.
    """
    mask = segment_mask(seq.num_frames, seq.frame_period_ms, intervals)
    if not mask.any():
        raise ValueError(f"slicing {seq.source_id!r} with {list(intervals)} leaves no frames")
    return seq.with_frames(seq.frames[mask])
