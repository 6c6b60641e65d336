import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from knnvc.feature_store import (EmbeddingRecord, FeatureFormatError, FeatureSequence, ManifestError,
                                 load_manifest, read_embedding_file, read_feature_file, read_feature_header,
                                 slice_segments, write_embedding_file, write_feature_file, write_manifest)

from conftest import random_seq, write_manifest_lines


def test_smallest_file_layout(tmp_path):
    path = tmp_path / "one.fseq"
    write_feature_file(FeatureSequence([[0.0]]), path)
    data = path.read_bytes()
    # 32-byte header + one f32
    assert len(data) == 36
    assert data[:8] == b"FSEQ1\0\0\0"
    assert data[8:12] == (1).to_bytes(4, "little")
    assert data[12:16] == (1).to_bytes(4, "little")
    assert np.frombuffer(data[16:20], "<f4")[0] == 20.0
    assert data[20:32] == bytes(12)
    assert data[32:] == bytes(4)


def test_round_trip_large(tmp_path, rng):
    seq = random_seq(rng, 100, 1024, "x")
    write_feature_file(seq, tmp_path / "a.fseq")
    back = read_feature_file(tmp_path / "a.fseq")
    assert back == seq
    assert back.frames.tobytes() == seq.frames.tobytes()
    assert read_feature_header(tmp_path / "a.fseq") == (100, 1024, 20.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(-1e6, 1e6, width=32)),
       st.floats(0.5, 100.0))
def test_round_trip_property(tmp_path_factory, frames, period):
    seq = FeatureSequence(frames, period)
    path = tmp_path_factory.mktemp("rt") / "s.fseq"
    write_feature_file(seq, path)
    back = read_feature_file(path)
    assert back.frames.tobytes() == seq.frames.tobytes()
    assert back.frame_period_ms == seq.frame_period_ms


def test_nan_rejected(tmp_path):
    with pytest.raises(FeatureFormatError):
        FeatureSequence([[0.0, np.nan]])


def test_truncated_payload_reports_sizes(tmp_path, rng):
    path = tmp_path / "t.fseq"
    write_feature_file(random_seq(rng, 4, 3), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FeatureFormatError, match=r"expected 80 bytes.*got 75"):
        read_feature_file(path)


def test_zero_dim_header(tmp_path):
    import struct
    path = tmp_path / "z.fseq"
    path.write_bytes(struct.pack("<5s3xIIf12x", b"FSEQ1", 3, 0, 20.0))
    with pytest.raises(FeatureFormatError, match="dimension 0"):
        read_feature_file(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "b.fseq"
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(FeatureFormatError, match="magic"):
        read_feature_file(path)


def test_nonfinite_payload_rejected_on_read(tmp_path):
    path = tmp_path / "n.fseq"
    write_feature_file(FeatureSequence([[1.0, 2.0]]), path)
    data = bytearray(path.read_bytes())
    data[32:36] = np.array([np.inf], "<f4").tobytes()
    path.write_bytes(bytes(data))
    with pytest.raises(FeatureFormatError, match="non-finite"):
        read_feature_file(path)


# -- slicing ---------------------------------------------------------------


def _frames_by_start_time(t, period, intervals):
    # enumerate start times 0, period, ... and test membership
    return [k for k in range(t) if any(a <= k * period < b for a, b in intervals)]


def _indexed(t):
    return FeatureSequence(np.arange(t, dtype=np.float32).reshape(t, 1) + 1)


def test_slice_full_cover():
    seq = _indexed(10)
    assert slice_segments(seq, [[0, 200]]) == seq


def test_slice_interior():
    out = slice_segments(_indexed(10), [[40, 80]])
    assert out.frames[:, 0].tolist() == [3.0, 4.0]  # frames 2 and 3
    assert _frames_by_start_time(10, 20, [(40, 80)]) == [2, 3]


def test_slice_two_ends():
    out = slice_segments(_indexed(10), [[0, 20], [180, 200]])
    assert out.frames[:, 0].tolist() == [1.0, 10.0]


def test_slice_errors():
    seq = _indexed(10)
    with pytest.raises(ValueError, match="exceeds"):
        slice_segments(seq, [[0, 201]])
    with pytest.raises(ValueError, match="no frames"):
        slice_segments(seq, [[5, 10]])
    with pytest.raises(ValueError):
        slice_segments(seq, [[50, 40]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.lists(st.tuples(st.integers(0, 800), st.integers(1, 200)), min_size=1, max_size=5))
def test_slice_matches_enumeration(t, raw):
    period = 20.0
    total = t * period
    intervals = [(a, min(a + w, total)) for a, w in raw if a < total]
    expected = _frames_by_start_time(t, period, intervals)
    seq = _indexed(t)
    if not intervals:
        return
    if not expected:
        with pytest.raises(ValueError):
            slice_segments(seq, intervals)
        return
    out = slice_segments(seq, intervals)
    assert (out.frames[:, 0] - 1).astype(int).tolist() == expected


def test_slice_disjoint_counts_add_up():
    seq = _indexed(50)
    ivs = [[0, 100], [200, 260], [500, 1000]]
    total = sum(len(slice_segments(seq, [iv]).frames) for iv in ivs)
    assert slice_segments(seq, ivs).num_frames == total


def test_slice_idempotent_under_full_cover():
    seq = slice_segments(_indexed(30), [[100, 300]])
    assert slice_segments(seq, [[0, seq.duration_ms]]) == seq


# -- embeddings ------------------------------------------------------------


def test_embedding_round_trip(tmp_path, rng):
    recs = [EmbeddingRecord(f"spk-{i}-ü", rng.standard_normal(256)) for i in range(5)]
    write_embedding_file(recs, tmp_path / "e.emb")
    back = read_embedding_file(tmp_path / "e.emb")
    assert [r.id for r in back] == [r.id for r in recs]
    for a, b in zip(recs, back):
        assert a.vector.tobytes() == b.vector.tobytes()


def test_embedding_layout(tmp_path):
    write_embedding_file([EmbeddingRecord("ab", [1.0, 2.0])], tmp_path / "e.emb")
    data = (tmp_path / "e.emb").read_bytes()
    assert data[:4] == b"EMB1"
    assert len(data) == 4 + 4 + 4 + 2 + 2 + 8


def test_embedding_errors(tmp_path):
    with pytest.raises(FeatureFormatError):
        write_embedding_file([EmbeddingRecord("a", [1.0]), EmbeddingRecord("b", [1.0, 2.0])], tmp_path / "x")
    write_embedding_file([EmbeddingRecord("a", [1.0, 2.0])], tmp_path / "y")
    (tmp_path / "y").write_bytes((tmp_path / "y").read_bytes()[:-1])
    with pytest.raises(FeatureFormatError, match="truncated"):
        read_embedding_file(tmp_path / "y")


# -- manifests -------------------------------------------------------------


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert len(load_manifest(tmp_path / "m.jsonl")) == 0


def test_duplicate_ids(tmp_path):
    rec = {"utterance_id": "u", "speaker_id": "s", "feature_path": "a.fseq"}
    write_manifest_lines(tmp_path / "m.jsonl", [rec, rec])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "m.jsonl")


def test_bad_annotation(tmp_path):
    rec = {"utterance_id": "u", "speaker_id": "s", "feature_path": "a.fseq", "annotations": [[100, 50]]}
    write_manifest_lines(tmp_path / "m.jsonl", [rec])
    with pytest.raises(ManifestError, match="start < end"):
        load_manifest(tmp_path / "m.jsonl")


def test_parse_error_names_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"utterance_id": "a", "speaker_id": "s", "feature_path": "x"}\n{oops\n')
    with pytest.raises(ManifestError, match=r"m\.jsonl:2"):
        load_manifest(tmp_path / "m.jsonl")


def test_dangling_paths(tmp_path, caplog):
    write_manifest_lines(tmp_path / "m.jsonl", [{"utterance_id": "u", "speaker_id": "s", "feature_path": "nope.fseq"}])
    m = load_manifest(tmp_path / "m.jsonl")
    assert len(m) == 1 and "does not exist" in caplog.text
    with pytest.raises(ManifestError, match="does not exist"):
        load_manifest(tmp_path / "m.jsonl", strict=True)


def test_manifest_round_trip(tmp_path, rng):
    write_feature_file(random_seq(rng, 3, 2), tmp_path / "a.fseq")
    rec = {"utterance_id": "u", "speaker_id": "s", "role": "reference", "feature_path": "a.fseq",
           "transcript": "hello", "language": "en", "annotations": [[0, 20]]}
    write_manifest_lines(tmp_path / "m.jsonl", [rec])
    m = load_manifest(tmp_path / "m.jsonl", strict=True)
    write_manifest(m.entries, tmp_path / "m2.jsonl")
    assert load_manifest(tmp_path / "m2.jsonl", strict=True).entries == m.entries
    assert m.entries[0].feature_path == tmp_path / "a.fseq"
    assert m.select(role="reference")[0].annotations == ((0.0, 20.0),)
