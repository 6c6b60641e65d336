import json
from pathlib import Path

import numpy as np
import pytest

from knnvc.feature_store import FeatureSequence, write_feature_file


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_seq(rng, t, d, source_id="", period=20.0):
    return FeatureSequence(rng.standard_normal((t, d)), period, source_id)


def write_manifest_lines(path: Path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def add_utterance(root: Path, records: list, seq: FeatureSequence, **fields):
    """Write ``seq`` under ``root/feats`` and append its manifest record."""
    feats = root / "feats"
    feats.mkdir(exist_ok=True)
    name = f"{fields['utterance_id']}.fseq"
    write_feature_file(seq, feats / name)
    records.append(dict(fields, feature_path=f"feats/{name}"))


_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome, then assert it."""

    def check(number: int, title: str, ok: bool, detail: str):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
