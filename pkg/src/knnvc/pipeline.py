"""Task protocols: stuttered, cross-lingual, instrument and text-to-voice conversion.

Every task reads manifests, builds one matching-set pool per target, converts
sources with kNN regression and writes one feature file per
``(source, target)`` pair plus a report. External models (encoder, vocoder,
ASR, embedders) are reached only through :class:`AdapterContract` command
templates.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from string import Formatter
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .feature_store import (FeatureSequence, Manifest, ManifestEntry, load_entry_features, load_manifest,
                            read_feature_header, slice_segments, write_feature_file)
from .interp import SpeakerDistribution, interpolate, renormalize_topm
from .matching import FeaturePool, KnnConfig, build_pool, default_jobs, knn_regress

log = logging.getLogger(__name__)

TASKS = ("stuttered", "cross_lingual", "instrument", "text_to_voice")
ADAPTER_STEPS = ("encoder", "vocoder", "asr", "embedder", "postprocess")


class PipelineError(RuntimeError):
    pass


class AdapterError(PipelineError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class TaskConfig:
    task: str
    source_manifest: str
    reference_manifest: str | None = None
    output_dir: str = "out"
    k: int = 4
    metric: str = "cosine"
    seed: int = 0
    jobs: int | None = None  # None: one worker per logical core
    # stuttered
    max_reference_clips: int = 30
    num_target_speakers: int | None = None
    # cross-lingual
    utterances_per_speaker: int = 16
    speakers_per_language: int = 3
    relax_sampling: bool = False
    # instrument, seconds, closed interval
    min_duration_s: float = 10.0
    max_duration_s: float = 90.0
    # text-to-voice
    top_m: int | None = None
    # adapters
    vocode: bool = False
    abort_on_adapter_failure: bool = True

    def __post_init__(self):
        self.task = self.task.replace("-", "_")
        if self.jobs is None:
            self.jobs = default_jobs()
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for name in ("k", "max_reference_clips", "utterances_per_speaker", "speakers_per_language", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("num_target_speakers", "top_m"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.min_duration_s <= self.max_duration_s) or self.max_duration_s <= 0:
            raise ValueError("duration filter must satisfy 0 <= min <= max, max > 0")

    @property
    def knn(self) -> KnnConfig:
        return KnnConfig(self.k, self.metric)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskConfig":
        known = set(cls.field_names())
        data = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown TaskConfig field(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class AdapterContract:
    """Shell command templates for the external models.

    Each template must contain ``{in}`` and ``{out}`` exactly once and no other
    placeholder. ``KNNVC_<STEP>_CMD`` environment variables override the
    configured templates.
    """

    encoder: str | None = None
    vocoder: str | None = None
    asr: str | None = None
    embedder: str | None = None
    postprocess: str | None = None

    def __post_init__(self):
        for step in ADAPTER_STEPS:
            env = os.environ.get(f"KNNVC_{step.upper()}_CMD")
            if env:
                setattr(self, step, env)
            template = getattr(self, step)
            if template is not None:
                validate_template(template, step)

    @classmethod
    def from_file(cls, path) -> "AdapterContract":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = sorted(set(data) - set(ADAPTER_STEPS))
        if unknown:
            raise ValueError(f"unknown adapter step(s): {', '.join(unknown)}")
        return cls(**data)

    def run(self, step: str, src, dst) -> Path:
        template = getattr(self, step)
        if template is None:
            raise AdapterError(f"no {step} adapter configured")
        cmd = [part.format(**{"in": str(src), "out": str(dst)}) for part in shlex.split(template)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise AdapterError(f"{step} adapter exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        if not Path(dst).exists():
            raise AdapterError(f"{step} adapter did not produce {dst}")
        return Path(dst)


def validate_template(template: str, step: str = "adapter") -> None:
    names = [name for _, name, _, _ in Formatter().parse(template) if name is not None]
    if sorted(names) != ["in", "out"]:
        raise ValueError(f"{step} template must contain {{in}} and {{out}} exactly once, found {names}")


# --------------------------------------------------------------------------
# planning helpers


@dataclass(frozen=True)
class Conversion:
    """One planned output: a source converted towards a target."""

    pair_id: str
    source_id: str
    target_id: str


def _rng(seed: int, *keys: str) -> np.random.Generator:
    # stable across processes, unlike hash()
    return np.random.default_rng([seed] + [zlib.crc32(k.encode("utf-8")) for k in keys])


def _split_manifests(cfg: TaskConfig) -> tuple[Manifest, Manifest]:
    src = load_manifest(cfg.source_manifest)
    ref_path = cfg.reference_manifest or cfg.source_manifest
    if Path(ref_path).resolve() == Path(cfg.source_manifest).resolve():
        sources = Manifest(tuple(src.select(role="source")), src.path)
        refs = Manifest(tuple(src.select(role="reference")), src.path)
        return sources, refs
    return src, load_manifest(ref_path)


def _pair_id(source_id: str, target_id: str) -> str:
    return f"{source_id}__to__{target_id}"


def sample_stutter_clips(entries: Sequence[ManifestEntry], max_clips: int, seed: int, speaker: str) -> list[ManifestEntry]:
    """Annotated clips of one speaker, at most ``max_clips`` drawn without replacement.

    The sample keeps manifest order so pools are collated reproducibly.
    """
    annotated = [e for e in entries if e.annotations]
    if not annotated:
        raise PipelineError(f"target speaker {speaker!r} has no annotated segments")
    if len(annotated) <= max_clips:
        return annotated
    pick = _rng(seed, "stutter", speaker).choice(len(annotated), size=max_clips, replace=False)
    return [annotated[i] for i in sorted(pick)]


def sample_cross_lingual(entries: Sequence[ManifestEntry], speakers_per_language: int, utterances_per_speaker: int,
                         seed: int, relax: bool = False) -> dict[str, dict[str, list[ManifestEntry]]]:
    """Seeded evaluation subset: ``language -> speaker -> utterances``."""
    by_lang: dict[str, dict[str, list[ManifestEntry]]] = {}
    for e in entries:
        if e.language is None:
            raise PipelineError(f"utterance {e.utterance_id!r} has no language tag")
        by_lang.setdefault(e.language, {}).setdefault(e.speaker_id, []).append(e)

    chosen = {}
    for lang in sorted(by_lang):
        speakers = by_lang[lang]
        eligible = sorted(s for s, utts in speakers.items() if len(utts) >= utterances_per_speaker)
        if len(eligible) < speakers_per_language:
            msg = (f"language {lang!r}: {len(eligible)} speaker(s) with >= {utterances_per_speaker} "
                   f"utterances, need {speakers_per_language}")
            if not relax:
                raise PipelineError(msg)
            log.warning("%s; relaxing", msg)
            eligible = sorted(speakers, key=lambda s: (-len(speakers[s]), s))[:speakers_per_language]
        rng = _rng(seed, "xl", lang)
        picked = sorted(eligible[i] for i in rng.choice(len(eligible), size=min(speakers_per_language, len(eligible)),
                                                         replace=False))
        chosen[lang] = {}
        for spk in picked:
            utts = speakers[spk]
            n = min(utterances_per_speaker, len(utts))
            idx = sorted(_rng(seed, "xl", lang, spk).choice(len(utts), size=n, replace=False))
            chosen[lang][spk] = [utts[i] for i in idx]
    return chosen


def plan_cross_lingual(sample: Mapping[str, Mapping[str, list[ManifestEntry]]]) -> list[Conversion]:
    """Every sampled utterance to every other sampled speaker."""
    speakers = [spk for lang in sample for spk in sample[lang]]
    plan = []
    for lang in sample:
        for spk, utts in sample[lang].items():
            for e in utts:
                plan.extend(Conversion(_pair_id(e.utterance_id, t), e.utterance_id, t)
                            for t in speakers if t != spk)
    return sorted(plan, key=lambda c: c.pair_id)


def duration_s(entry: ManifestEntry) -> float:
    t, _, period = read_feature_header(entry.feature_path)
    return t * period / 1000.0


def filter_by_duration(entries: Sequence[ManifestEntry], min_s: float, max_s: float) -> list[ManifestEntry]:
    """Entries whose duration lies in the closed interval ``[min_s, max_s]``."""
    return [e for e in entries if min_s <= duration_s(e) <= max_s]


def plan_instrument(entries: Sequence[ManifestEntry], instruments: Sequence[str] | None = None) -> list[Conversion]:
    if instruments is None:
        instruments = sorted({e.speaker_id for e in entries})
    plan = [Conversion(_pair_id(e.utterance_id, t), e.utterance_id, t)
            for e in entries for t in instruments if t != e.speaker_id]
    return sorted(plan, key=lambda c: c.pair_id)


# --------------------------------------------------------------------------
# execution


@dataclass
class TaskResult:
    task: str
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    output_dir: Path | None = None

    @property
    def report_path(self) -> Path:
        return self.output_dir / "report.jsonl"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_report(result: TaskResult) -> None:
    """Write ``report.jsonl`` (one record per output, sorted by pair id) plus the ``summary.*`` files."""
    out = result.output_dir
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(result.records, key=lambda r: r["pair_id"])
    (out / "report.jsonl").write_text("".join(_dump(r) + "\n" for r in records), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(result.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "summary.txt").write_text(format_summary(result), encoding="utf-8")


def format_summary(result: TaskResult) -> str:
    lines = [f"task: {result.task}", f"outputs: {len(result.records)}"]
    per_target = result.summary.get("targets", {})
    if per_target:
        keys = sorted({k for v in per_target.values() for k in v})
        width = max(len("target"), *(len(t) for t in per_target))
        lines.append("")
        lines.append("  ".join(["target".ljust(width)] + [k.rjust(10) for k in keys]))
        for t in sorted(per_target):
            lines.append("  ".join([t.ljust(width)] + [str(per_target[t].get(k, "")).rjust(10) for k in keys]))
    return "\n".join(lines) + "\n"


def load_report(output_dir) -> list[dict]:
    path = Path(output_dir) / "report.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


class _Runner:
    def __init__(self, cfg: TaskConfig, adapters: AdapterContract | None = None):
        self.cfg = cfg
        self.adapters = adapters or AdapterContract()
        self.out = Path(cfg.output_dir)
        self.feature_dir = self.out / "features"
        self.feature_dir.mkdir(parents=True, exist_ok=True)

    def convert_all(self, jobs: list[tuple[str, Callable[[], list[tuple[str, FeatureSequence, dict]]]]]) -> list[dict]:
        """Run ``(key, make_outputs)`` jobs on a bounded worker pool.

        ``make_outputs`` returns ``(pair_id, sequence, record)`` triples; each
        sequence is written to ``features/<pair_id>.fseq``.
        """

        def work(job):
            out = []
            for pair_id, seq, record in job[1]():
                path = self.feature_dir / f"{pair_id}.fseq"
                write_feature_file(seq, path)
                rec = dict(record, pair_id=pair_id, output_path=str(path.relative_to(self.out)),
                           frames=seq.num_frames, frame_period_ms=seq.frame_period_ms)
                if self.cfg.vocode:
                    rec.update(self._vocode(path))
                out.append(rec)
            return out

        jobs = sorted(jobs, key=lambda j: j[0])
        if self.cfg.jobs <= 1:
            parts = [work(j) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as ex:
                parts = list(ex.map(work, jobs))
        records = [r for part in parts for r in part]
        if len({r["pair_id"] for r in records}) != len(records):
            raise PipelineError("duplicate pair ids in plan")
        return records

    def _vocode(self, feature_path: Path) -> dict:
        wav = feature_path.with_suffix(".wav")
        try:
            self.adapters.run("vocoder", feature_path, wav)
            if self.adapters.postprocess:
                fixed = wav.with_name(wav.stem + ".post.wav")
                self.adapters.run("postprocess", wav, fixed)
                wav = fixed
        except AdapterError as exc:
            if self.cfg.abort_on_adapter_failure:
                raise
            log.error("%s", exc)
            return {"audio_path": None, "adapter_error": str(exc)}
        return {"audio_path": str(wav.relative_to(self.out))}

    def finish(self, records: list[dict], summary: dict) -> TaskResult:
        for r in records:
            src_frames = r.get("source_frames")
            if src_frames is not None and r["frames"] != src_frames:
                raise PipelineError(f"{r['pair_id']}: output has {r['frames']} frames, source {src_frames}")
        summary = dict(summary, task=self.cfg.task, outputs=len(records), k=self.cfg.k, metric=self.cfg.metric,
                       seed=self.cfg.seed)
        result = TaskResult(self.cfg.task, sorted(records, key=lambda r: r["pair_id"]), summary, self.out)
        write_report(result)
        return result


def _single(pair_id: str, entry: ManifestEntry, pool: FeaturePool, knn: KnnConfig, record: dict):
    def make():
        return [(pair_id, knn_regress(load_entry_features(entry), pool, knn), record)]
    return pair_id, make


def _pool_summary(pool: FeaturePool, **extra) -> dict:
    return dict(pool_frames=pool.size, dropped_frames=pool.dropped, **extra)


def run_stuttered(cfg: TaskConfig, adapters: AdapterContract | None = None) -> TaskResult:
    """Fluent sources converted to stuttering speakers, pooled from annotated segments only."""
    runner = _Runner(cfg, adapters)
    sources, refs = _split_manifests(cfg)
    targets = refs.speakers()
    if cfg.num_target_speakers is not None and cfg.num_target_speakers < len(targets):
        pick = _rng(cfg.seed, "stutter-targets").choice(len(targets), cfg.num_target_speakers, replace=False)
        targets = [targets[i] for i in sorted(pick)]

    pools, summary_targets = {}, {}
    for spk in targets:
        available = refs.select(speaker_id=spk)
        clips = sample_stutter_clips(available, cfg.max_reference_clips, cfg.seed, spk)
        segs = [slice_segments(load_entry_features(e), e.annotations) for e in clips]
        pools[spk] = build_pool(segs, spk)
        summary_targets[spk] = _pool_summary(pools[spk], clips_used=len(clips),
                                             clips_available=sum(1 for e in available if e.annotations))

    jobs = []
    for e in sources:
        t = read_feature_header(e.feature_path)[0]
        for spk in targets:
            jobs.append(_single(_pair_id(e.utterance_id, spk), e, pools[spk], cfg.knn,
                                {"source_id": e.utterance_id, "target_id": spk, "source_frames": t}))
    records = runner.convert_all(jobs)
    return runner.finish(records, {"targets": summary_targets, "sources": len(sources)})


def run_cross_lingual(cfg: TaskConfig, adapters: AdapterContract | None = None) -> TaskResult:
    """Seeded per-language sample, every utterance converted to every other sampled speaker.

    A target's pool is its reference entries when the manifests provide any,
    otherwise its sampled evaluation utterances.
    """
    runner = _Runner(cfg, adapters)
    sources, refs = _split_manifests(cfg)
    sample = sample_cross_lingual(sources.entries, cfg.speakers_per_language, cfg.utterances_per_speaker,
                                  cfg.seed, cfg.relax_sampling)
    plan = plan_cross_lingual(sample)
    entries = {e.utterance_id: e for lang in sample for utts in sample[lang].values() for e in utts}
    language = {spk: lang for lang in sample for spk in sample[lang]}

    pools = {}
    for lang in sample:
        for spk, utts in sample[lang].items():
            ref_entries = refs.select(speaker_id=spk) or utts
            pools[spk] = build_pool([load_entry_features(e) for e in ref_entries], spk)

    jobs = []
    for c in plan:
        e = entries[c.source_id]
        jobs.append(_single(c.pair_id, e, pools[c.target_id], cfg.knn,
                            {"source_id": c.source_id, "target_id": c.target_id,
                             "source_language": e.language, "target_language": language[c.target_id],
                             "source_frames": read_feature_header(e.feature_path)[0]}))
    records = runner.convert_all(jobs)

    lang_pairs: dict[str, int] = {}
    for r in records:
        key = f"{r['source_language']}->{r['target_language']}"
        lang_pairs[key] = lang_pairs.get(key, 0) + 1
    summary = {
        "sampled_utterances": len(entries),
        "sampled_speakers": {lang: sorted(sample[lang]) for lang in sample},
        "language_pairs": lang_pairs,
        "targets": {spk: _pool_summary(p) for spk, p in pools.items()},
    }
    return runner.finish(records, summary)


def run_instrument(cfg: TaskConfig, adapters: AdapterContract | None = None) -> TaskResult:
    """Each recording converted to every other instrument.

    Manifest ``speaker_id`` names the instrument and roles are ignored. A
    target's pool is all of its duration-filtered recordings, taken from the
    reference manifest when one is given, else from the source manifest.
    """
    runner = _Runner(cfg, adapters)
    recordings = filter_by_duration(load_manifest(cfg.source_manifest).entries, cfg.min_duration_s, cfg.max_duration_s)
    pool_entries = recordings
    if cfg.reference_manifest and Path(cfg.reference_manifest).resolve() != Path(cfg.source_manifest).resolve():
        pool_entries = filter_by_duration(load_manifest(cfg.reference_manifest).entries,
                                          cfg.min_duration_s, cfg.max_duration_s)
    instruments = sorted({e.speaker_id for e in load_manifest(cfg.source_manifest).entries}
                         | {e.speaker_id for e in pool_entries})

    pools, summary_targets = {}, {}
    for inst in instruments:
        recs = [e for e in pool_entries if e.speaker_id == inst]
        if not recs:
            raise PipelineError(f"instrument {inst!r} has no recordings within "
                                f"[{cfg.min_duration_s}, {cfg.max_duration_s}] s")
        pools[inst] = build_pool([load_entry_features(e) for e in recs], inst)
        summary_targets[inst] = _pool_summary(pools[inst], recordings=len(recs), outputs=0)

    by_id = {e.utterance_id: e for e in recordings}
    jobs = [_single(c.pair_id, by_id[c.source_id], pools[c.target_id], cfg.knn,
                    {"source_id": c.source_id, "target_id": c.target_id,
                     "source_instrument": by_id[c.source_id].speaker_id,
                     "source_frames": read_feature_header(by_id[c.source_id].feature_path)[0]})
            for c in plan_instrument(recordings, instruments)]
    records = runner.convert_all(jobs)
    for r in records:
        summary_targets[r["target_id"]]["outputs"] += 1
    return runner.finish(records, {"targets": summary_targets, "recordings_kept": len(recordings)})


def run_text_to_voice(cfg: TaskConfig, model, bag, descriptions: Sequence[tuple[str, np.ndarray]],
                      adapters: AdapterContract | None = None) -> TaskResult:
    """Convert every source to every speaker a description puts weight on, then blend.

    ``descriptions`` pairs a description id with its sentence embedding.
    Conversions of one source to one enrollment speaker are computed once and
    shared across descriptions.
    """
    from .t2v import infer_distribution

    runner = _Runner(cfg, adapters)
    sources, refs = _split_manifests(cfg)
    pools = {}
    for spk in bag.speaker_ids:
        entries = refs.select(speaker_id=spk)
        if not entries:
            raise PipelineError(f"no reference pool for enrollment speaker {spk!r}")
        pools[spk] = build_pool([load_entry_features(e) for e in entries], spk)

    dists: dict[str, SpeakerDistribution] = {}
    for desc_id, emb in descriptions:
        dist = infer_distribution(model, emb, bag)
        if cfg.top_m is not None:
            dist = renormalize_topm(dist, cfg.top_m)
        dists[desc_id] = dist
    # every speaker that any description weights is converted once per source
    needed = [s for s in bag.speaker_ids if any(d.as_dict().get(s, 0.0) > 0 for d in dists.values())]

    def per_source(entry: ManifestEntry):
        def make():
            src = load_entry_features(entry)
            converted = {spk: knn_regress(src, pools[spk], cfg.knn) for spk in needed}
            outputs = []
            for desc_id in sorted(dists):
                dist = dists[desc_id]
                retained = SpeakerDistribution(tuple((s, w) for s, w in dist.entries if w > 0))
                outputs.append((f"{entry.utterance_id}__desc__{desc_id}", interpolate(converted, retained),
                                {"source_id": entry.utterance_id, "target_id": desc_id,
                                 "source_frames": src.num_frames, "conversions": len(converted),
                                 "speakers_interpolated": len(retained.entries),
                                 "top_speaker": dist.argmax(), "weights": dist.as_dict()}))
            return outputs
        return entry.utterance_id, make

    records = runner.convert_all([per_source(e) for e in sources])
    summary = {"descriptions": sorted(dists), "enrollment_speakers": len(bag), "sources": len(sources),
               "conversions_per_source": len(needed), "conversions_total": len(needed) * len(sources),
               "targets": {d: {"retained_speakers": len(dists[d].support())} for d in sorted(dists)}}
    return runner.finish(records, summary)


def run_task(cfg: TaskConfig, adapters: AdapterContract | None = None, **kwargs) -> TaskResult:
    if cfg.task == "stuttered":
        return run_stuttered(cfg, adapters)
    if cfg.task == "cross_lingual":
        return run_cross_lingual(cfg, adapters)
    if cfg.task == "instrument":
        return run_instrument(cfg, adapters)
    return run_text_to_voice(cfg, kwargs["model"], kwargs["bag"], kwargs["descriptions"], adapters)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class MetricPlan:
    """Inputs for :func:`evaluate`; any metric whose inputs are absent is skipped and listed.

    * ``wer``: ``hypotheses`` (output pair id -> ASR transcript) and
      ``references`` (source id -> transcript).
    * ``eer``: ``real_embeddings`` / ``real_speakers`` (genuine utterance id ->
      vector / speaker) and ``generated_embeddings`` (pair id -> vector).
    * ``fad``: ``fad_real`` (target -> N x D embeddings) and
      ``fad_generated`` (pair id -> vector), grouped by each output's target.
    """

    metrics: tuple[str, ...] = ("wer", "cer", "eer", "fad")
    hypotheses: dict[str, str] | None = None
    references: dict[str, str] | None = None
    real_embeddings: dict[str, np.ndarray] | None = None
    real_speakers: dict[str, str] | None = None
    generated_embeddings: dict[str, np.ndarray] | None = None
    fad_real: dict[str, np.ndarray] | None = None
    fad_generated: dict[str, np.ndarray] | None = None
    seed: int = 0
    normalize_text: bool = True


def evaluate(records: Sequence[dict], plan: MetricPlan) -> dict:
    """Metric table for a task's outputs.

    Returns ``{"rows": [...], "missing": [...], "partial": bool}``. WER, CER
    and EER give one row for the task; FAD gives one row per target.
    """
    rows, missing = [], []
    row: dict = {"target": "all"}
    for level, name in (("word", "wer"), ("char", "cer")):
        if name not in plan.metrics:
            continue
        if plan.hypotheses is None or plan.references is None:
            missing.append(f"{name}: transcripts")
            continue
        pairs, absent = [], []
        for r in records:
            hyp = plan.hypotheses.get(r["pair_id"])
            ref = plan.references.get(r["source_id"])
            if hyp is None or ref is None:
                absent.append(r["pair_id"])
                continue
            pairs.append(metrics.make_pair(ref, hyp, level, plan.normalize_text))
        if absent:
            missing.append(f"{name}: {len(absent)} output(s) without transcripts")
        if pairs:
            row[name] = metrics.wer(pairs, level)
    if "eer" in plan.metrics:
        if plan.real_embeddings is None or plan.real_speakers is None or plan.generated_embeddings is None:
            missing.append("eer: embeddings")
        else:
            gen_targets = {r["pair_id"]: r["target_id"] for r in records if r["pair_id"] in plan.generated_embeddings}
            if len(gen_targets) < len(records):
                missing.append(f"eer: {len(records) - len(gen_targets)} output(s) without embeddings")
            trials = metrics.score_trials(plan.real_embeddings, plan.generated_embeddings,
                                          metrics.pairing_plan(plan.real_speakers, gen_targets, plan.seed))
            rate, thr = metrics.eer(trials)
            row["eer"], row["eer_threshold"], row["trials"] = rate, thr, len(trials)
    if len(row) > 1:
        rows.append(row)
    if "fad" in plan.metrics:
        if plan.fad_real is None or plan.fad_generated is None:
            missing.append("fad: embeddings")
        else:
            by_target: dict[str, list] = {}
            for r in records:
                vec = plan.fad_generated.get(r["pair_id"])
                if vec is None:
                    missing.append(f"fad: no embedding for {r['pair_id']}")
                    continue
                by_target.setdefault(r["target_id"], []).append(vec)
            for target in sorted(by_target):
                if target not in plan.fad_real:
                    missing.append(f"fad: no reference embeddings for {target}")
                    continue
                rows.append({"target": target, "fad": metrics.fad(np.stack(by_target[target]), plan.fad_real[target]),
                             "generated": len(by_target[target]), "real": len(plan.fad_real[target])})
    return {"rows": rows, "missing": missing, "partial": bool(missing)}


def format_metric_table(report: dict) -> str:
    cols = ["target"] + sorted({k for r in report["rows"] for k in r} - {"target"})
    lines = ["\t".join(cols)]
    for r in report["rows"]:
        cells = []
        for c in cols:
            v = r.get(c, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    if report["missing"]:
        lines.append("")
        lines.extend(f"missing: {m}" for m in report["missing"])
    return "\n".join(lines) + "\n"


def write_metric_report(report: dict, output_dir) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (out / "metrics.txt").write_text(format_metric_table(report), encoding="utf-8")
