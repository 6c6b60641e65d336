"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 adapter failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, feature_store, interp, matching, metrics, pipeline, t2v

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ADAPTER = 0, 1, 2, 3

log = logging.getLogger("knnvc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _task_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_task_flags(p):
    # one flag per TaskConfig field; None means "not given" so the config file wins
    types = {"k": int, "seed": int, "jobs": int, "max_reference_clips": int, "num_target_speakers": int,
             "utterances_per_speaker": int, "speakers_per_language": int, "min_duration_s": float,
             "max_duration_s": float, "top_m": int}
    for name in pipeline.TaskConfig.field_names():
        if name == "task":
            continue
        if name in ("relax_sampling", "vocode", "abort_on_adapter_failure"):
            p.add_argument(_task_flag(name), dest=name, default=None, action=argparse.BooleanOptionalAction)
        elif name == "metric":
            p.add_argument("--metric", choices=matching.METRICS, default=None)
        else:
            p.add_argument(_task_flag(name), dest=name, type=types.get(name, str), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="knnvc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="store_true", help="print package and file format versions")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("convert", help="convert one source sequence against one pool")
    p.add_argument("--src", required=True)
    p.add_argument("--pool", required=True, nargs="+", help="reference feature files, collated in order")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=matching.DEFAULT_K)
    p.add_argument("--metric", choices=matching.METRICS, default="cosine")
    p.add_argument("--jobs", type=int, default=matching.default_jobs())

    pool = sub.add_parser("pool", help="matching-set pools").add_subparsers(dest="pool_command", parser_class=_Parser)
    p = pool.add_parser("build", help="collate reference files into one pool file")
    p.add_argument("--refs", nargs="*", default=[])
    p.add_argument("--manifest")
    p.add_argument("--speaker")
    p.add_argument("--out", required=True)

    task = sub.add_parser("task", help="run a task protocol").add_subparsers(dest="task_command", parser_class=_Parser)
    p = task.add_parser("run")
    p.add_argument("task", choices=["stuttered", "cross-lingual", "instrument", "text-to-voice"])
    p.add_argument("--config", help="JSON file with TaskConfig fields")
    p.add_argument("--adapters", help="JSON file with adapter command templates")
    p.add_argument("--model", help="text-to-voice checkpoint")
    p.add_argument("--bag", help="enrollment bag embedding file")
    p.add_argument("--descriptions", help="description embedding file")
    _add_task_flags(p)

    tv = sub.add_parser("t2v", help="text-to-voice matching network").add_subparsers(dest="t2v_command",
                                                                                      parser_class=_Parser)
    p = tv.add_parser("train")
    p.add_argument("--data", required=True, help="JSON-lines: speaker_id, embedding_path")
    p.add_argument("--bag", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--weight-decay", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-out", help="write the per-step loss trace here")
    p = tv.add_parser("infer")
    p.add_argument("--model", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--text", required=True, help="embedding file of descriptions")
    p.add_argument("--top-m", type=int)
    p = tv.add_parser("bag", help="average utterance speaker embeddings per speaker")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True, help="manifest mapping utterance ids to speakers")
    p.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="metrics").add_subparsers(dest="eval_command", parser_class=_Parser)
    p = ev.add_parser("wer")
    p.add_argument("--pairs", required=True, help="reference<TAB>hypothesis per line")
    p.add_argument("--level", choices=["word", "char"], default="word")
    p.add_argument("--no-normalize", action="store_true")
    p = ev.add_parser("eer")
    p.add_argument("--trials", required=True, help="id_a id_b score label per line")
    p = ev.add_parser("fad")
    p.add_argument("--real", required=True)
    p.add_argument("--generated", required=True)

    fmt = sub.add_parser("fmt", help="file formats").add_subparsers(dest="fmt_command", parser_class=_Parser)
    p = fmt.add_parser("inspect")
    p.add_argument("files", nargs="+")
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    knn = matching.KnnConfig(args.k, args.metric)
    print(f"k={knn.k} metric={knn.metric}", file=sys.stderr)
    src = feature_store.read_feature_file(args.src)
    pool = matching.build_pool([feature_store.read_feature_file(p) for p in args.pool], "pool")
    out = matching.knn_regress(src, pool, knn, jobs=args.jobs)
    feature_store.write_feature_file(out, args.out)
    return EXIT_OK


def cmd_pool_build(args) -> int:
    refs = [feature_store.read_feature_file(p) for p in args.refs]
    if args.manifest:
        m = feature_store.load_manifest(args.manifest, strict=True)
        refs += [feature_store.load_entry_features(e) for e in m.select(speaker_id=args.speaker)]
    if not refs:
        raise UsageError("pool build: no reference files given")
    pool = matching.build_pool(refs, args.speaker or "")
    seq = feature_store.FeatureSequence(pool.matrix.astype(np.float32), pool.frame_period_ms, pool.speaker_id)
    feature_store.write_feature_file(seq, args.out)
    side = {"speaker_id": pool.speaker_id, "frames": pool.size, "dropped_frames": pool.dropped,
            "provenance": [list(p) for p in pool.provenance]}
    Path(str(args.out) + ".json").write_text(json.dumps(side) + "\n", encoding="utf-8")
    print(f"pool {pool.speaker_id!r}: {pool.size} frames, {pool.dropped} zero-norm frame(s) dropped")
    return EXIT_OK


def _task_config(args) -> pipeline.TaskConfig:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for name in pipeline.TaskConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    data["task"] = args.task
    if "source_manifest" not in data:
        raise UsageError("task run: --source-manifest is required (flag or config file)")
    return pipeline.TaskConfig.from_dict(data)


def load_descriptions(path) -> list[tuple[str, np.ndarray]]:
    return [(r.id, r.vector.astype(np.float64)) for r in feature_store.read_embedding_file(path, kind="sentence")]


def load_bag(path) -> t2v.EnrollmentBag:
    ids, mat = feature_store.stack_embeddings(feature_store.read_embedding_file(path, kind="speaker"))
    return t2v.EnrollmentBag(tuple(ids), mat)


def cmd_task_run(args) -> int:
    cfg = _task_config(args)
    print(f"task={cfg.task} k={cfg.k} metric={cfg.metric} seed={cfg.seed}", file=sys.stderr)
    adapters = pipeline.AdapterContract.from_file(args.adapters) if args.adapters else None
    extra = {}
    if cfg.task == "text_to_voice":
        if not (args.model and args.bag and args.descriptions):
            raise UsageError("task run text-to-voice needs --model, --bag and --descriptions")
        extra = {"model": t2v.load_model(args.model), "bag": load_bag(args.bag),
                 "descriptions": load_descriptions(args.descriptions)}
    result = pipeline.run_task(cfg, adapters, **extra)
    print(f"{len(result.records)} output(s) written to {result.output_dir}")
    return EXIT_OK


def load_t2v_dataset(path, bag: t2v.EnrollmentBag):
    """Dataset manifest lines: ``{"speaker_id": ..., "embedding_path": ...}``.

    Every record in an embedding file becomes one training description.
    """
    path = Path(path)
    xs, ys = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                spk, emb_path = rec["speaker_id"], Path(rec["embedding_path"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset line ({exc})") from None
            if spk not in bag.speaker_ids:
                raise ValueError(f"{path}:{lineno}: speaker {spk!r} not in enrollment bag")
            if not emb_path.is_absolute():
                emb_path = path.parent / emb_path
            for r in feature_store.read_embedding_file(emb_path, kind="sentence"):
                xs.append(r.vector.astype(np.float64))
                ys.append(bag.index(spk))
    if not xs:
        raise ValueError(f"{path}: empty dataset")
    return np.stack(xs), np.array(ys)


def cmd_t2v_train(args) -> int:
    bag = load_bag(args.bag)
    x, y = load_t2v_dataset(args.data, bag)
    cfg = t2v.TrainConfig(steps=args.steps, learning_rate=args.lr, weight_decay=args.weight_decay, seed=args.seed)
    model, losses = t2v.train((x, y), bag, cfg)
    t2v.save_model(model, args.out)
    if args.loss_out:
        Path(args.loss_out).write_text("".join(f"{i}\t{v!r}\n" for i, v in enumerate(losses)), encoding="utf-8")
    final = t2v.batch_loss(model, x, y, bag)
    print(f"steps={cfg.steps} first_loss={losses[0] if losses else final:.6f} final_loss={final:.6f} "
          f"train_accuracy={t2v.accuracy(model, x, y, bag):.4f}")
    return EXIT_OK


def cmd_t2v_infer(args) -> int:
    model, bag = t2v.load_model(args.model), load_bag(args.bag)
    for desc_id, emb in load_descriptions(args.text):
        dist = t2v.infer_distribution(model, emb, bag)
        if args.top_m:
            dist = interp.renormalize_topm(dist, args.top_m)
        print(json.dumps({"description": desc_id, "distribution": dist.as_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_t2v_bag(args) -> int:
    manifest = feature_store.load_manifest(args.manifest)
    speaker_of = {e.utterance_id: e.speaker_id for e in manifest}
    utts = {r.id: r.vector for r in feature_store.read_embedding_file(args.embeddings)}
    bag = t2v.build_bag(utts, speaker_of)
    feature_store.write_embedding_file(
        [feature_store.EmbeddingRecord(s, v) for s, v in zip(bag.speaker_ids, bag.embeddings)], args.out)
    print(f"{len(bag)} enrollment speaker(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.eval_command == "wer":
        pairs = metrics.read_transcript_pairs(args.pairs, args.level, not args.no_normalize)
        print(f"{metrics.wer(pairs, args.level):.4f}")
    elif args.eval_command == "eer":
        rate, thr = metrics.eer(metrics.read_trials(args.trials))
        print(f"{rate:.4f}\t{thr:.6f}")
    elif args.eval_command == "fad":
        _, a = feature_store.stack_embeddings(feature_store.read_embedding_file(args.real, kind="music"))
        _, b = feature_store.stack_embeddings(feature_store.read_embedding_file(args.generated, kind="music"))
        print(f"{metrics.fad(b, a):.6f}")
    else:
        raise UsageError("eval: choose one of wer, eer, fad")
    return EXIT_OK


def cmd_fmt_inspect(args) -> int:
    for f in args.files:
        head = Path(f).read_bytes()[:8]
        if head.startswith(feature_store.FEATURE_MAGIC):
            t, d, period = feature_store.read_feature_header(f)
            print(f"{f}\tFSEQ1\tT={t}\tD={d}\tperiod_ms={period:g}")
        elif head.startswith(feature_store.EMBEDDING_MAGIC):
            recs = feature_store.read_embedding_file(f)
            print(f"{f}\tEMB1\tcount={len(recs)}\tD={recs[0].vector.size if recs else 0}")
        elif head.startswith(t2v.CHECKPOINT_MAGIC):
            m = t2v.load_model(f)
            print(f"{f}\tT2V1\tin={m.in_dim}\thidden={','.join(map(str, m.hidden_dims))}\theads={m.num_heads}")
        else:
            raise ValueError(f"{f}: unrecognised magic {head[:5]!r}")
    return EXIT_OK


def _dispatch(args):
    if args.command == "convert":
        return cmd_convert(args)
    if args.command == "pool" and args.pool_command == "build":
        return cmd_pool_build(args)
    if args.command == "task" and args.task_command == "run":
        return cmd_task_run(args)
    if args.command == "t2v" and args.t2v_command:
        return {"train": cmd_t2v_train, "infer": cmd_t2v_infer, "bag": cmd_t2v_bag}[args.t2v_command](args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "fmt" and args.fmt_command == "inspect":
        return cmd_fmt_inspect(args)
    raise UsageError("missing or incomplete subcommand; see --help")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.version:
        print(f"knnvc {__version__} (formats: FSEQ1, EMB1, T2V1)")
        return EXIT_OK
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except pipeline.AdapterError as exc:
        print(f"adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except (ValueError, KeyError, OSError, ArithmeticError, pipeline.PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
