"""Operator command line: ingest, synth, split, train, evaluate, embed,
enroll, verify, serve.

Data directories hold ``features.csv`` (processed sequences), ``split.json``
(subject splits) and, for synthetic sets, ``raw_log.tsv`` + profile manifest.
Exit codes: 0 success, 1 usage error, 2 data/contract error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from . import service as S
from .errors import KeyformerError
from .model import ModelConfig, distance, embed_sessions, forward_embed, init_weights
from .store import TemplateStore
from .tensor import RngState
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _model_config(doc: dict) -> ModelConfig:
    cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **doc.get("model", {})})
    cfg.validate()
    return cfg


def _read_data_dir(data_dir, require_split=True):
    data_dir = Path(data_dir)
    feats = D.read_features(data_dir / "features.csv")
    by_subject = D.group_by_subject(feats)
    split = None
    split_path = data_dir / "split.json"
    if split_path.exists():
        split = D.split_from_manifest(D.read_manifest(split_path))
    elif require_split:
        raise KeyformerError(f"{split_path} not found; run the split command first")
    return by_subject, split


def _subset(by_subject, subjects):
    missing = [s for s in subjects if s not in by_subject]
    if missing:
        raise KeyformerError(f"subjects missing from features: {missing[:5]}")
    return {s: by_subject[s] for s in subjects}


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    schema = _load_config(args.schema) if args.schema else None
    sessions = D.parse_raw_log(args.raw, schema=schema)
    seqs = [D.extract_features(s, length=args.length) for s in sessions]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_features(seqs, out / "features.csv")
    print(f"ingested {len(sessions)} sessions -> {out / 'features.csv'}")
    return 0


def cmd_synth(args) -> int:
    rng = RngState(args.seed)
    sessions, profiles = D.generate_synthetic(args.subjects, args.sessions,
                                              args.events, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_raw_log(sessions, out / "raw_log.tsv")
    D.write_manifest(out / "manifest.json", profiles=profiles,
                     extra={"seed": args.seed, "subjects": args.subjects,
                            "sessions_per_subject": args.sessions,
                            "events_per_session": args.events})
    seqs = [D.extract_features(s, length=args.length) for s in sessions]
    D.write_features(seqs, out / "features.csv")
    print(f"generated {len(sessions)} sessions for {args.subjects} subjects -> {out}")
    return 0


def cmd_split(args) -> int:
    by_subject, _ = _read_data_dir(args.data, require_split=False)
    explicit = {}
    for name, path in (("train", args.train_file), ("validation", args.val_file),
                       ("test", args.test_file)):
        if path:
            explicit[name] = Path(path).read_text(encoding="utf-8").split()
    split = D.split_subjects(sorted(by_subject), (args.train, args.val, args.test),
                             RngState(args.seed), explicit=explicit or None)
    D.write_manifest(Path(args.data) / "split.json", split=split,
                     extra={"seed": args.seed})
    print(f"split {len(split.train_subjects)}/{len(split.validation_subjects)}/"
          f"{len(split.test_subjects)} -> {Path(args.data) / 'split.json'}")
    return 0


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    model_cfg = _model_config(doc)
    by_subject, split = _read_data_dir(args.data)
    train_set = _subset(by_subject, split.train_subjects)
    val_set = _subset(by_subject, split.validation_subjects)
    tdoc = doc.get("train", {})
    tc = TrainConfig(
        epochs=args.epochs if args.epochs is not None else tdoc.get("epochs", 1000),
        batches_per_epoch=args.batches or tdoc.get("batches_per_epoch", 29),
        batch_size=args.batch_size or tdoc.get("batch_size", 1024),
        learning_rate=args.lr or tdoc.get("learning_rate", 0.001),
        margin=tdoc.get("margin", 1.0),
        seed=args.seed)
    if args.resume:
        cp = load_checkpoint(args.resume)
        weights = cp.weights
        model_cfg = cp.config
        rcfg = cp.train_config or tc
        if args.epochs is not None:
            rcfg.epochs = args.epochs
        result = train(weights, train_set, val_set, rcfg,
                       resume_from=cp, checkpoint_path=args.out, log_path=args.log)
    else:
        weights = init_weights(model_cfg, RngState(args.seed))
        result = train(weights, train_set, val_set, tc,
                       checkpoint_path=args.out, log_path=args.log)
    if not Path(args.out).exists():
        save_checkpoint(result.best, args.out)
    best = result.best
    print(f"trained {len(result.log)} epochs; best val EER "
          f"{best.best_val_eer if best.best_val_eer is not None else float('nan'):.4f} "
          f"at epoch {best.epoch} -> {args.out}")
    return 0


def _load_eval_embeddings(args):
    cp = load_checkpoint(args.model)
    by_subject, split = _read_data_dir(args.data, require_split=False)
    if split is not None and split.test_subjects:
        by_subject = _subset(by_subject, split.test_subjects)
    embs = {}
    for subject in sorted(by_subject):
        mat = embed_sessions(cp.weights, by_subject[subject])
        embs[subject] = [mat[i] for i in range(mat.shape[0])]
    return cp, by_subject, embs


def cmd_evaluate(args) -> int:
    cp, _subjects, embs = _load_eval_embeddings(args)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    global_thr = None
    for enrol in args.E:
        scoresets = E.build_scores(embs, enrol)
        if args.policy in ("average", "both"):
            r = E.average_eer(scoresets)
            print(f"E={enrol} Average EER: {100 * r.eer:.2f}%  (mean threshold {r.threshold:.4f})")
        if args.policy in ("global", "both"):
            r = E.global_eer(scoresets)
            print(f"E={enrol} Global  EER: {100 * r.eer:.2f}%  (threshold {r.threshold:.4f})")
            global_thr = r.threshold
        if out:
            E.write_scores(scoresets, out / f"scores_E{enrol}.csv")
            genuine = np.concatenate([s.genuine for s in scoresets])
            impostor = np.concatenate([s.impostor for s in scoresets])
            E.write_det(E.det_curve(genuine, impostor), out / f"det_E{enrol}.csv")
    if args.calibrate:
        if global_thr is None:
            raise KeyformerError("--calibrate requires the global policy")
        cp.global_threshold = float(global_thr)
        save_checkpoint(cp, args.model)
        print(f"calibrated global threshold {global_thr:.4f} -> {args.model}")
    return 0


def cmd_embed(args) -> int:
    cp = load_checkpoint(args.model)
    by_subject, _ = _read_data_dir(args.data, require_split=False)
    rows = []
    for subject in sorted(by_subject):
        seqs = by_subject[subject]
        mat = embed_sessions(cp.weights, seqs)
        for fs, emb in zip(seqs, mat):
            rows.append((fs.subject_id, fs.session_id, emb))
    E.export_embeddings(rows, args.out)
    print(f"exported {len(rows)} embeddings -> {args.out}")
    return 0


def _session_embedding(cp, raw_path):
    sessions = D.parse_raw_log(raw_path)
    if not sessions:
        raise KeyformerError(f"no sessions found in {raw_path}")
    fs = D.extract_features(sessions[0], length=cp.config.L)
    return forward_embed(cp.weights, fs)


def cmd_enroll(args) -> int:
    cp = load_checkpoint(args.model)
    store = TemplateStore(args.store)
    emb = _session_embedding(cp, args.session)
    rec = store.enroll(args.user, emb)
    print(f"enrolled {args.user}: {rec.sessions_enrolled} session(s)")
    return 0


def cmd_verify(args) -> int:
    cp = load_checkpoint(args.model)
    store = TemplateStore(args.store)
    rec = store.get(args.user)
    if rec is None:
        raise KeyformerError(f"unknown user {args.user!r}")
    emb = _session_embedding(cp, args.session)
    dist = float(np.mean([distance(emb, e) for e in rec.embeddings]))
    threshold = rec.threshold
    if threshold is None:
        threshold = (args.threshold if args.threshold is not None
                     else cp.global_threshold if cp.global_threshold is not None
                     else S.DEFAULT_THRESHOLD)
    decision = {"user_id": args.user, "distance": dist, "threshold": threshold,
                "accepted": bool(dist <= threshold),
                "model_checksum": cp.weights.checksum()}
    print(json.dumps(decision))
    return 0


def cmd_serve(args) -> int:
    cfg = S.ServiceConfig.load(args.config, model_path=args.model,
                               store_path=args.store, bind=args.bind,
                               threshold=args.threshold,
                               cors_origins=args.cors or None)
    S.serve(cfg)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="keyformer",
                     description="free-text keystroke-dynamics verification engine")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file", default=None)
    common.add_argument("--seed", type=int, default=0, help="RNG seed")

    p = sub.add_parser("ingest", parents=[common], help="raw log -> feature file")
    p.add_argument("--raw", required=True)
    p.add_argument("--schema", help="JSON column-name mapping")
    p.add_argument("--length", type=int, default=D.DEFAULT_SEQUENCE_LENGTH)
    p.add_argument("--out", required=True, help="output data directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--sessions", type=int, required=True)
    p.add_argument("--events", type=int, required=True)
    p.add_argument("--length", type=int, default=D.DEFAULT_SEQUENCE_LENGTH)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="assign subjects to splits")
    p.add_argument("--data", required=True)
    p.add_argument("--train", type=int, default=0)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--train-file")
    p.add_argument("--val-file")
    p.add_argument("--test-file")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="triplet-train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log", help="per-epoch JSON log file")
    p.add_argument("--resume", help="resume from checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="EER/DET on test subjects")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--E", type=int, nargs="+", default=[5])
    p.add_argument("--policy", choices=["average", "global", "both"], default="both")
    p.add_argument("--out", help="directory for score/DET files")
    p.add_argument("--calibrate", action="store_true",
                   help="write the global threshold back into the checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", parents=[common], help="export embeddings as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("enroll", parents=[common], help="enrol a session into the store")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--session", required=True, help="raw log with one session")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", parents=[common], help="verify a session from the store")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--model")
    p.add_argument("--store")
    p.add_argument("--bind")
    p.add_argument("--threshold", type=float)
    p.add_argument("--cors", nargs="*", help="allowed CORS origins")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except KeyformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
