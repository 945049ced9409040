"""``uttlid`` command line: synth, features, train, eval, fuse, gradcheck.

Configuration resolves in three layers: built-in defaults, then a flat
``key=value`` file given with ``--config``, then explicit flags.  Every
command prints the resolved configuration (ending with the seed and the
config hash) before doing any work.

Exit status: 0 success, 1 usage, 2 data error, 3 numeric failure.  Failures
print one line ``error kind=<kind> reason="<text>"`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, model_config_record, save_checkpoint
from .config import config_hash, format_kv, load_kv
from .data import generate_synthetic, load_features, load_manifest
from .errors import DataError, NumericFailure, UttLidError
from .features import ARCHIVE_MAGIC, FeatureConfig, read_archive, write_archive
from .heads import utterance_posteriors
from .model import MIN_FRAMES, preset
from .scoring import (TrialScoreSet, fuse_scores, log_odds_from_log_posteriors, read_scores,
                      report, write_scores)
from .trainer import TrainConfig, crop_or_extend, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("uttlid")

MODEL_KEYS = {"model.channels": "channels", "model.blocks": "blocks",
              "model.blstm_hidden": "blstm_hidden", "model.blstm_layers": "blstm_layers"}
SYNTH_DEFAULTS = {"synth.classes": 4, "synth.per_class": 100, "synth.min_duration": 2.0,
                  "synth.max_duration": 10.0, "synth.language_seed": 0, "synth.prefix": "utt"}
GENERAL_KEYS = {"preset", "head", "seed"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _fail("usage", message, EXIT_USAGE)


def _fail(kind: str, reason: str, code: int):
    reason = " ".join(str(reason).split()).replace('"', "'")
    print(f'error kind={kind} reason="{reason}"', file=sys.stderr)
    raise SystemExit(code)


# ---------------------------------------------------------------- configuration


def _csv_ints(text) -> tuple:
    return tuple(int(v) for v in str(text).split(","))


def resolve(args, command_keys: dict) -> dict:
    """Merge defaults, the config file, and flags into one flat record."""
    values = {"preset": "paper", "head": "sap", "seed": 0, **command_keys}
    if args.config:
        from_file = load_kv(args.config)
        known = GENERAL_KEYS | TRAIN_KEYS | set(MODEL_KEYS) | set(SYNTH_DEFAULTS)
        unknown = sorted(set(from_file) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown key(s) {', '.join(unknown)}")
        values.update({k: v for k, v in from_file.items() if k in command_keys or k in GENERAL_KEYS})
    for key in ("preset", "head", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    for key, flag in getattr(args, "_overrides", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    try:
        values["seed"] = int(values["seed"])
    except ValueError:
        raise UsageError(f"seed must be an integer, got {values['seed']!r}") from None
    if values["preset"] not in ("paper", "tiny"):
        raise UsageError(f"preset must be paper or tiny, got {values['preset']!r}")
    if values["head"] not in ("sap", "tap"):
        raise UsageError(f"head must be sap or tap, got {values['head']!r}")
    return values


def announce(values: dict) -> str:
    digest = config_hash(values)
    print("# resolved config")
    for key in sorted(values):
        if key != "seed":
            print(format_kv({key: values[key]}), end="")
    print(f"seed={values['seed']}")
    print(f"config_hash={digest}", flush=True)
    return digest


def _train_config(values: dict) -> TrainConfig:
    kv = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    kv = {k: (",".join(map(str, v)) if isinstance(v, (list, tuple)) else v) for k, v in kv.items()}
    kv["seed"] = values["seed"]
    return TrainConfig.from_kv({k: str(v) if v is not None else "none" for k, v in kv.items()})


def _model_config(values: dict, num_classes: int):
    overrides = {}
    for key, name in MODEL_KEYS.items():
        if key in values and values[key] is not None:
            raw = values[key]
            overrides[name] = _csv_ints(raw) if name in ("channels", "blocks") else int(raw)
    return preset(values["preset"], head=values["head"], num_classes=num_classes, **overrides)


def _feature_hash(cfg: FeatureConfig) -> str:
    return config_hash(asdict(cfg))


# ---------------------------------------------------------------- data loading


def _is_archive(path: Path) -> bool:
    with open(path, "rb") as f:
        return f.read(len(ARCHIVE_MAGIC)) == ARCHIVE_MAGIC


def load_sequences(path) -> tuple[list, list, Optional[list]]:
    """Sequences, label names, and duration tags (None for archives) from a manifest or archive."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if _is_archive(path):
        archive = read_archive(path)
        return list(archive.sequences), list(archive.labels), None
    manifest = load_manifest(path)
    skipped = []
    pairs = load_features(manifest, skipped=skipped)
    for uid, reason in skipped:
        print(f"skipped\t{uid}\t{reason}")
    return [s for _, s in pairs], list(manifest.labels), [r.duration_tag for r, _ in pairs]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    values = resolve(args, dict(SYNTH_DEFAULTS))
    announce(values)
    out = Path(args.out)
    manifest = generate_synthetic(
        out, int(values["synth.classes"]), int(values["synth.per_class"]),
        (float(values["synth.min_duration"]), float(values["synth.max_duration"])),
        seed=values["seed"], language_seed=int(values["synth.language_seed"]),
        prefix=str(values["synth.prefix"]))
    print(f"utterances={len(manifest)}")
    print(f"manifest={out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_features(args) -> int:
    fcfg = FeatureConfig()
    values = resolve(args, {f"feature.{k}": v for k, v in asdict(fcfg).items()})
    announce(values)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skipped = []
    pairs = load_features(manifest, fcfg, skipped)
    archive = out / "features.ulfb"
    write_archive(archive, [s for _, s in pairs], manifest.labels, _feature_hash(fcfg))
    with open(out / "skipped.tsv", "w", encoding="utf-8") as f:
        for uid, reason in skipped:
            f.write(f"{uid}\t{reason}\n")
    print(f"utterances={len(pairs)}")
    print(f"skipped={len(skipped)}")
    print(f"archive={archive}")
    return EXIT_OK


def cmd_train(args) -> int:
    defaults = {k: v for k, v in TrainConfig().to_kv().items() if k != "seed"}
    defaults.update({k: None for k in MODEL_KEYS})
    values = resolve(args, defaults)
    try:
        tcfg = _train_config(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sequences, labels, _ = load_sequences(args.data)
    if not sequences:
        raise DataError(f"{args.data}: no usable training utterances")
    mcfg = _model_config(values, len(labels))
    values.update({k: v for k, v in model_config_record(mcfg).items()})
    values["labels"] = ",".join(labels)
    digest = announce(values)

    from .model import init_parameters
    params = init_parameters(mcfg, seed=values["seed"])
    out = Path(args.out)
    extra = {"labels": ",".join(labels), "seed": values["seed"], "config_hash": digest}
    result = train(sequences, params, tcfg, out_dir=out, extra_record=extra,
                   on_epoch=lambda st: print("epoch\t" + st.log_line(), flush=True))
    save_checkpoint(out / "final.ulck", result.params, result.state.momentum,
                    {**extra, "epoch": len(result.history), "optim.lr_index": result.state.lr_index})
    (out / "run.cfg").write_text(format_kv(values), encoding="utf-8")
    last = result.history[-1]
    print(f"epochs={len(result.history)}")
    print(f"final_loss={last.loss:.17g}")
    print(f"final_accuracy={last.accuracy:.6f}")
    print(f"checkpoint={out / 'final.ulck'}")
    return EXIT_OK


def score_sequences(params, sequences, labels_in_data, languages) -> np.ndarray:
    """Full-length, one-utterance-at-a-time log-odds; ``(N, N_L)``."""
    rows = []
    for seq in sequences:
        feats = np.asarray(seq.features, dtype=np.float64)
        if feats.shape[1] < MIN_FRAMES:
            log.warning("%s has %d frames; repeating to %d", seq.utterance_id, feats.shape[1], MIN_FRAMES)
            feats = crop_or_extend(feats, MIN_FRAMES)
        log_post = utterance_posteriors(feats, params).data[0]
        rows.append(log_odds_from_log_posteriors(log_post))
    return np.array(rows).reshape(len(sequences), len(languages))


def cmd_eval(args) -> int:
    values = resolve(args, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    params, _, record = load_checkpoint(args.checkpoint)
    if args.head is not None and args.head != params.config.head:
        raise UsageError(f"checkpoint was trained with head {params.config.head}, not {args.head}")
    values["head"] = params.config.head
    values["checkpoint_hash"] = record.get("config_hash", "")
    announce(values)
    languages = record.get("labels", "").split(",") if record.get("labels") else \
        [f"class{i}" for i in range(params.config.num_classes)]
    sequences, data_labels, durations = load_sequences(args.data)
    if not sequences:
        raise DataError(f"{args.data}: nothing to score")
    missing = sorted(set(data_labels[s.label] for s in sequences) - set(languages))
    if missing:
        raise DataError(f"labels {', '.join(missing)} are not known to the checkpoint")
    labels = [languages.index(data_labels[s.label]) for s in sequences]
    scores = score_sequences(params, sequences, data_labels, languages)
    trials = TrialScoreSet([s.utterance_id for s in sequences], labels, scores, languages, durations,
                           record.get("config_hash"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.tsv", trials)
    return _emit_report(trials, args.system or Path(args.checkpoint).stem, args.threshold, out)


def _emit_report(trials: TrialScoreSet, system: str, threshold: float, out: Path) -> int:
    rep = report(trials, system=system, threshold=threshold)
    text = rep.table() + "\n\n" + rep.key_values() + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_fuse(args) -> int:
    values = resolve(args, {"inputs": ",".join(map(str, args.scores)), "weights": args.weights or ""})
    sets = [read_scores(p) for p in args.scores]
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    values["input_hashes"] = ",".join(s.config_hash or "-" for s in sets)
    digest = announce(values)
    try:
        fused = fuse_scores(sets, weights)
    except ValueError as exc:
        if isinstance(exc, UttLidError):
            raise
        raise UsageError(str(exc)) from None
    fused.config_hash = digest
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "fused.tsv", fused)
    return _emit_report(fused, args.system, args.threshold, out)


def cmd_gradcheck(args) -> int:
    values = resolve(args, {"step": gradcheck.STEP,
                            "model_steps": ",".join(f"{h:g}" for h in gradcheck.MODEL_STEPS),
                            "tolerance": gradcheck.TOLERANCE})
    announce(values)
    results = gradcheck.op_checks(values["seed"])
    if not args.ops_only:
        results += gradcheck.model_checks(values["seed"])
    for r in results:
        print(f"check\t{r.name}\t{r.error:.3e}\t{'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"gradient check failed for {', '.join(failed)}")
    print(f"passed={len(results)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--preset", choices=("paper", "tiny"), help="model size preset")
    common.add_argument("--head", choices=("sap", "tap"), help="pooling head")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="uttlid", description="Utterance-level language identification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic multi-class corpus")
    p.add_argument("--classes", type=int, dest="classes")
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--min-duration", type=float, dest="min_duration")
    p.add_argument("--max-duration", type=float, dest="max_duration")
    p.add_argument("--language-seed", type=int, dest="language_seed",
                   help="fixes the class recipes; keep it equal across train and test sets")
    p.add_argument("--prefix")
    p.set_defaults(func=cmd_synth, _overrides={f"synth.{k}": k for k in
                   ("classes", "per_class", "min_duration", "max_duration", "language_seed", "prefix")})

    p = sub.add_parser("features", parents=[common], help="extract a feature archive from a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_features, _overrides={})

    p = sub.add_parser("train", parents=[common], help="train on a manifest or feature archive")
    p.add_argument("data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--length-min", type=int, dest="length_min")
    p.add_argument("--length-max", type=int, dest="length_max")
    p.add_argument("--target-accuracy", type=float, dest="target_accuracy",
                   help="stop once an epoch's training accuracy reaches this value")
    p.add_argument("--lr-ladder", dest="lr_ladder", help="comma-separated learning rates")
    p.add_argument("--channels", help="comma-separated channels of the four residual stages")
    p.add_argument("--blocks", help="comma-separated block counts of the four stages")
    p.add_argument("--hidden", type=int, help="BLSTM units per direction")
    train_flags = {k: k for k in ("epochs", "batch_size", "length_min", "length_max", "target_accuracy",
                                  "lr_ladder")}
    train_flags.update({"model.channels": "channels", "model.blocks": "blocks", "model.blstm_hidden": "hidden"})
    p.set_defaults(func=cmd_train, _overrides=train_flags)

    p = sub.add_parser("eval", parents=[common], help="score a manifest or archive with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--threshold", type=float, default=0.0, help="log-odds decision threshold for Cavg")
    p.add_argument("--system", help="system name in the report (default: checkpoint stem)")
    p.set_defaults(func=cmd_eval, _overrides={})

    p = sub.add_parser("fuse", parents=[common], help="score-level fusion of aligned score files")
    p.add_argument("scores", nargs="+")
    p.add_argument("--weights", help="comma-separated weights summing to 1 (default: equal)")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--system", default="fusion")
    p.set_defaults(func=cmd_fuse, _overrides={})

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the tiny model")
    p.add_argument("--ops-only", action="store_true", help="skip the composed-model checks")
    p.set_defaults(func=cmd_gradcheck, _overrides={})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        _fail("usage", exc, EXIT_USAGE)
    except NumericFailure as exc:
        _fail(exc.kind, exc, EXIT_NUMERIC)
    except UttLidError as exc:
        _fail(exc.kind, exc, EXIT_DATA)
    except OSError as exc:
        _fail("io", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
