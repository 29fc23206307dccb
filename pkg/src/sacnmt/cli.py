"""Command-line entry point: ``sacnmt {gen-synth,train,translate,evaluate}``.

Exit codes: 0 success, 2 usage error, 3 invalid input or configuration,
4 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import MODES, ConfigError, TrainConfig, load_config_file
from .corpus import SynthTaskSpec, load_parallel, read_sentences, split_corpus, synth_corpus, write_parallel
from .metrics import (EVAL_HEADER, FREQ_HEADER_PREFIX, ali, bootstrap_significance, corpus_bleu, corpus_ter,
                      frequency_report, load_mlt, lta, rare_records, write_csv, write_mlt)
from .model import Seq2Seq
from .trainer import Trainer, TrainingDiverged, translate_ids
from .vocab import UNK, Vocabulary, build_vocab

log = logging.getLogger("sacnmt")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3, 4
MANIFEST = "manifest.json"
STATE_FILE = "state.pkl"
LOCK_FILE = "train.lock"


class InvalidInput(Exception):
    """Bad arguments, files or configuration; reported with exit code 3."""


def git_hash(path: str | Path) -> str:
    """Content hash in git's blob format."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- gen-synth ------------------------------------------------------------------------

def cmd_gen_synth(args: argparse.Namespace) -> int:
    values = {}
    if args.config:
        values.update(load_config_file(args.config)["synth"])
    for f in fields(SynthTaskSpec):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = tuple(flag) if f.name == "sense_skew" else flag
    if "sense_skew" in values:
        values["sense_skew"] = tuple(float(x) for x in values["sense_skew"])
    try:
        spec = SynthTaskSpec(**values)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"invalid synthetic task: {exc}") from exc
    sizes = {"train": spec.n_pairs, "valid": args.valid_size, "test": args.test_size}
    sizes = {k: n for k, n in sizes.items() if n > 0}
    full = SynthTaskSpec(**{**asdict(spec), "n_pairs": sum(sizes.values())})
    corpus, records = synth_corpus(full, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, (part, recs) in split_corpus(corpus, records, sizes).items():
        write_parallel(part, out / f"{name}.src", out / f"{name}.tgt")
        files += [f"{name}.src", f"{name}.tgt"]
        if spec.kind == "ambiguous-lexicon":
            write_mlt(out / f"{name}.mlt.tsv", recs)
            files.append(f"{name}.mlt.tsv")
    # no timestamps here: the whole output directory is reproducible from the seed
    _write_json(out / MANIFEST, {
        "command": "gen-synth",
        "seed": args.seed,
        "spec": {**asdict(spec), "sense_skew": list(spec.sense_skew)},
        "splits": sizes,
        "files": {f: git_hash(out / f) for f in files},
    })
    print(f"wrote {', '.join(files)} to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------------------

def _parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise InvalidInput(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def resolve_train_config(args: argparse.Namespace) -> tuple[TrainConfig, dict[str, Path]]:
    """Defaults, then the config file, then command-line flags. Every problem is reported at once."""
    sections = load_config_file(args.config)
    values = dict(sections["train"])
    values.update(_parse_overrides(args.set or []))
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = TrainConfig.from_dict(values)
    problems = cfg.problems()
    base = Path(args.config).resolve().parent
    data = {k: (base / v if not Path(v).is_absolute() else Path(v)) for k, v in sections["data"].items()}
    for key in ("train_src", "train_tgt", "valid_src", "valid_tgt"):
        if key not in data:
            problems.append(f"data.{key} is required")
        elif not data[key].is_file():
            problems.append(f"data.{key}: no such file {data[key]}")
    if "mlt_valid" in data and not data["mlt_valid"].is_file():
        problems.append(f"data.mlt_valid: no such file {data['mlt_valid']}")
    if args.pretrained and not Path(args.pretrained).is_file():
        problems.append(f"--pretrained: no such file {args.pretrained}")
    if problems:
        raise ConfigError(problems)
    return cfg, data


def _acquire_lock(out: Path) -> Path:
    lock = out / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InvalidInput(f"{out} is locked by another training run ({lock}); remove it if that run is dead")
    with os.fdopen(fd, "w") as fh:
        fh.write(f"{os.getpid()}\n")
    return lock


def save_policy(path: Path, trainer: Trainer) -> None:
    trainer.policy.save(path, {"role": "policy", "src_vocab": trainer.src_vocab.words,
                               "tgt_vocab": trainer.tgt_vocab.words})


def load_policy(path: str | Path) -> tuple[Seq2Seq, Vocabulary, Vocabulary]:
    try:
        model, meta = Seq2Seq.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidInput(f"cannot read checkpoint {path}: {exc}") from exc
    if "src_vocab" not in meta or "tgt_vocab" not in meta:
        raise InvalidInput(f"{path} is not a policy checkpoint (no vocabularies)")
    return model, Vocabulary(meta["src_vocab"]), Vocabulary(meta["tgt_vocab"])


def cmd_train(args: argparse.Namespace) -> int:
    cfg, data = resolve_train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / STATE_FILE
    if args.resume and not state_path.is_file():
        raise InvalidInput(f"--resume: no saved state in {out}")
    lock = _acquire_lock(out)
    try:
        started = _now()
        if args.resume:
            trainer = Trainer.load_state(state_path)
            if trainer.mode != args.mode or trainer.cfg != cfg:
                raise InvalidInput("--resume: saved run used a different mode or configuration")
            log.info("resuming %s run at stage %s", trainer.mode, trainer.stage)
        else:
            train = load_parallel(data["train_src"], data["train_tgt"], "train")
            valid = load_parallel(data["valid_src"], data["valid_tgt"], "valid")
            src_vocab, tgt_vocab = build_vocab(train.src), build_vocab(train.tgt)
            pretrained = None
            if args.pretrained:
                model, sv, tv = load_policy(args.pretrained)
                if sv != src_vocab or tv != tgt_vocab:
                    raise InvalidInput("--pretrained checkpoint vocabulary does not match the training corpus")
                pretrained = model.state_dict()
            trainer = Trainer(args.mode, cfg, train, valid, src_vocab, tgt_vocab, pretrained)
        trainer.run(state_path=state_path, max_epochs=args.max_epochs)

        artifacts = {"state": STATE_FILE}
        artifacts.update({k: p.name for k, p in trainer.write_reports(out).items()})
        if trainer.stage == "done":
            save_policy(out / "policy.npz", trainer)
            artifacts["policy"] = "policy.npz"
            if trainer.critics is not None:
                trainer.critics.save(out)
                for i in (1, 2):
                    artifacts[f"critic_main{i}"] = f"critic_main{i}.npz"
                    artifacts[f"critic_target{i}"] = f"critic_target{i}.npz"
            if trainer.disc is not None:
                trainer.disc.save(out / "discriminator.npz")
                artifacts["discriminator"] = "discriminator.npz"
        trainer.src_vocab.save(out / "src.vocab")
        trainer.tgt_vocab.save(out / "tgt.vocab")
        artifacts.update({"src_vocab": "src.vocab", "tgt_vocab": "tgt.vocab"})
        _write_json(out / MANIFEST, {
            "command": "train",
            "mode": trainer.mode,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "stage": trainer.stage,
            "inputs": {k: {"path": str(p), "hash": git_hash(p)} for k, p in sorted(data.items())},
            "artifacts": {k: {"path": v, "hash": git_hash(out / v)} for k, v in sorted(artifacts.items())},
            "timestamps": {"started": started, "finished": _now()},
        })
        best = max((r["valid_bleu"] for r in trainer.report), default=float("nan"))
        print(f"{trainer.mode}: {len(trainer.report)} report rows, best validation BLEU {best:.2f}, stage {trainer.stage}")
    finally:
        lock.unlink(missing_ok=True)
    return EXIT_OK


# --- translate ---------------------------------------------------------------------------

def cmd_translate(args: argparse.Namespace) -> int:
    model, src_vocab, tgt_vocab = load_policy(args.checkpoint)
    if args.src_vocab:
        src_vocab = Vocabulary.load(args.src_vocab)
    if args.tgt_vocab:
        tgt_vocab = Vocabulary.load(args.tgt_vocab)
    if len(src_vocab) != model.config.src_vocab_size or len(tgt_vocab) != model.config.tgt_vocab_size:
        raise InvalidInput(
            f"vocabulary sizes ({len(src_vocab)}, {len(tgt_vocab)}) do not match the checkpoint "
            f"({model.config.src_vocab_size}, {model.config.tgt_vocab_size})")
    sources = read_sentences(args.input)
    outputs = [tgt_vocab.decode(ids) for ids in translate_ids(model, [src_vocab.encode(s) for s in sources])]
    out = Path(args.output)
    out.write_text("".join(" ".join(o) + "\n" for o in outputs), encoding="utf-8")
    unk = tgt_vocab.itos[UNK]
    flagged = [i + 1 for i, o in enumerate(outputs) if unk in o]
    _write_json(out.with_name(out.name + ".unk.json"),
                {"lines": len(outputs), "lines_with_unk": len(flagged), "unk_line_numbers": flagged})
    print(f"translated {len(outputs)} lines ({len(flagged)} with {unk})")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------------

def cmd_evaluate(args: argparse.Namespace) -> int:
    hyps, refs = read_sentences(args.hyp, allow_empty=True), read_sentences(args.ref)
    if len(hyps) != len(refs):
        raise InvalidInput(f"misaligned files: {len(hyps)} hypotheses vs {len(refs)} references")
    baseline = None
    if args.baseline:
        baseline = read_sentences(args.baseline, allow_empty=True)
        if len(baseline) != len(refs):
            raise InvalidInput(f"misaligned files: {len(baseline)} baseline lines vs {len(refs)} references")

    rows = []

    def add(metric, value, base_value="", test=None):
        rows.append({"metric": metric, "value": value, "baseline": base_value,
                     "p_value": "" if test is None else test.p_value,
                     "significant": "" if test is None else int(test.significant)})

    scorers = {"bleu": corpus_bleu, "ter": corpus_ter}
    for name, fn in scorers.items():
        test = None
        if baseline is not None:
            test = bootstrap_significance(hyps, baseline, refs, name, args.resamples, np.random.default_rng(args.seed))
        add(name, fn(hyps, refs), fn(baseline, refs) if baseline is not None else "", test)
    if args.mlt:
        records = load_mlt(args.mlt)
        systems = [("", hyps)] + ([("baseline", baseline)] if baseline is not None else [])
        groups = [("", records)]
        if args.train_mlt:
            groups.append(("rare_", rare_records(records, load_mlt(args.train_mlt))))
        for prefix, recs in groups:
            if not recs:
                continue
            for name, fn in (("lta", lta), ("ali", ali)):
                values = {label: fn(outs, recs) for label, outs in systems}
                add(prefix + name, values[""], values.get("baseline", ""))
    if args.freq_report:
        training = read_sentences(args.freq_report)
        systems = {"system": hyps, "reference": refs}
        if baseline is not None:
            systems["baseline"] = baseline
        freq_rows = frequency_report(systems, training)
        freq_path = Path(args.freq_out or Path(args.out or "eval.csv").with_suffix(".freq.csv"))
        write_csv(freq_path, freq_rows, [FREQ_HEADER_PREFIX] + list(systems))
        print(f"frequency report written to {freq_path}")

    for r in rows:
        extra = ""
        if r["baseline"] != "":
            extra = f"  baseline {r['baseline']:.4f}"
        if r["p_value"] != "":
            extra += f"  p = {r['p_value']:.4f}{' *' if r['significant'] else ''}"
        print(f"{r['metric']:>9} {r['value']:.4f}{extra}")
    if args.out:
        write_csv(args.out, rows, EVAL_HEADER)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacnmt", description="Soft actor-critic training for seq2seq translation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic parallel corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="YAML file whose 'synth' section supplies defaults")
    p.add_argument("--kind", choices=("copy", "reverse", "ambiguous-lexicon"))
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--min-len", dest="min_len", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--n-pairs", dest="n_pairs", type=int, help="training pairs")
    p.add_argument("--n-ambiguous", dest="n_ambiguous", type=int)
    p.add_argument("--senses-per-word", dest="senses_per_word", type=int)
    p.add_argument("--triggers-per-sense", dest="triggers_per_sense", type=int)
    p.add_argument("--sense-skew", dest="sense_skew", type=float, nargs="+")
    p.add_argument("--valid-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="pretrain and fine-tune a model")
    p.add_argument("--config", required=True, help="YAML config with 'train' and 'data' sections")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out", required=True, help="run directory (checkpoints, reports, manifest)")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's saved state")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a train option (repeatable)")
    p.add_argument("--pretrained", help="policy checkpoint to start from (skips actor pretraining)")
    p.add_argument("--max-epochs", type=int, help="stop after this many epochs (resume later with --resume)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="greedy-decode a file of source sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--src-vocab", help="override the vocabulary stored in the checkpoint")
    p.add_argument("--tgt-vocab", help="override the vocabulary stored in the checkpoint")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mlt", help="MLT annotation TSV for LTA / ALI")
    p.add_argument("--train-mlt", help="training-set MLT TSV; adds rare-sense LTA / ALI")
    p.add_argument("--baseline", help="baseline system output for paired bootstrap tests")
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0, help="bootstrap resampling seed")
    p.add_argument("--freq-report", metavar="TRAIN_TGT", help="training target file for the word-frequency report")
    p.add_argument("--freq-out", help="frequency report CSV path")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInput, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
