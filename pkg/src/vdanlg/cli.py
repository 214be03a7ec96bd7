"""Command-line entry point: train | adapt | generate | evaluate.

Settings come from an INI file (one ``[vdanlg]`` section, flat keys) and
are overridden by flags. Exit codes: 0 ok, 1 usage, 2 config, 3 data,
4 checkpoint.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .corpus import DatasetError, build_vocab, load_acts, load_dataset, relexicalize
from .evaluation import evaluate
from .generator import CheckpointError, Model, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer, adapt, model_kwargs, overgenerate, pretrain_source

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CKPT = 0, 1, 2, 3, 4

PATH_KEYS = ("source", "target", "valid", "checkpoint", "out", "log", "input", "output",
             "candidates", "references", "report")
TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
TRAIN_HELP = {
    "d_h": "hidden size",
    "d_z": "latent size",
    "beam_width": "beam width used for validation decoding",
    "keep_dropout": "dropout keep probability",
    "lr": "initial Adam learning rate",
    "lr_decay": "per-epoch learning-rate decay factor",
    "decay_start_epochs": "epoch index at which decay begins",
    "num_steps": "gradient-reversal schedule horizon",
    "kl_anneal_steps": "steps of linear KL annealing from 0 to 1",
    "K": "candidates over-generated per target DA during adaptation",
    "k": "top re-ranked candidates fed to the critics",
    "M": "posterior samples per example",
    "max_epochs": "maximum epochs",
    "patience": "epochs without validation BLEU gain before stopping",
    "max_len": "maximum decoded length",
    "penalty_weight": "slot-error penalty in re-ranking",
    "init_scale": "uniform initialisation half-width",
    "use_dc": "use the domain critic during adaptation (true/false)",
    "use_sc": "use the text similarity critic during adaptation (true/false)",
    "seed": "seed for initialisation, noise, dropout and data order",
}


class ConfigError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, raw):
    f = TRAIN_FIELDS[key]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for config key '{key}': {raw!r}") from None


def read_config_file(path: str) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[vdanlg]\n" + text
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    if "vdanlg" not in parser:
        raise ConfigError(f"config {path} has no [vdanlg] section")
    return dict(parser["vdanlg"])


def resolve(args: argparse.Namespace) -> tuple[TrainConfig, dict[str, str]]:
    """Merge config file and flags into a TrainConfig and a path table."""
    values: dict = {}
    if args.config:
        try:
            values.update(read_config_file(args.config))
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    for key, val in vars(args).items():
        if key in ("command", "config", "func") or val is None:
            continue
        values[key] = val
    train_kw, paths = {}, {}
    for key, val in values.items():
        if key in TRAIN_FIELDS:
            train_kw[key] = _coerce(key, val)
        elif key in PATH_KEYS or key in ("top_k", "beam", "json", "expect_vocab_hash"):
            paths[key] = val
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        cfg = TrainConfig(**train_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg, paths


def _require(paths: dict, key: str) -> str:
    if not paths.get(key):
        raise ConfigError(f"missing required config key '{key}'")
    return str(paths[key])


def _load(paths: dict, key: str, domain: str | None = None, required: bool = True):
    if not paths.get(key):
        if required:
            raise ConfigError(f"missing required config key '{key}'")
        return []
    p = Path(str(paths[key]))
    if not p.exists():
        raise ConfigError(f"config key '{key}': file not found: {p}")
    return load_dataset(p, domain)


def _check_vocab(model: Model, datasets, paths) -> None:
    expected = paths.get("expect_vocab_hash")
    if expected and expected != model.vocab.hash():
        raise CheckpointError(f"vocabulary hash {model.vocab.hash()} does not match expected {expected}")
    for data in datasets:
        for ex in data:
            missing = [t for t in ex.tokens if t not in model.vocab]
            if missing:
                raise CheckpointError(
                    f"dataset tokens {missing[:5]} not covered by checkpoint vocabulary "
                    f"(hash {model.vocab.hash()})")


def cmd_train(cfg: TrainConfig, paths: dict) -> int:
    source = _load(paths, "source", "source")
    target = _load(paths, "target", "target", required=False)
    valid = _load(paths, "valid", required=False)
    out = _require(paths, "out")
    vocab = build_vocab(list(source) + list(target) + list(valid))
    model = Model.create(vocab, cfg.seed, **model_kwargs(cfg))
    trainer = Trainer(model, cfg)
    pretrain_source(model, source, valid, cfg, trainer)
    save_checkpoint(out, model, {"train_config": dataclasses.asdict(cfg)})
    if paths.get("log"):
        trainer.log.save(paths["log"])
    print(f"wrote checkpoint {out} (vocab {len(vocab)} tokens, hash {vocab.hash()})")
    return EXIT_OK


def cmd_adapt(cfg: TrainConfig, paths: dict) -> int:
    model, _ = load_checkpoint(_require(paths, "checkpoint"))
    source = _load(paths, "source", "source")
    target = _load(paths, "target", "target")
    valid = _load(paths, "valid", required=False)
    out = _require(paths, "out")
    _check_vocab(model, (source, target, valid), paths)
    trainer = Trainer(model, cfg)
    adapt(model, source, target, valid, cfg, trainer)
    save_checkpoint(out, model, {"train_config": dataclasses.asdict(cfg)})
    if paths.get("log"):
        trainer.log.save(paths["log"])
    print(f"wrote adapted checkpoint {out}")
    return EXIT_OK


def cmd_generate(cfg: TrainConfig, paths: dict) -> int:
    model, _ = load_checkpoint(_require(paths, "checkpoint"))
    if paths.get("expect_vocab_hash"):
        _check_vocab(model, (), paths)
    src = _require(paths, "input")
    if not Path(src).exists():
        raise ConfigError(f"config key 'input': file not found: {src}")
    acts = load_acts(src)
    width = int(paths.get("beam") or cfg.beam_width)
    top_k = int(paths.get("top_k") or cfg.k)
    lines = []
    for da in acts:
        for rank, c in enumerate(overgenerate(model, da, cfg, width)[:top_k]):
            lines.append(json.dumps({
                "da": da.format(), "rank": rank, "score": c.score, "log_prob": c.log_prob,
                "tokens": " ".join(c.tokens), "text": relexicalize(c.tokens, da),
                "missing": c.missing, "redundant": c.redundant, "truncated": c.truncated,
            }, sort_keys=True))
    text = "".join(line + "\n" for line in lines)
    if paths.get("output"):
        Path(paths["output"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def read_top_candidates(path: str) -> list[tuple[str, list[str]]]:
    """Rank-0 records of a generate output file, in file order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if int(rec["rank"]) == 0:
                    out.append((rec["da"], str(rec["tokens"]).split()))
            except (ValueError, KeyError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed candidate record: {e}") from None
    return out


def cmd_evaluate(cfg: TrainConfig, paths: dict) -> int:
    cand_path = _require(paths, "candidates")
    refs = _load(paths, "references")
    if not Path(cand_path).exists():
        raise ConfigError(f"config key 'candidates': file not found: {cand_path}")
    cands = read_top_candidates(cand_path)
    if len(cands) != len(refs):
        raise DatasetError(f"{len(cands)} candidate DAs vs {len(refs)} references")
    report = evaluate([t for _, t in cands], [list(r.tokens) for r in refs], [r.da for r in refs])
    if paths.get("report"):
        Path(paths["report"]).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_json() if paths.get("json") else report.table())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "adapt": cmd_adapt, "generate": cmd_generate,
            "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdanlg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{train,adapt,generate,evaluate}")
    helps = {
        "train": "pretrain the variational generator on source data and write a checkpoint",
        "adapt": "adversarially adapt a checkpoint to target data",
        "generate": "beam search, re-rank and relexicalise for each DA in an input file",
        "evaluate": "BLEU and slot error rate of generated candidates against references",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="INI config file with a [vdanlg] section")
        for key in PATH_KEYS:
            p.add_argument(f"--{key}", help=f"path: {key} (overrides config)")
        for key, f in TRAIN_FIELDS.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, help=TRAIN_HELP.get(key, key) + f" [default {f.default}]")
        p.add_argument("--beam", help="beam width for generation (generate)")
        p.add_argument("--top-k", dest="top_k", help="candidates written per DA (generate)")
        p.add_argument("--expect-vocab-hash", dest="expect_vocab_hash",
                       help="fail unless the checkpoint vocabulary has this hash")
        p.add_argument("--json", action="store_const", const="1",
                       help="print the evaluation report as JSON (evaluate)")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS and argv[0] not in ("-h", "--help"):
        parser.print_usage(sys.stderr)
        if argv:
            print(f"vdanlg: unknown command {argv[0]!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        cfg, paths = resolve(args)
        return COMMANDS[args.command](cfg, paths)
    except ConfigError as e:
        print(f"vdanlg: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as e:
        print(f"vdanlg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as e:
        print(f"vdanlg: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CKPT


def main() -> None:
    sys.exit(run())
