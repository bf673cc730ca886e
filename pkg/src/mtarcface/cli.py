"""``mtarcface`` command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evalkit
from .datamodel import load_manifest, parse_pair_indices, resolve_data_path, save_manifest_json
from .errors import ConfigError, MTArcFaceError
from .fixture import make_fixture, write_fixture_pairs
from .maskgen import DEFAULT_JITTER, build_masked_twin
from .model import load_checkpoint
from .plots import plot_curves
from .trainer import TrainConfig, coerce_config_values, format_config, parse_config_text, train

log = logging.getLogger("mtarcface")

SYNOPSIS = "mtarcface <subcommand> [--config path] [--key value ...] [--seed int] [--workers int]"
TRAIN_PATH_KEYS = ("original", "masked", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtarcface", usage=SYNOPSIS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-fixture", help="write the synthetic face dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-identities", type=int, default=20)
    p.add_argument("--images-per-identity", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--first-image", type=int, default=0)
    p.add_argument("--pairs-per-fold", type=int, default=0,
                   help="also write <out>/pairs.txt with this many pairs per fold")
    p.add_argument("--folds", type=int, default=10)

    p = sub.add_parser("augment", help="render the masked twin of a dataset")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--jitter", type=float, default=DEFAULT_JITTER)

    p = sub.add_parser("train", help="train a model; extra --key value pairs override the config")
    _common(p)

    p = sub.add_parser("eval-verify", help="pair-verification accuracy")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--dataset", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None, help="results CSV")
    p.add_argument("--append", action="store_true")

    p = sub.add_parser("eval-mask", help="mask-usage classification accuracy")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unmasked", action="append", default=[])
    p.add_argument("--masked", action="append", default=[])
    p.add_argument("--model", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("compare", help="two-model accuracy table from results CSVs")
    _common(p)
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--proposed", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", default=None, help="output prefix for .txt and .csv tables")

    p = sub.add_parser("plot-curves", help="render training curves from a log")
    _common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    return parser


def _overrides(extra: list[str]) -> dict[str, str]:
    values = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or i + 1 >= len(extra):
            raise UsageError(f"expected '--key value', got {token!r}")
        values[token[2:].replace("-", "_")] = extra[i + 1]
        i += 2
    return values


def cmd_make_fixture(args):
    seed = args.seed or 0
    out = resolve_data_path(args.out)
    manifest = make_fixture(out, seed, args.num_identities, args.images_per_identity, args.size, args.first_image)
    save_manifest_json(manifest)
    if args.pairs_per_fold:
        write_fixture_pairs(manifest, out / "pairs.txt", seed, args.folds, args.pairs_per_fold)
    print(f"wrote {manifest.num_images} images of {manifest.num_identities} identities to {out}")


def cmd_augment(args):
    manifest = load_manifest(resolve_data_path(args.input))
    out = resolve_data_path(args.out)
    twin = build_masked_twin(manifest, args.seed or 0, out, size=args.size, jitter=args.jitter,
                             workers=args.workers)
    save_manifest_json(twin)
    print(f"wrote masked twin with {twin.num_images} images to {out}")


def train_settings(config_path, extra: list[str], seed) -> tuple[TrainConfig, dict[str, str]]:
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    values.update(_overrides(extra))
    if seed is not None:
        values["seed"] = str(seed)
    paths = {k: values.pop(k) for k in (*TRAIN_PATH_KEYS, "resume") if k in values}
    missing = [k for k in TRAIN_PATH_KEYS if k not in paths]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")
    return TrainConfig(**coerce_config_values(values)), paths


def cmd_train(args, extra):
    cfg, paths = train_settings(args.config, extra, args.seed)
    original = load_manifest(resolve_data_path(paths["original"]))
    masked = load_manifest(resolve_data_path(paths["masked"]), masked_twin=True)
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    resume = paths.pop("resume", None)
    (out / "config.cfg").write_text(format_config(cfg, paths), encoding="utf-8")
    result = train(cfg, original, masked, out, resume=resume)
    print(f"final checkpoint {result.final_checkpoint}; log {result.log_path}")


def _model_name(args) -> str:
    return args.model or Path(args.checkpoint).resolve().parent.name


def cmd_eval_verify(args):
    data = resolve_data_path(args.data)
    manifest = load_manifest(data)
    index_pairs = parse_pair_indices(args.pairs, manifest)
    ckpt = load_checkpoint(args.checkpoint)
    result = evalkit.verification_from_indices(index_pairs, manifest.load_pixels(), ckpt, args.folds)
    dataset = args.dataset or data.name
    row = evalkit.results_csv([(dataset, _model_name(args), result)])
    print(f"{dataset}: accuracy {result.accuracy:.4f} threshold {result.best_threshold:.4f} "
          f"pairs {result.num_pairs}")
    if args.out:
        out = Path(args.out)
        if args.append and out.exists():
            with open(out, "a", encoding="utf-8") as fh:
                fh.write(row.split("\n", 1)[1])
        else:
            out.write_text(row, encoding="utf-8")


def cmd_eval_mask(args):
    if not args.unmasked and not args.masked:
        raise UsageError("eval-mask needs at least one --unmasked or --masked dataset")
    import numpy as np

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build()
    lines = ["dataset,model,accuracy,num_faces,threshold"]
    logits_all, flags_all = [], []
    for flag, roots in ((0, args.unmasked), (1, args.masked)):
        for root in roots:
            manifest = load_manifest(resolve_data_path(root))
            _, logits = evalkit.run_model(model, manifest.load_pixels())
            flags = [flag] * len(logits)
            res = evalkit.mask_accuracy_from_logits(logits, flags)
            logits_all.append(logits)
            flags_all.extend(flags)
            name = Path(root).name
            print(f"{name}: mask-usage accuracy {res.accuracy:.4f} over {res.num_faces} faces")
            lines.append(f"{name},{_model_name(args)},{res.accuracy!r},{res.num_faces},{res.threshold}")
    overall = evalkit.mask_accuracy_from_logits(np.concatenate(logits_all), flags_all)
    print(f"all: mask-usage accuracy {overall.accuracy:.4f} over {overall.num_faces} faces")
    lines.append(f"all,{_model_name(args)},{overall.accuracy!r},{overall.num_faces},{overall.threshold}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_compare(args):
    rows = evalkit.read_results_csv(args.results)
    by_model = {}
    for dataset, model, acc in rows:
        by_model.setdefault(model, []).append((dataset, acc))
    for name in (args.proposed, args.baseline):
        if name not in by_model:
            raise UsageError(f"model {name!r} not found in results (have {sorted(by_model)})")
    table = evalkit.compare_models(by_model[args.proposed], by_model[args.baseline],
                                   args.proposed, args.baseline)
    sys.stdout.write(table.to_text())
    if args.out:
        evalkit.write_comparison(table, args.out)


def cmd_plot_curves(args):
    out = plot_curves(args.log, args.out)
    print(f"wrote {out}")


COMMANDS = {
    "make-fixture": cmd_make_fixture,
    "augment": cmd_augment,
    "eval-verify": cmd_eval_verify,
    "eval-mask": cmd_eval_mask,
    "compare": cmd_compare,
    "plot-curves": cmd_plot_curves,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        if extra and args.command != "train":
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train":
            cmd_train(args, extra)
        else:
            COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}\nusage: {SYNOPSIS}", file=sys.stderr)
        return 1
    except (MTArcFaceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
