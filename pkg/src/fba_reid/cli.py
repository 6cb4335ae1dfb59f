"""Command line entry point: ``fba {synth,train,eval,gradcheck,ablate,attn-dump}``.

Exit status is 0 on success, 1 for usage errors (bad flags, unknown config
keys, ill-typed overrides) and 2 for runtime failures such as a diverged
run or unreadable files.  Every subcommand shares ``--config``, ``--set``,
``--seed`` and ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import Config, ConfigError, describe_keys, load_config

log = logging.getLogger("fba_reid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _keys_epilog() -> str:
    lines = ["config keys (override with --set key=value):"]
    for key, typ, default in describe_keys():
        lines.append(f"  {key:<28} {typ:<6} default: {json.dumps(default)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config document")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for this command (data.seed for synth, train.seed otherwise)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="fba", description="Foreground/background adversarial person re-identification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    epilog = _keys_epilog()

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=epilog,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    add("synth", "generate the synthetic corpus (images, manifest.jsonl, vocab.txt)")

    p = add("train", "train on the training identities of a manifest")
    p.add_argument("--manifest", metavar="PATH", help="default: <data.root>/manifest.jsonl")

    p = add("eval", "evaluate a checkpoint on the held-out identities; prints the report JSON")
    p.add_argument("--manifest", metavar="PATH", help="default: <data.root>/manifest.jsonl")
    p.add_argument("--checkpoint", metavar="DIR", help="default: <train.out_dir>/checkpoint")
    p.add_argument("--features", metavar="PATH", help="also save the gallery embeddings as an .fbt tensor")
    p.add_argument("--jobs", type=int, help="worker threads for ranking (overrides eval.jobs)")

    p = add("gradcheck", "finite-difference check of the full loss on the tiny float64 config")
    p.add_argument("--per-param", type=int, metavar="N",
                   help="check a seeded sample of N scalars per tensor instead of every scalar")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error (default 1e-4)")

    p = add("ablate", "train and evaluate the four loss-component rows over several seeds")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds (default 0,1,2,3,4)")

    p = add("attn-dump", "export attention maps, token similarity, mask and saliency for one image")
    p.add_argument("--manifest", metavar="PATH", help="default: <data.root>/manifest.jsonl")
    p.add_argument("--checkpoint", metavar="DIR", help="default: <train.out_dir>/checkpoint")
    p.add_argument("--index", type=int, default=0, help="row of the manifest to export (default 0)")
    return parser


def _config(args, seed_key: str) -> Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"{seed_key}={args.seed}")
    return load_config(args.config, overrides)


def _manifest(args, cfg: Config) -> Path:
    return Path(args.manifest) if args.manifest else Path(cfg.data.root) / "manifest.jsonl"


def _checkpoint(args, cfg: Config) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.train.out_dir) / "checkpoint"


def cmd_synth(args) -> int:
    from .synthdata import generate_corpus

    cfg = _config(args, "data.seed")
    out = Path(args.out or cfg.data.root)
    records = generate_corpus(cfg.data, out, cfg.encoder.max_text_len)
    print(f"wrote {len(records)} images to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _config(args, "train.seed")
    out = train(cfg, _manifest(args, cfg), args.out or cfg.train.out_dir)
    print(f"checkpoint and log written to {out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import evaluate
    from .io import save_fbt
    from .synthdata import load_dataset, query_gallery_split, split_by_identity
    from .trainer import load_model

    cfg = _config(args, "train.seed")
    model, meta = load_model(_checkpoint(args, cfg))
    enc = model.cfg.encoder
    data = load_dataset(_manifest(args, cfg), enc.max_text_len, enc.pad_id)
    _, test = split_by_identity(data, model.cfg.data.num_train_ids)
    jobs = args.jobs if args.jobs is not None else cfg.eval.jobs
    report, gallery = evaluate(model, test, query_gallery_split(test.pids, test.camids),
                               cfg.eval.composition, jobs=jobs)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(text + "\n", encoding="utf-8")
    if args.features:
        save_fbt(args.features, gallery.features.astype(np.float32))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_full_objective, tiny_config

    cfg = tiny_config(_config(args, "train.seed"))
    result, names, seconds = check_full_objective(cfg, seed=cfg.train.seed, per_param=args.per_param)
    worst = names[result.param_index] if result.param_index >= 0 else None
    doc = {"max_rel_error": result.max_rel_error, "worst_param": worst, "flat_index": result.flat_index,
           "checked": result.checked, "seconds": round(seconds, 2), "tol": args.tol, "ok": result.ok(args.tol)}
    print(json.dumps(doc, indent=2))
    if not result.ok(args.tol):
        print(f"gradient check failed: max relative error {result.max_rel_error:.3e} at {worst}",
              file=sys.stderr)
        return 2
    return 0


def cmd_ablate(args) -> int:
    from .ablation import format_table, run_ablation, write_outputs

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds is empty")
    cfg = _config(args, "train.seed")
    out = Path(args.out or "ablation")
    start = time.perf_counter()
    rows = run_ablation(cfg, seeds, out, log=log.info)
    write_outputs(rows, out)
    print(format_table(rows))
    log.info("ablation finished in %.1fs", time.perf_counter() - start)
    return 0


def cmd_attn_dump(args) -> int:
    from .evaluator import attn_export
    from .synthdata import load_dataset
    from .trainer import load_model

    cfg = _config(args, "train.seed")
    model, _ = load_model(_checkpoint(args, cfg))
    enc = model.cfg.encoder
    data = load_dataset(_manifest(args, cfg), enc.max_text_len, enc.pad_id)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} outside [0, {len(data)})")
    out = Path(args.out or "attn")
    paths = attn_export(model, data.images[args.index], data.fg_tokens[args.index],
                        data.bg_tokens[args.index], out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "attn-dump": cmd_attn_dump,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fba {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        log.debug("failure", exc_info=True)
        print(f"fba {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
