"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines) and one
``--<key> VALUE`` flag per config key; flags win over the file. Run outputs go
under ``$CYCLE_T2I_RUNS`` (default ``./runs``) in a directory named by config
digest and seed. Exit codes: 0 success, 1 usage error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, config_keys, load_config
from .dataset import DatasetError, write_dataset_layout
from .training import (NumericalAbort, build_dataset, generate_from_text, load_models, pretrain_damsm,
                       pretrain_stream, run_dir_for, split_classes, train, write_generation)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file of key = value lines")
    group = p.add_argument_group("config overrides")
    for key in config_keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V")


def _config_from(args) -> TrainConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cycle-t2i", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="write the synthetic shapes set in the CUB layout")
    p.add_argument("--out", required=True)
    _config_args(p)

    p = sub.add_parser("pretrain-damsm", help="pretrain the DAMSM text and image encoders")
    p.add_argument("--out", help="checkpoint path (default: <run dir>/damsm.pt)")
    _config_args(p)

    p = sub.add_parser("pretrain-stream", help="pretrain the STREAM caption decoder")
    p.add_argument("--out", help="checkpoint path (default: <run dir>/stream.pt)")
    _config_args(p)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--damsm", required=True, help="pretrained DAMSM checkpoint")
    p.add_argument("--stream", help="pretrained STREAM checkpoint (cyclegan_bert mode)")
    p.add_argument("--run-dir")
    p.add_argument("--resume", help="GAN checkpoint to continue from")
    p.add_argument("--override-digest", action="store_true", help="accept checkpoints from a different config")
    _config_args(p)

    p = sub.add_parser("generate", help="generate images for one caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score checkpoints")
    p.add_argument("--metric", choices=["is", "consistency", "mos-report"], required=True)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--log", help="MOS session log (mos-report)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    mos = sub.add_parser("mos", help="mean-opinion-score tooling")
    msub = mos.add_subparsers(dest="mos_command", required=True, parser_class=_Parser)
    p = msub.add_parser("record", help="rate images in the terminal")
    p.add_argument("--items", required=True, help="CSV: item_id,source_tag,image_path,caption")
    p.add_argument("--rater", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=int, default=0)
    p = msub.add_parser("report", help="average ratings per source")
    p.add_argument("--log", required=True)
    return parser


def _load_kind(path, kind: str):
    ck = load_checkpoint(path)
    if ck.kind != kind:
        raise UsageError(f"{path} is a {ck.kind} checkpoint, expected {kind}")
    return ck


def _print_mos(summary) -> None:
    print("source_tag,mean,n,std")
    for tag, s in summary.items():
        print(f"{tag},{s.mean:.4f},{s.n},{s.std:.4f}")


def _evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.metric == "mos-report":
        if not args.log:
            raise UsageError("mos-report needs --log")
        summary = ev.mos_report(ev.read_mos_log(args.log))
        rows = [(0, tag, name, value, args.seed) for tag, s in summary.items()
                for name, value in (("mos_mean", s.mean), ("mos_n", s.n), ("mos_std", s.std))]
        ev.append_metrics(out / "mos.csv", rows)
        _print_mos(summary)
        return EXIT_OK
    if not args.checkpoints:
        raise UsageError(f"--metric {args.metric} needs --checkpoints")
    first = load_models(args.checkpoints[0])
    config = first.config
    dataset = build_dataset(config)
    classes = split_classes(config, dataset, config.eval_split)
    if args.metric == "is":
        if len(args.checkpoints) == 1:
            raise UsageError("an IS curve needs at least two checkpoints")
        clf = ev.train_eval_classifier(dataset, config.seed).model
        points = ev.is_curve(args.checkpoints, dataset, clf, out, classes, config.is_per_class, args.seed,
                             config.mode)
        for epoch, score in points:
            print(f"epoch {epoch}: IS {score:.4f}")
        return EXIT_OK
    if dataset.attributes is None:
        raise UsageError("consistency needs a dataset with ground-truth attributes")
    rows = []
    for path in args.checkpoints:
        models = load_models(path)
        recs = [r for k in classes for r in dataset.records_of_class(k)[: config.is_per_class]]
        accs = []
        for i, rec in enumerate(recs):
            gen = generate_from_text(models, rec.raw_text, seed=args.seed + i)
            accs.append(ev.caption_consistency(gen.images[-1].numpy(), rec.attributes).accuracy)
        score = sum(accs) / len(accs)
        rows.append((models.epoch, config.mode, "consistency", score, args.seed))
        print(f"epoch {models.epoch}: consistency {score:.4f}")
    ev.append_metrics(out / "consistency.csv", rows)
    return EXIT_OK


def run(args) -> int:
    if args.command == "mos":
        if args.mos_command == "record":
            session = ev.mos_record(ev.read_mos_items(args.items), args.rater, args.log, args.seed)
            print(f"recorded {len(session.ratings)} ratings" + ("" if session.complete else " (incomplete)"))
        else:
            _print_mos(ev.mos_report(ev.read_mos_log(args.log)))
        return EXIT_OK
    if args.command == "generate":
        gen = generate_from_text(load_models(args.checkpoint), args.caption, args.seed)
        for path in write_generation(gen, args.out):
            print(path)
        if gen.regenerated is not None:
            print(f"regenerated caption: {gen.regenerated}")
        return EXIT_OK
    if args.command == "evaluate":
        return _evaluate(args)

    config = _config_from(args)
    if args.command == "make-dataset":
        print(write_dataset_layout(args.out, build_dataset(config)))
        return EXIT_OK
    dataset = build_dataset(config)
    if args.command in ("pretrain-damsm", "pretrain-stream"):
        run_dir = None if args.out else run_dir_for(config)
        kind = "damsm" if args.command == "pretrain-damsm" else "stream"
        out = Path(args.out) if args.out else run_dir / f"{kind}.pt"
        fn = pretrain_damsm if kind == "damsm" else pretrain_stream
        ck = fn(config, dataset, out, dump_dir=out.parent)
        print(f"{out}  final loss {ck.loss_history[-1]['L_DAMSM' if kind == 'damsm' else 'L_CE']:.4f}")
        return EXIT_OK
    damsm = _load_kind(args.damsm, "damsm")
    stream = _load_kind(args.stream, "stream") if args.stream else None
    result = train(config, dataset, damsm, stream, run_dir=args.run_dir, resume=args.resume,
                   override_digest=args.override_digest)
    print(result.metrics_path)
    for p in result.checkpoints:
        print(p)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
