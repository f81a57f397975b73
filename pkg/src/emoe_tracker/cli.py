"""Command-line entry point: ``emoe-tracker {fixture,train,eval,track,viz}``.

Config precedence, lowest to highest: built-in defaults, ``--config`` YAML
file, the ``EMOE_SEED`` environment variable (seeds only), explicit flags.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import RunConfig, seed_from_env
from .errors import DataError, EmoeError
from .eventrep import MANIFEST, FixtureDataset, generate_fixture
from .model import load_checkpoint, read_checkpoint_config
from .trackloop import evaluate, gt_pixels, load_split, track_sequence, train

log = logging.getLogger("emoe_tracker")


def _add_model_flags(p):
    p.add_argument("--experts", type=int, help="number of eMoE experts K")
    p.add_argument("--insert-interval", type=int, help="inject every I-th encoder layer")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emoe-tracker", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="generate the synthetic RGB+event fixture")
    p.add_argument("--seed", type=int, default=None, help="fixture seed (default 0, or EMOE_SEED)")
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--val-sequences", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing fixture")

    p = sub.add_parser("train", help="train the eMoE and CRM parameters")
    p.add_argument("--data", required=True, help="fixture directory")
    p.add_argument("--out", required=True, help="output directory for model.npz and losses.csv")
    p.add_argument("--config", help="YAML config file")
    _add_model_flags(p)
    p.add_argument("--header-unfrozen", action="store_true", help="also train the prediction head")
    p.add_argument("--no-emoe", action="store_true")
    p.add_argument("--no-crm", action="store_true")
    p.add_argument("--crm-feeds-head", action="store_true", help="decode boxes from the CRM-fused tokens")
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-validate", action="store_true", help="skip per-epoch SR checkpoint selection")
    p.add_argument("--log-every", type=int, default=0)

    for name, helptext in (("eval", "track a split and report SR/PR/NPR"),
                           ("track", "track a split and write per-sequence results files")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="train", help="train, val or all")
        _add_model_flags(p)
        p.add_argument("--out", help="metrics file (eval) or results directory (track)")
        if name == "eval":
            p.add_argument("--per-attribute", action="store_true")

    p = sub.add_parser("viz", help="write attention, score and expert images for one frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, default=1)
    _add_model_flags(p)
    p.add_argument("--out", required=True)
    return ap


# --------------------------------------------------------------------------- config

def train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {"train.seed": seed_from_env(cfg.train.seed)}
    flag_map = {"experts": "emoe.num_experts", "insert_interval": "emoe.insert_interval",
                "tau": "crm.tau", "steps": "train.steps", "batch_size": "train.batch_size",
                "lr": "optim.lr", "seed": "train.seed"}
    for attr, key in flag_map.items():
        v = getattr(args, attr)
        if v is not None:
            over[key] = v
    if args.header_unfrozen:
        over["model.header_unfrozen"] = True
    if args.no_emoe:
        over["emoe.enabled"] = False
    if args.no_crm:
        over["crm.enabled"] = False
    if args.crm_feeds_head:
        over["crm.feeds_head"] = True
    if args.no_validate:
        over["train.validate"] = False
    return cfg.override(over)


def _expected(args, ckpt_cfg: RunConfig) -> RunConfig:
    over = {}
    if args.experts is not None:
        over["emoe.num_experts"] = args.experts
    if args.insert_interval is not None:
        over["emoe.insert_interval"] = args.insert_interval
    return ckpt_cfg.override(over)


def _split(name):
    return None if name == "all" else name


def _load_model(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return load_checkpoint(path, expect=_expected(args, read_checkpoint_config(path)))


# --------------------------------------------------------------------------- commands

def cmd_fixture(args) -> int:
    seed = args.seed if args.seed is not None else seed_from_env(0)
    out = Path(args.out)
    generate_fixture(seed, args.sequences, args.frames, out, force=args.force,
                     val_sequences=args.val_sequences)
    print(out / MANIFEST)
    return 0


def cmd_train(args) -> int:
    cfg = train_config(args)
    data = Path(args.data)
    if not (data / MANIFEST).is_file():
        raise DataError(f"no fixture at {data}")
    ds = load_split(data, cfg, "train")
    val = None
    try:
        val = FixtureDataset(data, cfg.emoe.num_experts, "val")
    except DataError:
        pass
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    res = train(cfg, ds, out_dir=out, val_dataset=val, log_every=args.log_every)
    last = res.history[-1]
    print(f"checkpoint: {res.checkpoint}")
    print(f"final loss/total: {last['loss/total']:.6f}")
    if res.best_sr >= 0:
        print(f"best validation SR: {res.best_sr:.6f}")
    return 0


def format_report(report, per_attribute=True) -> str:
    d = report.to_dict()
    if not per_attribute:
        d = {k: v for k, v in d.items() if not k.startswith("attr/")}
    return yaml.safe_dump(d, sort_keys=False)


def _track_all(args):
    model = _load_model(args)
    ds = load_split(args.data, model.cfg, _split(args.split))
    return model, ds, [track_sequence(model, s) for s in ds]


def cmd_eval(args) -> int:
    _, ds, results = _track_all(args)
    report = evaluate(results, [gt_pixels(s) for s in ds], [s.attr for s in ds])
    text = format_report(report, args.per_attribute)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return 0


def cmd_track(args) -> int:
    _, _, results = _track_all(args)
    out = Path(args.out or "results")
    for r in results:
        print(r.write(out / f"{r.name}.txt"))
    return 0


def cmd_viz(args) -> int:
    from .viz import visualize

    model = _load_model(args)
    seq = FixtureDataset(args.data, model.cfg.emoe.num_experts).by_name(args.sequence)
    for p in visualize(model, seq, args.frame, args.out):
        print(p)
    return 0


COMMANDS = {"fixture": cmd_fixture, "train": cmd_train, "eval": cmd_eval,
            "track": cmd_track, "viz": cmd_viz}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EmoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
