"""Command line entry point: gen-data, train, eval, attribute.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attribution import attribute_bag, write_attribution_csv
from .data import (BagFormatError, ManifestError, SynthConfig, by_split, generate_synthetic,
                   load_manifest)
from .dtfd import (STRATEGIES, ConfigError, NumericError, TrainConfig, fit, load_model,
                   save_model, score_bags)
from .metrics import UndefinedMetricError, aggregate, auc, evaluate

log = logging.getLogger("dtfdmil")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    data_dir: str | None = None
    out_dir: str | None = None
    M: int = 5
    strategy: str = "afs"
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    D_att: int = 128
    seed: int = 0
    seeds: list[int] | None = None
    split: str = "test"
    head_bias: bool = True

    def validate(self) -> "RunConfig":
        if self.M < 1:
            raise CliError(f"M must be >= 1, got {self.M}")
        if self.strategy not in STRATEGIES:
            raise CliError(f"strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.epochs < 1:
            raise CliError(f"epochs must be >= 1, got {self.epochs}")
        if self.D_att < 1:
            raise CliError(f"D_att must be >= 1, got {self.D_att}")
        if not (self.lr >= 0 and self.weight_decay >= 0):
            raise CliError("lr and weight_decay must be non-negative")
        return self

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           D_att=self.D_att, M=self.M, strategy=self.strategy,
                           head_bias=self.head_bias, seed=self.seed if seed is None else seed)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text) -> list[int]:
    if isinstance(text, list):
        return text
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise CliError(f"seeds must be comma-separated integers, got {text!r}")
    if len(seeds) < 2:
        raise CliError("--seeds needs at least two seeds for a confidence interval")
    return seeds


_CONVERTERS = {"int": int, "float": float, "bool": _parse_bool}


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; keys are RunConfig field names, unknown keys are errors."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise CliError(f"{path}: {exc}")
    known = {f.name: f for f in fields(RunConfig)}
    out = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise CliError(f"{path}: unknown config key {key!r}")
        if key == "seeds":
            out[key] = _parse_seeds(raw)
            continue
        kind = known[key].type.split(" ")[0]
        try:
            out[key] = _CONVERTERS.get(kind, str)(raw)
        except ValueError:
            raise CliError(f"{path}: bad value for {key}: {raw!r}")
    return out


# flag dest -> RunConfig field
_FLAG_FIELDS = {"data": "data_dir", "out": "out_dir", "pseudo_bags": "M", "distill": "strategy",
                "epochs": "epochs", "lr": "lr", "weight_decay": "weight_decay", "d_att": "D_att",
                "seed": "seed", "seeds": "seeds", "split": "split", "head_bias": "head_bias"}


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base`` (e.g. a trained model's config), then the config file, then flags."""
    merged = asdict(RunConfig())
    if base:
        merged.update({k: v for k, v in base.items() if k in merged})
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for dest, name in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            merged[name] = v
    if merged["seeds"] is not None:
        merged["seeds"] = _parse_seeds(merged["seeds"])
    merged["strategy"] = str(merged["strategy"]).lower()
    return RunConfig(**merged).validate()


def _load_bags(data_dir):
    if data_dir is None:
        raise CliError("--data is required")
    try:
        return load_manifest(data_dir)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read manifest: {exc}")
    except (ManifestError, BagFormatError) as exc:
        raise CliError(str(exc))


def _split(bags, name: str):
    out = by_split(bags, name)
    if not out:
        raise CliError(f"split {name!r} is empty or missing")
    return out


def _train(cfg: RunConfig, bags, seed: int | None = None, on_epoch=None):
    try:
        return fit(_split(bags, "train"), _split(bags, "val"), cfg.train_config(seed), on_epoch)
    except NumericError as exc:
        raise CliError(f"numeric failure at epoch {exc.epoch}: {exc}", code=3)
    except ConfigError as exc:
        raise CliError(str(exc))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = SynthConfig(n_bags=args.bags, pos_frac=args.pos_frac, K_min=args.k_min, K_max=args.k_max,
                      D=args.dim, witness_rate=args.witness_rate, sep=args.sep, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid generator settings: {exc}")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"{out} is not empty; pass --force to overwrite")
        for name in ("manifest.csv", "witness.csv", "gen.meta.json"):
            (out / name).unlink(missing_ok=True)
        if (out / "bags").is_dir():
            for f in (out / "bags").glob("*.bagf"):
                f.unlink()
    bags = generate_synthetic(cfg, out)
    print(f"wrote {len(bags)} bags to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg.out_dir is None:
        raise CliError("--out is required")
    bags = _load_bags(cfg.data_dir)

    def report(rec):
        log.info("epoch %d L1=%.4f L2=%.4f val_auc_t1=%.4f val_auc_t2=%.4f",
                 rec.epoch, rec.L1, rec.L2, rec.val_auc_t1, rec.val_auc_t2)

    model, history = _train(cfg, bags, on_epoch=report)
    out = Path(cfg.out_dir)
    save_model(model, out, history)
    resolved = asdict(cfg)
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    last = history.records[-1]
    best = history.records[history.best_epoch - 1]
    print(f"final val AUC tier2={last.val_auc_t2:.4f} tier1={last.val_auc_t1:.4f}; "
          f"saved best epoch {history.best_epoch} (val AUC tier2={best.val_auc_t2:.4f}) to {out}")
    return 0


def _report(t2, t1, y, tiers: str):
    try:
        if tiers == "both":
            return {"tier1": evaluate(t1, y), "tier2": evaluate(t2, y)}
        return {"tier2": evaluate(t2, y)}
    except UndefinedMetricError as exc:
        raise CliError(f"cannot evaluate: {exc}")


def cmd_eval(args) -> int:
    base = None
    if args.model is not None:
        resolved = Path(args.model) / "config.resolved.json"
        if resolved.exists():
            base = json.loads(resolved.read_text(encoding="utf-8"))
    cfg = resolve_config(args, base)
    bags = _load_bags(cfg.data_dir)
    target = _split(bags, cfg.split)
    if len({b.label for b in target}) < 2:
        raise CliError(f"split {cfg.split!r} has a single class; AUC is undefined")

    if cfg.seeds:
        per_seed = []
        for seed in cfg.seeds:
            model, _ = _train(cfg, bags, seed=seed)
            per_seed.append(_report(*score_bags(target, model), args.tiers))
        reports = {k: aggregate([r[k] for r in per_seed], cfg.seeds) for k in per_seed[0]}
    else:
        if args.model is None:
            raise CliError("--model is required unless --seeds is given")
        try:
            model = load_model(args.model)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            raise CliError(f"cannot load model: {exc}")
        reports = _report(*score_bags(target, model), args.tiers)

    doc = {k: r.to_dict() for k, r in reports.items()} if args.tiers == "both" else reports["tier2"].to_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def instance_auc_summary(rows, bags_by_id) -> dict | None:
    """Mean per-bag instance AUC of derived probabilities and of normalized attention.

    Only bags whose witness mask contains both classes take part.
    """
    p_aucs, a_aucs = [], []
    for bag_id, att in rows:
        mask = bags_by_id[bag_id].witness_mask
        if mask is None or len(mask) != len(att.a_norm) or mask.all() or not mask.any():
            continue
        p_aucs.append(auc(att.p[:, 1], mask.astype(int)))
        a_aucs.append(auc(att.a_norm, mask.astype(int)))
    if not p_aucs:
        return None
    return {"n_bags": len(p_aucs), "auc_p1": float(np.mean(p_aucs)), "auc_a_norm": float(np.mean(a_aucs))}


def cmd_attribute(args) -> int:
    try:
        model = load_model(args.model)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load model: {exc}")
    bags = _load_bags(args.data)
    by_id = {b.bag_id: b for b in bags}
    if args.bags:
        ids = [s.strip() for s in args.bags.split(",") if s.strip()]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise CliError(f"unknown bag id(s): {', '.join(missing)}")
    else:
        ids = [b.bag_id for b in _split(bags, args.split)]
    rows = [(i, attribute_bag(by_id[i].features, model.tier1)) for i in ids]
    write_attribution_csv(args.out, rows)
    print(f"wrote {sum(len(r.a_norm) for _, r in rows)} instance rows for {len(rows)} bags to {args.out}")
    summary = instance_auc_summary(rows, by_id)
    if summary is not None:
        print(f"instance AUC over {summary['n_bags']} bags: derived p1={summary['auc_p1']:.4f} "
              f"attention a_norm={summary['auc_a_norm']:.4f}")
    return 0


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory (holds manifest.csv)")
    p.add_argument("--config", help="flat key = value file; flags take precedence")
    p.add_argument("--pseudo-bags", type=int, help="pseudo-bags per slide, M (default 5)")
    p.add_argument("--distill", type=str.lower, choices=STRATEGIES, help="distillation strategy (default afs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--d-att", type=int, help="attention hidden size")
    p.add_argument("--seed", type=int)
    p.add_argument("--head-bias", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtfdmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic MIL dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--bags", type=int, default=400)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--witness-rate", type=float, default=0.1)
    g.add_argument("--sep", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--pos-frac", type=float, default=0.5)
    g.add_argument("--k-min", type=int, default=50)
    g.add_argument("--k-max", type=int, default=200)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a two-tier model")
    _add_run_flags(t)
    t.add_argument("--out", help="model directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a split and report AUC, accuracy and F1")
    _add_run_flags(e)
    e.add_argument("--model", help="trained model directory")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--tiers", choices=("tier2", "both"), default="tier2")
    e.add_argument("--seeds", help="comma-separated seeds: train and evaluate once per seed")
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attribute", help="export per-instance attributions from the Tier-1 model")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--bags", help="comma-separated bag ids (default: every bag of --split)")
    a.add_argument("--split", choices=("train", "val", "test"), default="test")
    a.add_argument("--out", required=True, help="CSV path")
    a.set_defaults(func=cmd_attribute)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
