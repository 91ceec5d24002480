"""Command line entry point.

Usage::

    mhim-mil gen-data  --preset hard --seed 3 --out runs/data
    mhim-mil pretrain  --config run.cfg --out runs/fp
    mhim-mil train     --config run.cfg --seed 1 --out runs/train
    mhim-mil eval      --config run.cfg --checkpoint runs/train/student.ckpt --out runs/eval
    mhim-mil ablate    --config run.cfg --out runs/ablate
    mhim-mil dump-attn --config run.cfg --checkpoint runs/train/teacher.ckpt --out runs/attn

Every command writes the resolved config, seed and version into ``--out``
before doing any work.  Exit status is 1 for configuration errors and 2 for
I/O failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__
from . import rng as rngs
from .config import RunConfig
from .data import Dataset, generate_dataset, load_dataset, make_splits
from .errors import ConfigError, MhimError
from .masking import build_masks, union_masks
from .metrics import aggregate
from .models import extract_teacher_attention, load_checkpoint, model_from_checkpoint, save_checkpoint
from .trainer import evaluate_model, fit_vanilla, train

COMMANDS = ("gen-data", "pretrain", "train", "eval", "ablate", "dump-attn")


def version_string() -> str:
    return f"v{__version__}"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhim-mil", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/out"))
    p.add_argument("--preset", choices=("easy", "hard"))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--checkpoint", type=Path)
    return p


def _prepare_run_dir(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.cfg")
    (out / "SEED").write_text(f"{cfg.seed}\n")
    (out / "VERSION").write_text(version_string() + "\n")


def _dataset(cfg: RunConfig, out: Path, seed: int | None = None) -> Dataset:
    """Dataset named by ``data.dir``, or a synthetic one generated under ``out/data``."""
    if cfg.get("data.dir"):
        return load_dataset(cfg.get("data.dir"))
    return generate_dataset(cfg.synth_config(seed), out / "data")


def _split(cfg: RunConfig, dataset: Dataset, seed: int | None = None):
    splits = make_splits(dataset.records, cfg.get("split.scheme"),
                         seed=cfg.seed if seed is None else seed, ratios=cfg.split_ratios(),
                         k=cfg.get("split.k"), repeats=cfg.get("split.repeats"),
                         val_fraction=cfg.get("split.val_fraction"))
    index = cfg.get("split.index")
    if index >= len(splits):
        raise ConfigError("split.index", f"only {len(splits)} splits available")
    return splits[index]


def _d_in(dataset: Dataset) -> int:
    return next(iter(dataset.bags.values())).features.shape[1]


def _template(cfg: RunConfig, dataset: Dataset):
    return cfg.trainer_config(d_in=_d_in(dataset)).new_model("template")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(cfg: RunConfig, args) -> None:
    ds = generate_dataset(cfg.synth_config(), args.out)
    print(f"wrote {len(ds)} bags to {args.out}")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg, args.out)
    split = _split(cfg, ds)
    tc = cfg.trainer_config(d_in=_d_in(ds))
    model = tc.new_model("pretrain")
    history = fit_vanilla(model, ds.subset(split.train), tc.pretrain_epochs, tc)
    save_checkpoint(model.params, args.out / "pretrained.ckpt")
    val = evaluate_model(model, ds.subset(split.val)).as_dict()
    _write_json(args.out / "pretrain.json", {"loss_history": history, "val": val,
                                             "seed": cfg.seed})
    print(f"pretrained {tc.pretrain_epochs} epochs; val AUC {val['auc']:.4f}")


def cmd_train(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg, args.out)
    split = _split(cfg, ds)
    tc = cfg.trainer_config(d_in=_d_in(ds))
    pretrained = load_checkpoint(cfg.get("train.pretrained")) if cfg.get("train.pretrained") else None
    result = train(ds, split, tc, pretrained=pretrained)
    result.report.write(args.out / "report.jsonl")
    save_checkpoint(result.student.params, args.out / "student.ckpt")
    save_checkpoint(result.pretrained, args.out / "pretrained.ckpt")
    if result.teacher is not None:
        save_checkpoint(result.teacher.params, args.out / "teacher.ckpt")
    t = result.report.test
    print(f"best epoch {result.report.best_epoch}; test AUC {t['auc']:.4f} "
          f"acc {t['accuracy']:.4f} F1 {t['f1']:.4f}")


def _checkpoint_model(cfg: RunConfig, ds: Dataset, args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint", "this command needs --checkpoint")
    return model_from_checkpoint(_template(cfg, ds), args.checkpoint)


def cmd_eval(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg, args.out)
    model = _checkpoint_model(cfg, ds, args)
    split = _split(cfg, ds)
    which = cfg.get("eval.split")
    res = evaluate_model(model, ds.subset(getattr(split, which))).as_dict()
    res["split"] = which
    _write_json(args.out / "eval.json", res)
    print(json.dumps(res, sort_keys=True))


def cmd_ablate(cfg: RunConfig, args) -> None:
    strategies, teachers, seeds = cfg.ablate_axes()
    datasets = {}
    for seed in seeds:
        if cfg.get("data.dir"):
            datasets[seed] = load_dataset(cfg.get("data.dir"))
        else:
            datasets[seed] = generate_dataset(cfg.synth_config(seed), args.out / f"data_seed{seed}")
    rows = []
    for strategy in strategies:
        for teacher in teachers:
            cell = f"{strategy}|{teacher}"
            scores = []
            for seed in seeds:
                ds = datasets[seed]
                tc = cfg.trainer_config(seed=seed, strategy=strategy, teacher=teacher,
                                        cell=cell, d_in=_d_in(ds))
                t = train(ds, _split(cfg, ds, seed), tc).report.test
                scores.append((t["auc"], t["accuracy"], t["f1"]))
            auc_mean, auc_std = aggregate(s[0] for s in scores)
            rows.append({"cell_id": len(rows), "strategy": strategy, "teacher": teacher,
                         "auc_mean": auc_mean, "auc_std": auc_std,
                         "acc_mean": aggregate(s[1] for s in scores)[0],
                         "f1_mean": aggregate(s[2] for s in scores)[0], "n_seeds": len(seeds)})
            print(f"{cell:28s} AUC {auc_mean:.4f} +- {auc_std:.4f}")
    fields = ["cell_id", "strategy", "teacher", "auc_mean", "auc_std", "acc_mean", "f1_mean",
              "n_seeds"]
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def dump_attention(model, cfg: RunConfig, bags, out_path) -> None:
    """Per-instance teacher attention and final-epoch mask flags as CSV."""
    tc = cfg.trainer_config(d_in=model.d_in)
    ratios = tc.mask
    final = tc.max_epochs
    beta_h = ratios.high_ratio(final, final)
    strategy = cfg.get("mask.strategy")
    n_heads = None
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for bag in bags:
            att = extract_teacher_attention(model.forward(bag.features), tc.model_kind,
                                            tc.attn_layer)
            if n_heads is None:
                n_heads = att.n_heads
                w.writerow(["bag_id", "instance_index", "attention", "masked", "strategy"]
                           + [f"attn_h{h}" for h in range(n_heads)])
            mask_rng = rngs.stream(tc.seed, "mask", tc.cell, final, bag.bag_id)
            masks = build_masks(att, ratios, beta_h, mask_rng)
            flags = union_masks(masks.values(), att.n_instances)
            mean = att.head_mean()
            for i in range(att.n_instances):
                w.writerow([bag.bag_id, i, repr(float(mean[i])), int(flags[i]), strategy]
                           + [repr(float(v)) for v in att.values[:, i]])


def cmd_dump_attn(cfg: RunConfig, args) -> None:
    ds = _dataset(cfg, args.out)
    model = _checkpoint_model(cfg, ds, args)
    split = _split(cfg, ds)
    dump_attention(model, cfg, ds.subset(getattr(split, cfg.get("eval.split"))),
                   args.out / "attention.csv")
    print(f"wrote {args.out / 'attention.csv'}")


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "ablate": cmd_ablate, "dump-attn": cmd_dump_attn,
}


def run_command(argv) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.preset, args.seed)
        _prepare_run_dir(cfg, args.out)
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (MhimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)
