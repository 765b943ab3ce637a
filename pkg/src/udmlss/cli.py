"""Batch command line: train, eval, embed, cluster, gradcheck, synth.

Exit codes: 0 success, 1 bad arguments or config, 2 missing or unreadable
input, 3 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .clustering import kmeans
from .config import parse_config
from .data import to_bytes, write_idx
from .errors import ConfigError, ContractError, FormatError, NumericError
from .evaluation import evaluate, export_csv
from .model import infer
from .training import checkpoint_path, load_checkpoint, load_data, run_training

log = logging.getLogger("udmlss")

VERBS = ("train", "eval", "embed", "cluster", "gradcheck", "synth")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udmlss", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("-c", "--config", help="flat JSON config file (defaults apply when omitted)")
    p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("-o", "--out", help="output directory (env UDML_OUT takes precedence)")
    p.add_argument("--checkpoint", help="checkpoint to read (eval/embed/cluster); default <out>/checkpoint.udml")
    p.add_argument("--resume", action="store_true", help="train: continue from the checkpoint in the output dir")
    p.add_argument("--split", choices=("train", "heldout"), default="heldout",
                   help="dataset split for eval/embed/cluster")
    p.add_argument("--idx", action="store_true", help="synth: also write IDX image/label files")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _out_dir(args) -> Path:
    return Path(os.environ.get("UDML_OUT") or args.out or "udml_out")


def _model_and_split(cfg, args, out: Path):
    ck = Path(args.checkpoint) if args.checkpoint else checkpoint_path(out)
    if not ck.exists():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    model = load_checkpoint(ck).model()
    train, held = load_data(cfg)
    ds = held if args.split == "heldout" and held is not None else train
    return model, ds


def cmd_train(cfg, args, out):
    resume = None
    if args.resume and checkpoint_path(out).exists():
        resume = load_checkpoint(checkpoint_path(out))
    ckpt, history = run_training(cfg, out, resume=resume)
    print(json.dumps(history[-1]) if history else "{}")


def cmd_eval(cfg, args, out):
    model, ds = _model_and_split(cfg, args, out)
    if ds.true_labels is None:
        raise FileNotFoundError("evaluation needs a dataset with labels")
    report = evaluate(model, ds.images, ds.true_labels, cfg.recall_ks, cfg.seed)
    text = report.to_json()
    (out / "eval.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_embed(cfg, args, out):
    model, ds = _model_and_split(cfg, args, out)
    path = out / f"embeddings_{args.split}.csv"
    export_csv(path, infer(model, ds.images, what="embed"), ds.ids)
    print(path)


def cmd_cluster(cfg, args, out):
    model, ds = _model_and_split(cfg, args, out)
    table = kmeans(infer(model, ds.images, what="embed"), cfg.k, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_tol,
                   workers=cfg.workers)
    path = out / f"centroids_{args.split}.udml"
    table.save(path)
    print(json.dumps({"path": str(path), "k": table.k, "inertia": table.inertia}))


def cmd_gradcheck(cfg, args, out):
    from .gradcheck import run_suite

    results = run_suite(seed=cfg.seed)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    for name, err in results.items():
        print(f"{name:<24s} {err:.3e}")
    worst = max(results.values())
    if worst >= 1e-4:
        raise ContractError(f"gradient check failed: max relative error {worst:.3e}")


def cmd_synth(cfg, args, out):
    train, held = load_data(cfg.replace(dataset="synth"))
    desc = {
        "generator": "oriented skewed gratings",
        "classes": cfg.synth_classes,
        "per_class": cfg.synth_per_class,
        "heldout_per_class": cfg.synth_heldout_per_class,
        "size": cfg.image_size,
        "seed": cfg.effective_data_seed,
        "noise": cfg.synth_noise,
        "brightness": cfg.synth_brightness,
        "contrast": cfg.synth_contrast,
        "n_train": len(train),
        "n_heldout": len(held) if held is not None else 0,
    }
    if args.idx:
        files = {}
        for split, ds in (("train", train), ("heldout", held)):
            if ds is None:
                continue
            img, lab = out / f"{split}-images.idx3-ubyte", out / f"{split}-labels.idx1-ubyte"
            write_idx(img, to_bytes(ds.images))
            write_idx(lab, ds.true_labels)
            files[split] = {"images": img.name, "labels": lab.name}
        desc["files"] = files
    (out / "dataset.json").write_text(json.dumps(desc, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(desc))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "embed": cmd_embed, "cluster": cmd_cluster,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def dispatch(args) -> int:
    try:
        cfg = parse_config(args.config, args.overrides)
    except FileNotFoundError as exc:
        print(f"error: config file not found: {exc.filename}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.json")
        COMMANDS[args.verb](cfg, args, out)
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, NumericError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
