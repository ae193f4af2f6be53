"""Command-line entry points: gen-data, train, eval, compare."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import math
import os
import sys

import torch

from . import __version__
from .errors import (
    ConfigurationError,
    InvalidInputError,
    NonFiniteLossError,
    RolloutDivergenceError,
    SimulationError,
    SkillCompError,
    ValidationError,
)
from .evaluation import (
    compare_runs,
    eval_composite,
    mean_additivity_error,
    plot_curves,
    write_aggregate_csv,
    write_metrics_csv,
)
from .model import FORMAT_VERSION, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import COMPOSITE_EMBEDDING, MI_SAMPLING, OBJECTIVES, ObjectiveConfig
from .synthdata import default_manifest, generate_dataset, read_dataset, read_manifest, write_dataset
from .training import TrainConfig, resolve_model_config, train_one

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
METADATA_FILE = "run_metadata.json"
AGGREGATE_FILE = "aggregate.csv"

log = logging.getLogger("skillcomp")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _metadata(command: str, config: dict, seed) -> dict:
    return {"command": command, "format_version": FORMAT_VERSION, "package_version": __version__,
            "seed": seed, "config": config}


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise InvalidInputError(f"--seeds must be comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise InvalidInputError("--seeds is empty")
    return seeds


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.manifest:
        manifest = read_manifest(args.manifest)
    else:
        manifest = default_manifest(args.preset)
    if args.seed is not None:
        manifest.seed = int(args.seed)
    if args.demos_per_skill is not None:
        if args.demos_per_skill < 1:
            raise InvalidInputError("--demos-per-skill must be >= 1")
        manifest.demos_per_skill = int(args.demos_per_skill)
    dataset = generate_dataset(manifest)
    write_dataset(args.out, dataset)
    _write_json(os.path.join(args.out, METADATA_FILE),
                _metadata("gen-data", manifest.to_dict(), manifest.seed))
    print(f"wrote {len(dataset.trajectories)} trajectories for {len(manifest.skill_ids())} skills to {args.out}")
    return EXIT_OK


def _configs_from_args(args, dataset):
    ocfg = ObjectiveConfig(objective=args.objective, lam=args.lam, n_mc=args.n_mc,
                           mi_sampling=args.mi_sampling, composite_embedding=args.composite_embedding)
    tcfg = TrainConfig(objective_config=ocfg, epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, seeds=_parse_seeds(args.seeds),
                       eval_every=args.eval_every, grad_clip=args.grad_clip,
                       train_on_composites=args.train_on_composites)
    first = dataset.trajectories[0]
    mcfg = ModelConfig(first.states.shape[1], first.actions.shape[1], args.d_latent,
                       dynamics_arch=args.dynamics_arch, mixture_components=args.mixture_components)
    return tcfg, resolve_model_config(mcfg, tcfg)


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    if not dataset.trajectories:
        raise ValidationError(f"{args.data} holds no trajectories")
    tcfg, mcfg = _configs_from_args(args, dataset)
    os.makedirs(args.out, exist_ok=True)
    config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "data": os.path.abspath(args.data),
              "dataset_manifest": dataset.manifest.to_dict(), "eval_generation": "mean"}
    _write_json(os.path.join(args.out, METADATA_FILE), _metadata("train", config, list(tcfg.seeds)))
    for seed in tcfg.seeds:
        result = train_one(dataset, tcfg, mcfg, seed)
        extra = {"run_id": result.run_id, "train_config": tcfg.to_dict(), "epochs_trained": tcfg.epochs}
        save_checkpoint(os.path.join(args.out, f"{result.run_id}.ckpt"), result.bundle, seed, extra)
        write_metrics_csv(os.path.join(args.out, f"{result.run_id}_metrics.csv"), result.metrics)
        last = result.metrics[-1]
        print(f"{result.run_id}: epoch {last['epoch']} train_loss {last['train_loss']:.6g} "
              f"eval_mse {last['eval_mse_sum_embedding']:.6g} additivity {last['additivity_error']:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle, header = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    cfg = bundle.config
    for t in dataset.trajectories:
        if t.states.shape[1] != cfg.d_state or t.actions.shape[1] != cfg.d_action:
            raise ConfigurationError(
                f"checkpoint expects d_state={cfg.d_state}, d_action={cfg.d_action}; "
                f"data has {t.states.shape[1]}, {t.actions.shape[1]}")
    by_skill: dict = {}
    for t in dataset.trajectories:
        by_skill.setdefault(t.skill_id, []).append(t)
    report = {"checkpoint": os.path.abspath(args.checkpoint), "mode": args.mode,
              "seed": header["seed"], "format_version": FORMAT_VERSION,
              "model_config": header["model_config"], "eval_generation": "mean", "compositions": {}}
    column = "eval_mse_sum_embedding" if args.mode == "sum" else "eval_mse_encoded"
    other = "eval_mse_encoded" if args.mode == "sum" else "eval_mse_sum_embedding"
    mses, adds = [], []
    with torch.no_grad():
        for comp in dataset.compositions:
            demos = by_skill.get(comp.composite_id)
            if not demos:
                raise ValidationError(f"no demos for composite {comp.composite_id!r}")
            res = eval_composite(bundle, comp, by_skill, demos, args.mode)
            add = mean_additivity_error(bundle, comp, by_skill, demos)
            report["compositions"][comp.composite_id] = {
                "eval_mse": res["mse_mean"], "eval_mse_std": res["mse_std"], "additivity_error": add}
            mses.append(res["mse_mean"])
            adds.append(add)
    report["eval_mse"] = math.fsum(mses) / len(mses) if mses else math.nan
    report["additivity_error"] = math.fsum(adds) / len(adds) if adds else math.nan
    report[column] = report["eval_mse"]
    report[other] = None
    out = args.out or os.path.splitext(args.checkpoint)[0] + f"_eval_{args.mode}.json"
    _write_json(out, report)
    print(json.dumps({"eval_mse": report["eval_mse"], "additivity_error": report["additivity_error"],
                      column: report[column], other: None}, sort_keys=True))
    return EXIT_OK


def _metrics_files(run_dirs) -> list:
    files = []
    for d in run_dirs:
        if os.path.isfile(d):
            files.append(d)
        else:
            files.extend(sorted(glob.glob(os.path.join(d, "*_metrics.csv"))))
    return files


def cmd_compare(args) -> int:
    files = _metrics_files(args.runs)
    if not files:
        raise ValidationError("no metrics files found in " + ", ".join(args.runs))
    aggregate = compare_runs(files)
    os.makedirs(args.out, exist_ok=True)
    write_aggregate_csv(os.path.join(args.out, AGGREGATE_FILE), aggregate)
    config = {"runs": [os.path.abspath(r) for r in args.runs],
              "metrics_files": [os.path.abspath(f) for f in files], "plot": bool(args.plot)}
    _write_json(os.path.join(args.out, METADATA_FILE), _metadata("compare", config, None))
    if args.plot:
        paths = plot_curves(aggregate, os.path.join(args.out, "plots"))
        print(f"wrote {len(paths)} plots")
    print(f"aggregated {len(files)} metrics files into {os.path.join(args.out, AGGREGATE_FILE)}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillcomp", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate demonstrations into a dataset directory")
    g.add_argument("--manifest", help="manifest JSON (default: built-in preset)")
    g.add_argument("--preset", default="diag_wiggle", choices=["diag_wiggle", "diag"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--demos-per-skill", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model per seed")
    t.add_argument("--data", required=True)
    t.add_argument("--objective", required=True, choices=OBJECTIVES)
    t.add_argument("--lambda", dest="lam", type=float, default=0.1)
    t.add_argument("--seeds", default="0,1,2,3,4")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--out", required=True)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--eval-every", type=int, default=5)
    t.add_argument("--grad-clip", type=float, default=10.0)
    t.add_argument("--d-latent", type=int, default=4)
    t.add_argument("--n-mc", type=int, default=8)
    t.add_argument("--mi-sampling", default="as_written", choices=MI_SAMPLING)
    t.add_argument("--composite-embedding", default="sum", choices=COMPOSITE_EMBEDDING)
    t.add_argument("--dynamics-arch", default="mlp", choices=["mlp", "causal_conv"])
    t.add_argument("--mixture-components", type=int, default=1)
    t.add_argument("--train-on-composites", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset's composites")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="sum", choices=["sum", "encode"])
    e.add_argument("--out", help="report path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="aggregate metrics CSVs over seeds")
    c.add_argument("--runs", nargs="+", required=True, help="run directories or metrics files")
    c.add_argument("--out", required=True)
    c.add_argument("--plot", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLossError, RolloutDivergenceError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SkillCompError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
