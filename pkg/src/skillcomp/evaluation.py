"""Generated-vs-demonstration MSE, latent additivity, and multi-seed aggregation."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import InvalidInputError, ValidationError
from .model import DTYPE, GeneratedTrajectory, ModelBundle, Trajectory, encode, rollout
from .objectives import CompositionSpec

METRIC_COLUMNS = [
    "run_id", "objective", "seed", "epoch", "train_loss", "action_nll", "state_nll",
    "kl", "mi_term", "eval_mse_sum_embedding", "eval_mse_encoded", "additivity_error",
]
KEY_COLUMNS = ("run_id", "objective", "seed", "epoch")
AGGREGATE_COLUMNS = ["objective", "epoch", "metric", "mean", "std", "n_seeds"]


def state_mse(generated, demo) -> float:
    g = generated.states if isinstance(generated, (GeneratedTrajectory, Trajectory)) else generated
    d = demo.states if isinstance(demo, (GeneratedTrajectory, Trajectory)) else demo
    g = torch.as_tensor(g, dtype=DTYPE).detach()
    d = torch.as_tensor(d, dtype=DTYPE).detach()
    if g.shape != d.shape:
        raise InvalidInputError(f"state shapes differ: {tuple(g.shape)} vs {tuple(d.shape)}")
    return float(((g - d) ** 2).mean())


def _sample_std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _pairings(comp: CompositionSpec, subskill_demos, n: int) -> list:
    """One demo per subskill for each of ``n`` composite demos (k-th demo, wrapping)."""
    if isinstance(subskill_demos, Mapping):
        pools = []
        for sid in comp.subskill_ids:
            pool = subskill_demos.get(sid)
            if not pool:
                raise InvalidInputError(f"no demos for subskill {sid!r}")
            pools.append(list(pool))
    else:
        pools = [[d] if isinstance(d, Trajectory) else list(d) for d in subskill_demos]
        if len(pools) != comp.M:
            raise InvalidInputError(f"{comp.composite_id} needs {comp.M} subskill demo groups")
    return [[pool[k % len(pool)] for pool in pools] for k in range(n)]


def _posterior_means(bundle: ModelBundle, demos: Sequence[Trajectory]) -> torch.Tensor:
    lengths = {d.T for d in demos}
    if len(lengths) == 1:
        states = torch.stack([torch.from_numpy(d.states) for d in demos]).to(DTYPE)
        return encode(bundle, states).mean
    return torch.stack([encode(bundle, d.states).mean for d in demos])


@torch.no_grad()
def composite_latents(bundle: ModelBundle, comp: CompositionSpec, subskill_demos,
                      composite_demos: Sequence[Trajectory], mode: str) -> torch.Tensor:
    """Deterministic composite latents (posterior means), one row per composite demo."""
    if mode == "encode":
        return _posterior_means(bundle, composite_demos)
    if mode != "sum":
        raise InvalidInputError(f"unknown mode {mode!r}")
    pairs = _pairings(comp, subskill_demos, len(composite_demos))
    flat = [d for group in pairs for d in group]
    means = _posterior_means(bundle, flat).reshape(len(pairs), comp.M, -1)
    return means.sum(1)


@torch.no_grad()
def eval_composite(bundle: ModelBundle, comp: CompositionSpec, subskill_demos,
                   composite_demos: Sequence[Trajectory], mode: str = "sum") -> dict:
    """Mean-mode rollouts from each composite demo's first state, scored by state MSE."""
    if not composite_demos:
        raise InvalidInputError("eval_composite needs at least one composite demo")
    z = composite_latents(bundle, comp, subskill_demos, composite_demos, mode)
    by_len: dict = defaultdict(list)
    for k, demo in enumerate(composite_demos):
        by_len[demo.T].append(k)
    mses = [0.0] * len(composite_demos)
    for T, idx in by_len.items():
        s1 = torch.stack([torch.from_numpy(composite_demos[k].states[0]) for k in idx]).to(DTYPE)
        gen = rollout(bundle, z[idx], s1, T, "mean")
        for j, k in enumerate(idx):
            mses[k] = state_mse(gen.states[j], composite_demos[k].states)
    return {"mse_mean": float(np.mean(mses)), "mse_std": _sample_std(mses), "per_demo": mses}


@torch.no_grad()
def additivity_error(bundle: ModelBundle, comp: CompositionSpec,
                     subskill_demos: Sequence[Trajectory], composite_demo: Trajectory) -> float:
    """|| mean q(z | composite) - sum_i mean q(z | subskill_i) ||_2."""
    if composite_demo is None or len(subskill_demos) != comp.M:
        raise InvalidInputError(f"{comp.composite_id} needs {comp.M} subskill demos and one composite demo")
    sub = _posterior_means(bundle, list(subskill_demos)).sum(0)
    comp_mean = encode(bundle, composite_demo.states).mean
    return float(torch.linalg.vector_norm(comp_mean - sub))


@torch.no_grad()
def mean_additivity_error(bundle: ModelBundle, comp: CompositionSpec, subskill_demos,
                          composite_demos: Sequence[Trajectory]) -> float:
    pairs = _pairings(comp, subskill_demos, len(composite_demos))
    flat = [d for group in pairs for d in group]
    sums = _posterior_means(bundle, flat).reshape(len(pairs), comp.M, -1).sum(1)
    comp_means = _posterior_means(bundle, composite_demos)
    return float(torch.linalg.vector_norm(comp_means - sums, dim=-1).mean())


# -- metrics files ----------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([format_value(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRIC_COLUMNS:
            raise ValidationError(f"{path}: columns {header} do not match the metrics schema")
        rows = []
        for rec in reader:
            row = dict(zip(header, rec))
            row["seed"] = int(row["seed"])
            row["epoch"] = int(row["epoch"])
            for c in METRIC_COLUMNS[4:]:
                row[c] = float(row[c])
            rows.append(row)
    return rows


def compare_runs(metrics_files: Sequence) -> list:
    """Mean and sample std over seeds for every (objective, epoch, metric)."""
    if not metrics_files:
        raise ValidationError("no metrics files given")
    groups: dict = defaultdict(list)
    for path in metrics_files:
        for row in read_metrics_csv(path):
            groups[(row["objective"], row["epoch"])].append(row)
    out = []
    for (objective, epoch) in sorted(groups):
        rows = sorted(groups[(objective, epoch)], key=lambda r: (r["seed"], r["run_id"]))
        for metric in METRIC_COLUMNS[4:]:
            vals = [r[metric] for r in rows]
            out.append({
                "objective": objective, "epoch": epoch, "metric": metric,
                "mean": math.fsum(vals) / len(vals), "std": _sample_std(vals),
                "n_seeds": len({r["seed"] for r in rows}),
            })
    return out


def write_aggregate_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for row in rows:
            w.writerow([format_value(row[c]) for c in AGGREGATE_COLUMNS])


def curve(aggregate: Sequence[dict], objective: str, metric: str) -> list:
    """[(epoch, mean, std)] sorted by epoch."""
    pts = [(r["epoch"], r["mean"], r["std"]) for r in aggregate
           if r["objective"] == objective and r["metric"] == metric]
    return sorted(pts)


def first_epoch_reaching(points: Sequence[tuple], threshold: float):
    """Earliest logged epoch whose mean is <= threshold, or None."""
    for epoch, mean, *_ in points:
        if mean <= threshold:
            return epoch
    return None


def plot_curves(aggregate: Sequence[dict], out_dir) -> list:
    """One PNG per metric with mean +- std bands per objective; returns paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    objectives = sorted({r["objective"] for r in aggregate})
    for metric in METRIC_COLUMNS[4:]:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for obj in objectives:
            pts = curve(aggregate, obj, metric)
            if not pts:
                continue
            e, m, s = (np.array(v) for v in zip(*pts))
            ax.plot(e, m, label=obj)
            ax.fill_between(e, m - s, m + s, alpha=0.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
