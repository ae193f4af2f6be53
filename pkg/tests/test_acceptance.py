"""Acceptance suite. Each test records a one-line verdict shown in the terminal summary."""

import math
import os
import time

import numpy as np
import pytest
import torch

from acceptance_report import record
from fdcheck import compare, random_coords, rel_errors
from skillcomp.cli import main
from skillcomp.evaluation import compare_runs, curve, first_epoch_reaching, read_metrics_csv
from skillcomp.gaussian_toy import bound_estimates, fit_posteriors, random_toy, toy_bundle
from skillcomp.latent_math import (
    DiagGaussian,
    gaussian_entropy,
    mc_entropy_estimate,
    subadditivity_terms,
    sum_gaussians,
)
from skillcomp.model import ModelConfig, Trajectory, init_parameters, load_checkpoint, save_checkpoint
from skillcomp.objectives import CompositionSpec, ObjectiveConfig, regularized_loss
from skillcomp.synthdata import read_dataset, read_trajectories, write_trajectories
from test_latent_math import random_joint_cov

ENTROPY_TOL = 0.01          # nats, 10^6 samples
BOUND_SLACK = 0.05          # nats above analytic MI
FD_STEP = 1e-3
FD_REL_TOL = 1e-4
LAMBDA0_TOL = 1e-12
SWEEP_BUDGET_S = 30 * 60

# sweep protocol; lambda and sampling mode were picked on seeds 10-14, disjoint from these
SWEEP_SEEDS = "0,1,2,3,4"
SWEEP_EPOCHS = 100
SWEEP_LAMBDA = 16.0
SWEEP_ARGS = {
    "original": [],
    "reg_variational": ["--lambda", str(SWEEP_LAMBDA)],
    "reg_nonvariational": ["--lambda", str(SWEEP_LAMBDA), "--mi-sampling", "cross"],
}


def test_criterion_1_entropy_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        d = int(rng.integers(1, 5))
        g = DiagGaussian(rng.normal(0, 3, d), rng.uniform(0.1, 10, d))
        worst = max(worst, abs(float(gaussian_entropy(g)) - mc_entropy_estimate(g, 10**6, seed=k)))
        # sum of parts: entropy of the summed draws, with the density fitted from those draws alone
        parts = [DiagGaussian(rng.normal(0, 3, d), rng.uniform(0.1, 10, d)) for _ in range(int(rng.integers(2, 4)))]
        gen = torch.Generator().manual_seed(10_000 + k)
        with torch.no_grad():
            x = sum(p.sample(gen, 10**6) for p in parts)
            fitted = DiagGaussian(x.mean(0), x.std(0))
            mc = float(-(-0.5 * ((x - fitted.mean) / fitted.std) ** 2 - torch.log(fitted.std)
                         - 0.5 * math.log(2 * math.pi)).sum(-1).mean())
        worst = max(worst, abs(float(gaussian_entropy(sum_gaussians(parts))) - mc))
    elapsed = time.perf_counter() - t0
    ok = worst <= ENTROPY_TOL and elapsed < 60
    record(1, "closed-form entropy vs Monte Carlo", ok,
           f"max |error| {worst:.4f} nats (tol {ENTROPY_TOL}) in {elapsed:.1f}s over 50 instances")
    assert ok


def test_criterion_2_bounds_below_analytic_mi():
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    worst = {"variational": -math.inf, "sample_as_written": -math.inf, "sample_cross": -math.inf}
    closest_var = math.inf
    for k in range(20):
        toy = random_toy(rng)
        bundle = toy_bundle(toy, k)
        fit_posteriors(bundle, toy, 20, seed=k, lr=1e-2, batch=512, n_train=8192)
        est = bound_estimates(bundle, toy, 4000, seed=500 + k)
        for key in worst:
            worst[key] = max(worst[key], est[key] - est["analytic_mi"])
        closest_var = min(closest_var, est["analytic_mi"] - est["variational"])
    elapsed = time.perf_counter() - t0
    ok = all(v <= BOUND_SLACK for v in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} max excess {v:+.3f}" for k, v in worst.items())
    record(2, "MI bounds stay below analytic MI", ok,
           f"{detail} (allowed +{BOUND_SLACK}); tightest variational gap {closest_var:.3f}; {elapsed:.0f}s")
    assert ok


def test_criterion_3_subadditivity_chain():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    margins = []
    for _ in range(100):
        M, d_z, d_tau = int(rng.integers(2, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 5))
        t = subadditivity_terms(random_joint_cov(rng, M, d_z, d_tau), M, d_z)
        margins.append(t["sum_h"] - t["h_v"])
    elapsed = time.perf_counter() - t0
    ok = min(margins) >= 0 and elapsed < 60
    record(3, "H(V|tau) <= sum_i H(z_i|tau)", ok,
           f"min margin {min(margins):.4f} nats over 100 instances in {elapsed:.2f}s")
    assert ok


def _tiny_problem(seed=11):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(2, 2, 2, encoder_hidden=4, attention_dim=3, policy_hidden=5, dynamics_hidden=5, with_aux=True)
    bundle = init_parameters(cfg, 5)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for head in (bundle.dynamics.head.out, bundle.encoder.head, bundle.aux.head):
            head.weight.normal_(0, 0.3, generator=g)
    skills = ["a", "b"]
    trajs = [Trajectory(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), s) for s in skills for _ in range(2)]
    return bundle, trajs, [CompositionSpec("ab", skills)], rng


def test_criterion_4_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {}
    for k, objective in enumerate(("original", "reg_variational", "reg_nonvariational")):
        bundle, trajs, comps, rng = _tiny_problem(11 + k)
        cfg = ObjectiveConfig(objective, lam=1.0, n_mc=2)
        params = list(bundle.parameters())
        pairs = compare(lambda: regularized_loss(bundle, trajs, comps, cfg, torch.Generator().manual_seed(9))[0],
                        params, random_coords(params, 10, rng), h=FD_STEP)
        worst[objective] = max(rel_errors(pairs))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= FD_REL_TOL and elapsed < 120
    record(4, "analytic vs central-difference gradients", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol {FD_REL_TOL:.0e}) in {elapsed:.1f}s")
    assert ok


def test_criterion_5_lambda_zero_reduces_to_elbo():
    worst = 0.0
    for objective in ("reg_variational", "reg_nonvariational"):
        bundle, trajs, comps, _ = _tiny_problem()
        params = list(bundle.parameters())
        base = regularized_loss(bundle, trajs, comps, ObjectiveConfig("original"), torch.Generator().manual_seed(2))[0]
        reg = regularized_loss(bundle, trajs, comps, ObjectiveConfig(objective, lam=0.0),
                               torch.Generator().manual_seed(2))[0]
        gb = torch.autograd.grad(base, params, allow_unused=True)
        gr = torch.autograd.grad(reg, params, allow_unused=True)
        worst = max(worst, abs(float(base) - float(reg)))
        for a, b in zip(gb, gr):
            a = torch.zeros(()) if a is None else a
            b = torch.zeros(()) if b is None else b
            worst = max(worst, float((a - b).abs().max()))
    ok = worst <= LAMBDA0_TOL
    record(5, "lambda=0 reproduces the ELBO loss and gradients", ok, f"max deviation {worst:.1e} (tol 1e-12)")
    assert ok


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    data = str(root / "data")
    t0 = time.perf_counter()
    assert main(["gen-data", "--preset", "diag_wiggle", "--out", data, "--seed", "0"]) == 0
    runs = {}
    for objective, extra in SWEEP_ARGS.items():
        out = str(root / objective)
        code = main(["train", "--data", data, "--objective", objective, "--seeds", SWEEP_SEEDS,
                     "--epochs", str(SWEEP_EPOCHS), "--out", out] + extra)
        assert code == 0
        runs[objective] = out
    assert main(["compare", "--runs", *runs.values(), "--out", str(root / "compare")]) == 0
    elapsed = time.perf_counter() - t0
    files = [os.path.join(d, f) for d in runs.values() for f in sorted(os.listdir(d)) if f.endswith("_metrics.csv")]
    return {"root": root, "data": data, "runs": runs, "aggregate": compare_runs(files), "elapsed": elapsed}


def _final(aggregate, objective, metric):
    return curve(aggregate, objective, metric)[-1][1]


@pytest.mark.slow
def test_criterion_6_regularized_mse_ordering(sweep):
    agg = sweep["aggregate"]
    base_curve = curve(agg, "original", "eval_mse_sum_embedding")
    base_final = base_curve[-1][1]
    base_reach = first_epoch_reaching(base_curve, base_final)
    parts, ok = [f"original final {base_final:.4f} (first reached at epoch {base_reach})"], True
    for objective in ("reg_variational", "reg_nonvariational"):
        pts = curve(agg, objective, "eval_mse_sum_embedding")
        reach = first_epoch_reaching(pts, base_final)
        lower = pts[-1][1] < base_final
        faster = reach is not None and reach < base_reach
        ok &= lower and faster
        parts.append(f"{objective} final {pts[-1][1]:.4f} lower={lower}, reaches at {reach} faster={faster}")
    within = sweep["elapsed"] < SWEEP_BUDGET_S
    ok &= within
    parts.append(f"sweep {sweep['elapsed'] / 60:.1f} min")
    record(6, "regularized eval MSE below baseline and reached sooner", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_7_regularized_additivity_lower(sweep):
    agg = sweep["aggregate"]
    base = _final(agg, "original", "additivity_error")
    parts, ok = [f"original {base:.4f}"], True
    for objective in ("reg_variational", "reg_nonvariational"):
        v = _final(agg, objective, "additivity_error")
        ok &= v < base
        parts.append(f"{objective} {v:.4f}")
    record(7, "final additivity error below baseline", ok, "; ".join(parts))
    assert ok


def test_criterion_8_commands_are_deterministic(tmp_path):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--out", data, "--seed", "3", "--demos-per-skill", "4"]) == 0
    checked, mismatched = 0, []
    for objective, extra in SWEEP_ARGS.items():
        outs = []
        for rep in range(2):
            out = str(tmp_path / f"{objective}_{rep}")
            assert main(["train", "--data", data, "--objective", objective, "--seeds", "0,1",
                         "--epochs", "3", "--eval-every", "1", "--out", out] + extra) == 0
            outs.append(out)
        for name in sorted(os.listdir(outs[0])):
            if name.endswith((".ckpt", "_metrics.csv")):
                checked += 1
                with open(os.path.join(outs[0], name), "rb") as a, open(os.path.join(outs[1], name), "rb") as b:
                    if a.read() != b.read():
                        mismatched.append(name)
        ckpt = os.path.join(outs[0], f"{objective}_seed1.ckpt")
        reports = []
        for rep in range(2):
            for mode in ("sum", "encode"):
                path = str(tmp_path / f"eval_{objective}_{mode}_{rep}.json")
                assert main(["eval", "--checkpoint", ckpt, "--data", data, "--mode", mode, "--out", path]) == 0
                with open(path, "rb") as fh:
                    reports.append(fh.read())
        checked += 2
        if reports[:2] != reports[2:]:
            mismatched.append(f"eval {objective}")
    ok = not mismatched
    record(8, "repeated train/eval commands are byte-identical", ok,
           f"{checked} outputs compared, mismatches: {mismatched or 'none'}")
    assert ok


def test_criterion_9_formats_round_trip(tmp_path):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--out", data, "--seed", "5", "--demos-per-skill", "3"]) == 0
    src = os.path.join(data, "trajectories.jsonl")
    write_trajectories(tmp_path / "again.jsonl", read_trajectories(src))
    with open(src, "rb") as a, open(tmp_path / "again.jsonl", "rb") as b:
        jsonl_ok = a.read() == b.read()
    ckpt_ok = True
    for arch in ("mlp", "causal_conv"):
        cfg = ModelConfig(2, 2, 3, dynamics_arch=arch, mixture_components=2, with_aux=True)
        save_checkpoint(tmp_path / f"{arch}.ckpt", init_parameters(cfg, 1), 1, extra={"note": arch})
        bundle, header = load_checkpoint(tmp_path / f"{arch}.ckpt")
        save_checkpoint(tmp_path / f"{arch}2.ckpt", bundle, header["seed"], extra=header["extra"])
        ckpt_ok &= (tmp_path / f"{arch}.ckpt").read_bytes() == (tmp_path / f"{arch}2.ckpt").read_bytes()
    ok = jsonl_ok and ckpt_ok and len(read_dataset(data).trajectories) == 12
    record(9, "dataset JSONL and checkpoint write-read-write round trip", ok,
           f"jsonl identical={jsonl_ok}, checkpoints identical={ckpt_ok}")
    assert ok
