#!/usr/bin/env python3
"""
eigensde Command Line
=====================

    python -m eigensde generate     --preset section5-complex --n-traj 1000 --seed 1 --out data.jsonl
    python -m eigensde train        --data data.jsonl --out model.json --seed 1
    python -m eigensde eval         --checkpoint model.json --data data.jsonl --out-dir eval/
    python -m eigensde forecast     --checkpoint model.json --trajectory traj.json --times 0:10:0.1 --out f.csv
    python -m eigensde spectrum     --checkpoint model.json --data data.jsonl --out spectrum.csv
    python -m eigensde oracle-check --seed 0 --n-cases 100
    python -m eigensde rollout      --seed 0 --policy feedback --out rollout.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import RunConfig, RunRecord
from .datasets import read_dataset, read_trajectory, split_dataset, write_dataset
from .errors import ConfigError, DataError, EigenSDEError, NumericError
from .esde import (
    ControlSegment,
    GaussianBelief,
    control_integral_analytic,
    control_integral_numeric,
    moment_ode_oracle,
    noise_integral_analytic,
    noise_integral_numeric,
    propagate,
)
from .filtering import Observation, condition, condition_by_augmentation
from .log import configure_logging, get_logger
from .nets import HyperModel, load_checkpoint, save_checkpoint
from .spectral import SpectralDynamics, random_spectral_dynamics
from .spectrum_report import ground_truth_lines, spectrum_report
from .synthdata import PRESETS, DosingEnvConfig, generate_preset, run_episode
from .train import AdamState, BestCheckpoint, TrainConfig, evaluate, oracle_model, train, unroll

logger = get_logger("cli")

MODEL_HINT_KEYS = ("n", "m", "k", "context_dim", "B_mask")


def parse_times(text):
    """'start:stop:step' (stop inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"bad time range {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(count)]
        return sorted(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse times {text!r}") from exc


def _records_to_csv(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


def cmd_generate(args):
    run = RunConfig.load(args.config)
    seed = run.resolve_seed(args.seed)
    out = run.path("data", args.out)
    obs_range = None
    if args.obs_per_traj is not None:
        obs_range = (args.obs_per_traj, args.obs_per_traj)
    elif args.obs_range is not None:
        obs_range = tuple(args.obs_range)
    overrides = run.merged("generator", {
        "n_traj": args.n_traj,
        "obs_per_traj": obs_range,
        "support": args.support,
        "coupling": args.coupling,
        "observation_noise": args.observation_noise,
    })
    preset = overrides.pop("preset", None)
    preset = args.preset or preset
    if preset is None:
        raise ConfigError("generate needs --preset")
    dataset = generate_preset(preset, seed=seed, **overrides)
    write_dataset(out, dataset)
    RunRecord("generate").update(seed=seed, preset=preset, config=dataset.header["config"]).write(out)
    print(f"✅ {preset}: {len(dataset)} trajectories, {dataset.mean_observations():.2f} observations on average")
    print(f"📁 {out}")
    return 0


def _train_config(run, header, args, seed):
    values = {k: header.get("model_hint", {}).get(k) for k in MODEL_HINT_KEYS}
    values = {k: v for k, v in values.items() if v is not None}
    values.update(run.train)
    values.update({k: v for k, v in {
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "interval_dt": args.interval_dt,
        "subsample_prob": args.subsample_prob,
        "penalty_weight": args.penalty_weight,
        "n": args.n,
        "m": args.m,
        "k": args.k,
        "n_complex_pairs": args.n_complex_pairs,
        "stable": args.stable,
    }.items() if v is not None})
    if args.ablate_hypernet:
        values["hypernet_disabled"] = True
    values["seed"] = seed
    try:
        return TrainConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(f"bad training setting: {exc}") from exc


def _mode_name(n_complex_pairs):
    return "real" if n_complex_pairs == 0 else "complex"


def _candidate_pairs(run, args, config, resumed):
    """Complex-pair counts to train: one when pinned, else real mode and full complex mode."""
    for pinned in (args.n_complex_pairs, run.train.get("n_complex_pairs")):
        if pinned is not None:
            return [int(pinned)]
    if resumed is not None:
        return [resumed[0].config.n_complex_pairs]
    return sorted({0, config.n // 2})


def _resume_state(resumed, config, path):
    model, payload = resumed
    if model.config != config.head_config():
        raise ConfigError("resume checkpoint was trained with a different model configuration")
    if "opt_state" not in payload or "epoch" not in payload:
        raise DataError(f"{path} is not a resumable checkpoint")
    params = [p for p in model.parameters() if p.requires_grad]
    opt_state = AdamState.from_json(payload["opt_state"], params)
    start_epoch = int(payload["epoch"]) + 1
    best = None
    if payload.get("best_checkpoint") is not None:
        best_path = Path(payload["best_checkpoint"])
        if not best_path.exists():
            raise DataError(f"best checkpoint {best_path} recorded in {path} is missing")
        best_model, _ = load_checkpoint(best_path)
        score = payload.get("best_score")
        best = BestCheckpoint(
            math.inf if score is None else float(score),
            int(payload.get("best_epoch", start_epoch - 1)),
            best_model.state_dict(),
        )
    return model, opt_state, start_epoch, best, payload.get("best_checkpoint")


def _fit(config, prefix, train_set, val_set, extra, resumed, args):
    """
    Train one model configuration. ``<prefix>.last.json`` is rewritten every
    epoch; ``<prefix>.best.json`` whenever the best score improves.
    """
    last_path = prefix.with_suffix(".last.json")
    best_path = prefix.with_suffix(".best.json")
    model = HyperModel(config.head_config(), seed=config.seed)
    opt_state, start_epoch, earlier_best, best_file = None, 0, None, None
    if resumed is not None:
        model, opt_state, start_epoch, earlier_best, best_file = _resume_state(resumed, config, args.resume)

    def on_epoch_end(epoch, current, state, row, best):
        nonlocal best_file
        if best.epoch == epoch:
            best_file = save_checkpoint(best_path, current, extra={
                **extra, "best_epoch": epoch, "best_score": best.score_json(),
            })
        save_checkpoint(last_path, current, opt_state=state, epoch=epoch, extra={
            **extra,
            "best_epoch": best.epoch,
            "best_score": best.score_json(),
            "best_checkpoint": None if best_file is None else str(best_file),
        })

    result = train(model, train_set, config, val_set, opt_state, start_epoch, on_epoch_end,
                   progress=args.progress, best=earlier_best)
    model.load_state_dict(result.best_state)
    return model, result


def cmd_train(args):
    run = RunConfig.load(args.config)
    seed = run.resolve_seed(args.seed)
    data_path = run.path("data", args.data)
    out = run.path("checkpoint", args.out)
    dataset = read_dataset(data_path)
    base = _train_config(run, dataset.header, args, seed)
    train_set, val_set, test_set = split_dataset(dataset, seed)
    logger.info("split %d / %d / %d", len(train_set), len(val_set), len(test_set))
    resumed = load_checkpoint(args.resume) if args.resume is not None else None

    candidates = _candidate_pairs(run, args, base, resumed)
    fits = {}
    for pairs in candidates:
        config = replace(base, n_complex_pairs=pairs).validate()
        mode = _mode_name(pairs)
        prefix = out if len(candidates) == 1 else out.with_suffix(f".{mode}{out.suffix}")
        extra = {"split_seed": seed, "train_config": config.to_json(), "mode": mode}
        if len(candidates) > 1:
            logger.info("training %s mode (%d complex pairs)", mode, pairs)
        model, result = _fit(config, prefix, train_set, val_set, extra, resumed, args)
        fits[mode] = (model, result, config)

    scores = {mode: result.best_score for mode, (_, result, _) in fits.items()}
    chosen = min(scores, key=scores.get)
    model, result, config = fits[chosen]
    if len(fits) > 1:
        logger.info("selected %s mode by validation NLL %s", chosen, scores)
    score_record = {mode: (s if math.isfinite(s) else None) for mode, s in scores.items()}
    save_checkpoint(out, model, extra={
        "split_seed": seed, "train_config": config.to_json(), "mode": chosen, "mode_scores": score_record,
        "best_epoch": result.best_epoch, "best_score": score_record[chosen],
    })
    history_path = _records_to_csv(result.history, args.history or out.with_name(out.stem + "_history.csv"))
    RunRecord("train").update(
        seed=seed, data=str(data_path), train_config=config.to_json(), best_epoch=result.best_epoch,
        mode=chosen, mode_scores=score_record, resumed_from=None if args.resume is None else str(args.resume),
    ).write(out)
    final = result.history.iloc[-1] if len(result.history) else None
    if len(fits) > 1:
        print("🔀 " + ", ".join(f"{mode} mode validation NLL {s:.4f}" for mode, s in scores.items())
              + f": keeping {chosen}")
    print(f"✅ trained {len(result.history)} epochs (best epoch {result.best_epoch})")
    if final is not None:
        print(f"📊 final train NLL {final['train_nll']:.4f}, validation NLL {final['val_nll']:.4f}")
    print(f"📁 {out}  {history_path}")
    return 0


def _select_split(dataset, split, split_seed):
    if split == "all":
        return dataset
    if split_seed is None:
        raise ConfigError(f"--split {split} needs a checkpoint that records its split seed (or --seed)")
    train_set, val_set, test_set = split_dataset(dataset, split_seed)
    return {"train": train_set, "validation": val_set, "test": test_set}[split]


def _oracle_from_header(header):
    truth = header.get("ground_truth")
    if truth is None:
        raise DataError("dataset header has no ground_truth for --oracle")
    dynamics = SpectralDynamics.from_json(truth)
    return oracle_model(dynamics, header.get("x0_mean"), header.get("x0_cov"))


def cmd_eval(args):
    run = RunConfig.load(args.config)
    dataset = read_dataset(run.path("data", args.data))
    out_dir = run.path("out", args.out_dir)
    if args.oracle:
        model, split_seed = _oracle_from_header(dataset.header), args.seed
    else:
        model, payload = load_checkpoint(run.path("checkpoint", args.checkpoint))
        split_seed = args.seed if args.seed is not None else payload.get("split_seed")
    subset = _select_split(dataset, args.split, split_seed)
    cut = args.condition_until
    if cut is None:
        cut = dataset.header.get("eval_condition_until")
    report = evaluate(model, subset, condition_until=cut)

    out_dir.mkdir(parents=True, exist_ok=True)
    _records_to_csv(report.summary_table(), out_dir / "metrics.csv")
    _records_to_csv(report.per_prediction, out_dir / "per_prediction.csv")
    _records_to_csv(report.per_horizon, out_dir / "per_horizon.csv")
    _records_to_csv(report.per_seen, out_dir / "per_obs_count.csv")
    RunRecord("eval").update(
        split=args.split, condition_until=cut, oracle=args.oracle, metrics=report.as_dict(),
    ).write(out_dir)
    print(f"📊 MSE {report.mse:.5f}  NLL {report.nll:.5f}  "
          f"(naive MSE {report.naive_mse:.5f} vs model {report.model_mse_naive_subset:.5f} on the same subset)")
    print(f"📁 {out_dir}")
    return 0


def cmd_forecast(args):
    run = RunConfig.load(args.config)
    model, _ = load_checkpoint(run.path("checkpoint", args.checkpoint))
    traj = read_trajectory(args.trajectory)
    times = parse_times(args.times)
    with torch.no_grad():
        rollout = unroll(model, traj, query_times=times)
    rows = []
    for pred in rollout.predictions:
        variances = torch.diagonal(pred.cov)
        for dim in range(pred.mean.shape[0]):
            rows.append({
                "t": pred.t,
                "dim": dim,
                "mean": float(pred.mean[dim]),
                "var": float(variances[dim]),
                "observation": pred.observation is not None,
            })
    out = run.path("out", args.out)
    _records_to_csv(pd.DataFrame(rows, columns=["t", "dim", "mean", "var", "observation"]), out)
    RunRecord("forecast").update(trajectory=str(args.trajectory), times=args.times).write(out)
    print(f"✅ {len(rows)} forecast rows")
    print(f"📁 {out}")
    return 0


def cmd_spectrum(args):
    run = RunConfig.load(args.config)
    model, _ = load_checkpoint(run.path("checkpoint", args.checkpoint))
    dataset = read_dataset(run.path("data", args.data))
    table, summary = spectrum_report(model, dataset)
    out = run.path("out", args.out)
    _records_to_csv(table, out)
    _records_to_csv(summary.reset_index(names="component"), out.with_name(out.stem + "_summary.csv"))
    RunRecord("spectrum").update(summary=summary.to_dict()).write(out)

    truth = dataset.header.get("ground_truth")
    if truth is not None and truth.get("n") == 2:
        print("🔍 Ground truth")
        for line in ground_truth_lines(SpectralDynamics.from_json(truth).A.detach().numpy()):
            print(f"   {line}")
    print("📊 Estimated (mean ± std across trajectories)")
    for name, row in summary.iterrows():
        print(f"   {name}: {row['mean']:.4f} ± {row['std']:.4f}")
    for label, count in table["class"].value_counts().items():
        print(f"   {label}: {count} trajectories")
    print(f"📁 {out}")
    return 0


def _random_schedule(rng, horizon, k):
    cuts = np.sort(rng.uniform(0.0, horizon, 4))
    edges = np.concatenate([[0.0], cuts, [horizon]])
    return [
        ControlSegment(a, b, rng.normal(size=k))
        for a, b in zip(edges[:-1], edges[1:]) if b > a and rng.random() < 0.8
    ]


def _random_belief(rng, n):
    L = rng.normal(size=(n, n))
    return GaussianBelief(rng.normal(size=n), L @ L.T / n + 0.1 * np.eye(n), 0.0)


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def run_oracle_checks(seed, n_cases, horizon=5.0, riemann_dt=1e-5):
    """Cross-check the closed forms against independent oracles; returns a table."""
    rng = np.random.default_rng(seed)
    worst = {"propagate_vs_rk4": 0.0, "filter_vs_augmentation": 0.0, "integrals_vs_riemann": 0.0}
    for _ in range(n_cases):
        n = int(rng.choice([2, 4, 6]))
        dyn = random_spectral_dynamics(rng, n, int(rng.integers(0, n // 2 + 1)), m=min(3, n), k=2)
        schedule = _random_schedule(rng, horizon, 2)
        belief = _random_belief(rng, n)
        fast = propagate(belief, dyn, schedule, horizon)
        slow = moment_ode_oracle(dyn, schedule, belief, horizon)
        worst["propagate_vs_rk4"] = max(
            worst["propagate_vs_rk4"],
            _rel_err(fast.mu, slow.mu),
            _rel_err(fast.sigma, slow.sigma),
        )

        m = dyn.m
        mask = rng.random(m) < 0.6
        R = np.zeros((m, m)) if rng.random() < 0.5 else np.diag(rng.uniform(0.1, 1.0, m))
        obs = Observation(0.0, rng.normal(size=m), mask)
        direct = condition(belief, obs, R, dyn.alpha)
        oracle = condition_by_augmentation(belief, obs, R, dyn.alpha)
        worst["filter_vs_augmentation"] = max(
            worst["filter_vs_augmentation"],
            float(np.abs(direct.mu.numpy() - oracle.mu.numpy()).max()),
            float(np.abs(direct.sigma.numpy() - oracle.sigma.numpy()).max()),
        )

        u = rng.normal(size=dyn.k)
        analytic_c = control_integral_analytic(dyn.spectrum, dyn.basis, u, dyn.B, 0.0, 1.0)
        numeric_c = control_integral_numeric(dyn.spectrum, dyn.basis, lambda s: u, dyn.B, 0.0, 1.0, riemann_dt)
        analytic_q = noise_integral_analytic(dyn.spectrum, dyn.basis, dyn.Q, 0.0, 1.0)
        numeric_q = noise_integral_numeric(dyn.spectrum, dyn.basis, dyn.Q, 0.0, 1.0, riemann_dt)
        worst["integrals_vs_riemann"] = max(
            worst["integrals_vs_riemann"],
            float((analytic_c - numeric_c).abs().max()),
            float((analytic_q - numeric_q).abs().max()),
        )
    thresholds = {"propagate_vs_rk4": 1e-6, "filter_vs_augmentation": 1e-10, "integrals_vs_riemann": 1e-4}
    return pd.DataFrame([
        {"check": name, "n_cases": n_cases, "max_err": err, "threshold": thresholds[name],
         "passed": err <= thresholds[name]}
        for name, err in worst.items()
    ])


def cmd_oracle_check(args):
    seed = RunConfig.load(args.config).resolve_seed(args.seed)
    table = run_oracle_checks(seed, args.n_cases)
    for _, row in table.iterrows():
        glyph = "✅" if row["passed"] else "❌"
        print(f"{glyph} {row['check']}: max error {row['max_err']:.3e} (threshold {row['threshold']:.0e})")
    target = Path("oracle-check.csv")
    if args.out is not None:
        target = _records_to_csv(table, args.out)
    record = RunRecord("oracle-check").update(
        seed=seed, n_cases=args.n_cases, passed=bool(table["passed"].all()),
        max_errors=dict(zip(table["check"], table["max_err"].astype(float))),
    ).write(target)
    print(f"📁 {record}")
    if not table["passed"].all():
        raise NumericError("oracle check failed")
    return 0


def cmd_rollout(args):
    seed = RunConfig.load(args.config).resolve_seed(args.seed)
    env_config = DosingEnvConfig(support=args.support).validate()
    rng = np.random.default_rng(seed)
    context, observations, _, rows = run_episode(env_config, rng, policy=args.policy, dose=args.dose)
    out = Path(args.out)
    _records_to_csv(pd.DataFrame(rows, columns=["t", "dose", "y_obs", "reward"]), out)
    RunRecord("rollout").update(
        seed=seed, policy=args.policy, dose=args.dose, context=context.tolist(), env_config=env_config.to_json(),
    ).write(out)
    total = sum(row["reward"] for row in rows)
    print(f"✅ {len(rows)} steps, {len(observations)} lab results, total reward {total:.4f}")
    print(f"📁 {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="eigensde", description="Neural eigen-SDE forecasting")
    parser.add_argument("--log-level", default="INFO", help="logging level (DEBUG, INFO, WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, help="JSON run config; flags override its values")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (required for randomized commands)")
        return p

    p = common(sub.add_parser("generate", help="generate a synthetic benchmark dataset"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n-traj", type=int)
    p.add_argument("--obs-per-traj", type=int, help="fixed observation count (sparsity variants)")
    p.add_argument("--obs-range", type=int, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--support", type=float)
    p.add_argument("--coupling", type=float)
    p.add_argument("--observation-noise", type=float)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train a hypernetwork model"))
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path, help="best-validation checkpoint path")
    p.add_argument("--history", type=Path, help="loss history CSV")
    p.add_argument("--resume", type=Path, help="resumable checkpoint (*.last.json) to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--interval-dt", type=float)
    p.add_argument("--subsample-prob", type=float)
    p.add_argument("--penalty-weight", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-complex-pairs", type=int)
    p.add_argument("--stable", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--ablate-hypernet", action="store_true", help="feed the hypernetwork a constant context")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint (or the ground truth) on a dataset"))
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--split", choices=["all", "train", "validation", "test"], default="all")
    p.add_argument("--condition-until", type=float, help="absorb observations up to this time only")
    p.add_argument("--oracle", action="store_true", help="use the dataset's ground-truth dynamics")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("forecast", help="forecast one trajectory at query times"), seed=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--times", required=True, help="start:stop:step or t1,t2,...")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_forecast)

    p = common(sub.add_parser("spectrum", help="per-trajectory eigenvalue report"), seed=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_spectrum)

    p = common(sub.add_parser("oracle-check", help="closed forms vs numerical oracles"))
    p.add_argument("--n-cases", type=int, default=100)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_oracle_check)

    p = common(sub.add_parser("rollout", help="roll out the dosing simulator"))
    p.add_argument("--policy", choices=["feedback", "constant"], default="feedback")
    p.add_argument("--dose", type=float, default=1.0)
    p.add_argument("--support", type=float, default=48.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_rollout)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except EigenSDEError as exc:
        print(f"❌ {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
