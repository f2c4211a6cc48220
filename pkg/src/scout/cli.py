"""Command-line orchestration: gen / train / eval / logdet-check.

Config precedence is CLI flags > --config file > built-in defaults.
Every subcommand writes a run_meta.json with the fully resolved config;
pointing --config at that file reproduces the run byte-for-byte
(wallclock columns aside).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mtr
from . import model as mdl
from . import serialize as ser
from . import trainer as trn
from .graphs import count_simple_cycles, er_sample, er_sample_with_cycle_count
from .rng import NoiseFamily, Rng
from .simulator import (
    Dataset,
    FixedPointError,
    InterventionKind,
    InterventionSpec,
    MechanismKind,
    generate_dataset,
    make_sem,
    rescale_to_lipschitz,
    sample_edge_weights,
    single_node_design,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

CYCLE_COUNT_CAP = 100_000

GEN_DEFAULTS = {
    "nodes": 10,
    "density": 2.0,
    "sem": "nonlinear",
    "noise": "gaussian",
    "noise_param1": None,  # family-specific default resolved below
    "noise_param2": None,
    "intervention": "shift",
    "shift": 2.0,
    "scale": 2.0,
    "alpha": -1.0,
    "hard_shift": 0.0,
    "samples": 1000,
    "seed": 0,
    "lipschitz": 0.9,
    "design": "single-node",
    "cycles": None,
    "trials": 1,
}

NOISE_DEFAULTS = {
    "gaussian": (0.0, 0.25),
    "exponential": (2.0, 0.0),
    "gumbel": (0.0, 0.5),
}

TRAIN_DEFAULTS = {
    "lambda_g": 0.001,
    "lambda_i": 0.01,
    "lr": 0.01,
    "batch_size": 512,
    "epochs": 200,
    "tau_g": 1.0,
    "tau_i": 0.5,
    "poisson_mean": 4.0,
    "lipschitz": 0.9,
    "logdet": "series",
    "seed": 0,
    "precondition": False,
    "checkpoint_every": 0,
    "holdout_frac": 0.0,
    "holdout_seed": 0,
}

EVAL_DEFAULTS = {
    "holdout_frac": 0.0,
    "holdout_seed": 0,
    "kl_bins": 100,
}

LOGDET_DEFAULTS = {
    "nodes": 10,
    "density": 2.0,
    "draws": 100_000,
    "poisson_mean": 4.0,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def holdout_split(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(test_rows, train_rows) for a deterministic held-out fraction."""
    if not 0 < frac < 1:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    perm = Rng(seed).substream("holdout").permutation(n)
    n_test = max(1, int(round(frac * n)))
    return perm[:n_test], perm[n_test:]


def _workers() -> int:
    raw = os.environ.get("SCOUT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SCOUT_THREADS must be an integer, got {raw!r}")


def _resolve(defaults: dict, config_path: str | None, cli_values: dict) -> dict:
    merged = dict(defaults)
    if config_path:
        try:
            obj = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config file: {err}")
        if "config" in obj and isinstance(obj["config"], dict):
            obj = obj["config"]  # run_meta.json
        unknown = set(obj) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(obj)
    merged.update({k: v for k, v in cli_values.items() if v is not None})
    return merged


def _write_run_meta(out_dir: Path, command: str, config: dict) -> None:
    meta = {"command": command, "version": __version__, "config": config}
    (out_dir / "run_meta.json").write_text(ser.dumps_json(meta))


def _noise_family(cfg: dict) -> NoiseFamily:
    kind = cfg["noise"]
    if kind not in NOISE_DEFAULTS:
        raise ConfigError(f"unknown noise family {kind!r}")
    p1, p2 = NOISE_DEFAULTS[kind]
    if cfg["noise_param1"] is not None:
        p1 = cfg["noise_param1"]
    if cfg["noise_param2"] is not None:
        p2 = cfg["noise_param2"]
    try:
        return NoiseFamily(kind, p1, p2)
    except ValueError as err:
        raise ConfigError(str(err))


def _build_spec(cfg: dict, d: int) -> InterventionSpec:
    kind = cfg["intervention"]
    try:
        kind = InterventionKind(kind)
    except ValueError:
        raise ConfigError(f"unknown intervention kind {cfg['intervention']!r}")
    if kind is InterventionKind.NONE or cfg["design"] == "obs":
        targets = ((),)
    elif cfg["design"] == "single-node":
        targets = single_node_design(d)
    else:
        raise ConfigError(f"unknown experiment design {cfg['design']!r}")
    try:
        return InterventionSpec(
            kind,
            targets,
            shift=cfg["shift"],
            scale=cfg["scale"],
            alpha=cfg["alpha"],
            hard_shift=cfg["hard_shift"],
        )
    except ValueError as err:
        raise ConfigError(str(err))


def _gen_one(cfg: dict, out_dir: Path, seed: int) -> dict:
    rng = Rng(seed)
    d = int(cfg["nodes"])
    if d < 2:
        raise ConfigError("need at least 2 nodes")
    if cfg["cycles"] is None:
        graph = er_sample(d, cfg["density"], rng.substream("graph"))
    else:
        graph = er_sample_with_cycle_count(
            d, cfg["density"], int(cfg["cycles"]), rng.substream("graph")
        )
    noise = _noise_family(cfg)
    try:
        sem = make_sem(
            graph, MechanismKind(cfg["sem"]), noise, rng.substream("sem"), cfg["lipschitz"]
        )
    except ValueError as err:
        raise ConfigError(str(err))
    spec = _build_spec(cfg, d)
    dataset = generate_dataset(
        sem, spec, int(cfg["samples"]), rng.substream("data"), workers=_workers()
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "data.csv").write_text(ser.dataset_to_csv(dataset))
    (out_dir / "truth.json").write_text(
        ser.dumps_json(ser.truth_to_obj(graph, spec, seed))
    )
    n_cycles = count_simple_cycles(graph, cap=CYCLE_COUNT_CAP)
    cycles = f">={n_cycles}" if n_cycles >= CYCLE_COUNT_CAP else str(n_cycles)
    return {
        "d": d,
        "K": dataset.n_experiments,
        "rows": dataset.n,
        "edges": graph.n_edges(),
        "cycles": cycles,
    }


def cmd_gen(args) -> int:
    cfg = _resolve(GEN_DEFAULTS, args.config, _cli_dict(args, GEN_DEFAULTS))
    out_dir = Path(args.out)
    trials = int(cfg["trials"])
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_meta(out_dir, "gen", cfg)
    for t in range(trials):
        target = out_dir if trials == 1 else out_dir / f"trial{t:03d}"
        summary = _gen_one(cfg, target, int(cfg["seed"]) + t)
        print(
            f"gen: d={summary['d']} K={summary['K']} rows={summary['rows']} "
            f"edges={summary['edges']} cycles={summary['cycles']} -> {target}"
        )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args.config, _cli_dict(args, TRAIN_DEFAULTS))
    data_path = Path(args.data)
    if not data_path.exists():
        raise ConfigError(f"dataset not found: {data_path}")
    dataset = ser.dataset_from_csv(data_path.read_text())
    frac = float(cfg["holdout_frac"])
    if frac > 0:
        # drop the same rows `scout eval --holdout-frac` will score
        train_rows = holdout_split(len(dataset.x), frac, int(cfg["holdout_seed"]))[1]
        dataset = Dataset(
            x=dataset.x[train_rows],
            experiment=dataset.experiment[train_rows],
            n_experiments=dataset.n_experiments,
        )

    truth_graph = truth_targets = None
    if args.truth:
        truth_graph, truth_targets = ser.truth_from_obj(
            json.loads(Path(args.truth).read_text())
        )
        dataset.truth_graph = truth_graph
        dataset.truth_targets = truth_targets

    known_targets = None
    if args.known_targets:
        _, known_targets = ser.truth_from_obj(
            json.loads(Path(args.known_targets).read_text())
        )

    try:
        config = trn.TrainConfig(
            lambda_g=cfg["lambda_g"],
            lambda_i=cfg["lambda_i"],
            lr=cfg["lr"],
            batch_size=int(cfg["batch_size"]),
            epochs=int(cfg["epochs"]),
            tau_g=cfg["tau_g"],
            tau_i=cfg["tau_i"],
            poisson_mean=cfg["poisson_mean"],
            lipschitz=cfg["lipschitz"],
            logdet_mode=cfg["logdet"],
            seed=int(cfg["seed"]),
            use_preconditioner=bool(cfg["precondition"]),
        )
    except ValueError as err:
        raise ConfigError(str(err))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_meta(out_dir, "train", cfg)

    ckpt_config = {**cfg, "d": dataset.d, "K": dataset.n_experiments}
    every = int(cfg["checkpoint_every"])

    def snapshot(state, epoch):
        if every > 0 and epoch % every == 0:
            ser.save_checkpoint(
                out_dir / f"checkpoint_epoch{epoch}.json",
                mdl.state_to_arrays(state),
                ckpt_config,
                epoch,
            )

    try:
        result = trn.train(
            dataset, config, known_targets=known_targets, epoch_callback=snapshot
        )
    except trn.TrainingDiverged as err:
        ser.save_checkpoint(
            out_dir / "checkpoint_last_good.json",
            mdl.state_to_arrays(err.last_good_state),
            ckpt_config,
            err.epoch - 1,
        )
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_NUMERICAL

    ser.save_checkpoint(
        out_dir / "checkpoint.json",
        mdl.state_to_arrays(result.state),
        ckpt_config,
        config.epochs,
    )
    (out_dir / "metrics.csv").write_text(result.metrics_csv())
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"train: epochs={config.epochs} final_loss={last['mean_loss']:.6g} "
            f"graph_auprc={last['graph_auprc']} target_auprc={last['target_auprc']}"
        )
    else:
        print("train: epochs=0 (checkpoint equals initialization)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args.config, _cli_dict(args, EVAL_DEFAULTS))
    ckpt = ser.load_checkpoint(args.checkpoint)
    state = mdl.state_from_arrays(ckpt)
    dataset = ser.dataset_from_csv(Path(args.data).read_text())

    x, kvec = dataset.x, dataset.experiment
    frac = float(cfg["holdout_frac"])
    if frac > 0:
        test = holdout_split(len(x), frac, int(cfg["holdout_seed"]))[0]
        x, kvec = x[test], kvec[test]

    est_rng = Rng(int(cfg["holdout_seed"])).substream("eval-estimator")
    out = {
        "graph_auprc": None,
        "target_auprc": None,
        "nll": mtr.heldout_nll(state, x, kvec, est_rng=est_rng),
        "kl_summary": None,
        "pr_curve": None,
        "n_rows": int(len(x)),
    }

    if args.truth:
        truth_graph, truth_targets = ser.truth_from_obj(
            json.loads(Path(args.truth).read_text())
        )
        edge_scores = mdl.edge_probabilities(state)
        out["graph_auprc"] = mtr.graph_recovery(edge_scores, truth_graph)
        out["target_auprc"] = mtr.target_recovery(
            mdl.intervention_probabilities(state), truth_targets
        )
        d = truth_graph.d
        off = ~np.eye(d, dtype=bool)
        curve = mtr.pr_curve(edge_scores[off], truth_graph.adjacency[off])
        out["pr_curve"] = [list(p) for p in curve.points]
        # KL diagnostic needs an observational experiment in the data
        obs_rows = np.flatnonzero(truth_targets.sum(axis=1) == 0)
        if obs_rows.size:
            obs_mask = np.isin(dataset.experiment, obs_rows)
            if obs_mask.any() and not obs_mask.all():
                _, summary = mtr.histogram_kl(
                    dataset.x[~obs_mask],
                    dataset.experiment[~obs_mask],
                    dataset.x[obs_mask],
                    bins=int(cfg["kl_bins"]),
                )
                out["kl_summary"] = summary

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_meta(out_dir, "eval", cfg)
    (out_dir / "metrics.json").write_text(ser.dumps_json(out))
    print(
        f"eval: nll={out['nll']:.6g} graph_auprc={out['graph_auprc']} "
        f"target_auprc={out['target_auprc']}"
    )
    return EXIT_OK


def cmd_logdet_check(args) -> int:
    cfg = _resolve(LOGDET_DEFAULTS, args.config, _cli_dict(args, LOGDET_DEFAULTS))
    d = int(cfg["nodes"])
    rng = Rng(int(cfg["seed"]))
    graph = er_sample(d, cfg["density"], rng.substream("graph"))
    weights = rescale_to_lipschitz(
        sample_edge_weights(graph, rng.substream("weights")), 0.9
    )
    jac = weights.T  # constant Jacobian of the linear mechanism
    exact = mdl.exact_logdet(jac)
    draws = mdl.logdet_series_batch(
        jac, int(cfg["draws"]), cfg["poisson_mean"], rng.substream("estimator")
    )
    se = float(draws.std(ddof=1) / np.sqrt(len(draws))) if len(draws) > 1 else 0.0
    report = {
        "d": d,
        "edges": graph.n_edges(),
        "draws": int(cfg["draws"]),
        "poisson_mean": cfg["poisson_mean"],
        "exact_logdet": exact,
        "estimate_mean": float(draws.mean()),
        "estimate_variance": float(draws.var(ddof=1)) if len(draws) > 1 else 0.0,
        "standard_error": se,
        "abs_error": abs(float(draws.mean()) - exact),
        "within_3_se": bool(abs(float(draws.mean()) - exact) <= 3 * se)
        if se > 0
        else bool(float(draws.mean()) == exact),
        "reference_variance": 3.297e-3,
    }
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_meta(out_dir, "logdet-check", cfg)
    (out_dir / "logdet_check.json").write_text(ser.dumps_json(report))
    print(
        f"logdet-check: exact={exact:.6g} mean={report['estimate_mean']:.6g} "
        f"var={report['estimate_variance']:.4g} se={se:.4g} "
        f"within_3_se={report['within_3_se']}"
    )
    return EXIT_OK


def _cli_dict(args, defaults: dict) -> dict:
    return {k: getattr(args, k, None) for k in defaults}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scout",
        description="Cyclic causal discovery under soft interventions with unknown targets.",
    )
    parser.add_argument("--version", action="version", version=f"scout {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset with ground truth")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", help="JSON config or run_meta.json to rerun")
    gen.add_argument("--nodes", type=int, help="number of variables d")
    gen.add_argument("--density", type=float, help="expected outgoing edge density")
    gen.add_argument("--sem", choices=["linear", "nonlinear"], help="mechanism kind")
    gen.add_argument(
        "--noise", choices=["gaussian", "exponential", "gumbel"], help="noise family"
    )
    gen.add_argument("--noise-param1", dest="noise_param1", type=float,
                     help="mean (gaussian), rate (exponential) or location (gumbel)")
    gen.add_argument("--noise-param2", dest="noise_param2", type=float,
                     help="variance (gaussian) or scale (gumbel)")
    gen.add_argument(
        "--intervention",
        choices=["shift", "scale", "noisy", "hard", "none"],
        help="soft intervention kind ('none' = observational only)",
    )
    gen.add_argument("--shift", type=float, help="shift amount")
    gen.add_argument("--scale", type=float, help="scale multiplier for the noise draw")
    gen.add_argument("--alpha", type=float, help="noisy-function multiplier, |alpha| <= 1")
    gen.add_argument("--hard-shift", dest="hard_shift", type=float,
                     help="shift added to the clamped noise under hard interventions")
    gen.add_argument("--samples", type=int, help="samples per experiment")
    gen.add_argument("--seed", type=int, help="master seed")
    gen.add_argument("--lipschitz", type=float, help="contractivity bound in (0,1)")
    gen.add_argument("--design", choices=["single-node", "obs"], help="experiment design")
    gen.add_argument("--cycles", type=int,
                     help="rejection-sample a graph with exactly this many simple cycles")
    gen.add_argument("--trials", type=int, help="write N independent trials (seed+t)")

    train = sub.add_parser("train", help="run the training loop on a dataset")
    train.add_argument("--data", required=True, help="dataset CSV")
    train.add_argument("--truth", help="truth sidecar JSON for metric logging")
    train.add_argument("--known-targets", dest="known_targets",
                       help="truth JSON whose target matrix freezes psi")
    train.add_argument("--out", required=True)
    train.add_argument("--config", help="JSON config or run_meta.json to rerun")
    train.add_argument("--lambda-g", dest="lambda_g", type=float, help="graph sparsity weight")
    train.add_argument("--lambda-i", dest="lambda_i", type=float, help="target sparsity weight")
    train.add_argument("--lr", type=float, help="Adam learning rate")
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--tau-g", dest="tau_g", type=float, help="graph mask temperature")
    train.add_argument("--tau-i", dest="tau_i", type=float, help="target mask temperature")
    train.add_argument("--poisson-mean", dest="poisson_mean", type=float,
                       help="mean of the series cutoff distribution")
    train.add_argument("--lipschitz", type=float)
    train.add_argument("--logdet", choices=["series", "exact"], help="log-det path")
    train.add_argument("--seed", type=int)
    train.add_argument("--precondition", action="store_const", const=True,
                       help="learn a diagonal preconditioner")
    train.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    train.add_argument("--holdout-frac", dest="holdout_frac", type=float,
                       help="exclude this fraction of rows from training "
                            "(scored later by eval with the same flags)")
    train.add_argument("--holdout-seed", dest="holdout_seed", type=int)

    ev = sub.add_parser("eval", help="metrics for a checkpoint against truth / held-out data")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--truth")
    ev.add_argument("--out", required=True)
    ev.add_argument("--config")
    ev.add_argument("--holdout-frac", dest="holdout_frac", type=float,
                    help="fraction of rows held out for the NLL (0 = all rows)")
    ev.add_argument("--holdout-seed", dest="holdout_seed", type=int)
    ev.add_argument("--kl-bins", dest="kl_bins", type=int)

    ld = sub.add_parser("logdet-check", help="validate the log-det estimator on a linear SEM")
    ld.add_argument("--out", required=True)
    ld.add_argument("--config")
    ld.add_argument("--nodes", type=int)
    ld.add_argument("--density", type=float)
    ld.add_argument("--draws", type=int)
    ld.add_argument("--poisson-mean", dest="poisson_mean", type=float)
    ld.add_argument("--seed", type=int)
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "logdet-check": cmd_logdet_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FixedPointError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
