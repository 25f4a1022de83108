"""Command-line experiment harness.

Every subcommand writes its data files plus a ``manifest.json`` holding the
full parameter set, so ``cmdp-lab rerun DIR/manifest.json`` regenerates the
same files bit for bit. Exit codes: 0 success, 2 usage, 3 numerical-domain
error, 4 failed check.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__
from ._io import read_json, write_csv, write_json
from .bounds import certify_policy_transfer, certify_theorem1, certify_theorem3
from .cse import enhanced_rollout_value, true_rollout_value
from .envs import SimpleDirection, pendulum_gradcheck
from .errors import BoundViolated, ConfigInvalid, DomainError
from .tabular import build_cliffwalker, error_scaling_experiment, scaling_perturbations
from .trainer import (
    MODES,
    QTable,
    TrainConfig,
    compare_modes,
    default_test_contexts,
    evaluate,
    ordering_check,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_CHECK = 0, 2, 3, 4
GRADCHECK_TOL = 1e-3


class UsageError(ValueError):
    pass


class CheckFailed(Exception):
    pass


# --- argument parsing helpers ---------------------------------------------------


def parse_seeds(text):
    """``"3"``, ``"0..9"`` (inclusive) or ``"1,4,7"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def parse_grid(text):
    """``log:lo:hi:n``, ``lin:lo:hi:n`` or a comma list of values."""
    text = str(text).strip()
    try:
        if text.startswith(("log:", "lin:")):
            kind, lo, hi, n = text.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
            if n < 1:
                raise ValueError
            if kind == "log":
                if lo <= 0 or hi <= 0:
                    raise ValueError
                return np.logspace(np.log10(lo), np.log10(hi), n)
            return np.linspace(lo, hi, n)
        values = np.array([float(x) for x in text.split(",") if x.strip()])
        if values.size == 0:
            raise ValueError
        return values
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from None


def parse_vector(text):
    try:
        return [float(x) for x in str(text).split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad vector {text!r}") from None


def positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# --- subcommands ----------------------------------------------------------------


def run_cliffwalk_scaling(p, out):
    mdp = build_cliffwalker(p["rows"], p["cols"], p["variant"].upper(), p["c0"], p["gamma"])
    dcs = scaling_perturbations(p["n_points"], p["dc_min"], p["dc_max"], include_zero=True)
    mode = "policy_eval" if p["mode"] == "eval" else "control"
    res = error_scaling_experiment(mdp, dcs, mode=mode, fit_points=p["fit_points"])
    write_csv(os.path.join(out, "scaling.csv"), ["dc_norm", "q_error"],
              zip(res.dc_norms, res.errors))
    summary = {"slope": res.slope, "intercept": res.intercept, "r_squared": res.r_squared,
               "fit_points": res.fit_points, "monotone": res.monotone}
    write_json(os.path.join(out, "summary.json"), summary)
    return ["scaling.csv", "summary.json"], summary


def simpledir_errors(dc_norms, horizon, gamma, c0, direction, s0, action):
    env = SimpleDirection()
    c0 = np.asarray(c0, dtype=float)
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    act = np.asarray(action, dtype=float)

    def policy(s):
        return act

    rows = []
    for r in dc_norms:
        dc = r * u
        v_true = true_rollout_value(env, policy, c0 + dc, horizon, gamma, s0)
        v_ce = enhanced_rollout_value(env, policy, c0, dc, horizon, gamma, s0)
        closed = r**2 * (1 - gamma**horizon) / (1 - gamma) if gamma != 1 else r**2 * horizon
        rows.append((float(r), abs(v_true - v_ce), float(closed)))
    return rows


def run_simpledir_error(p, out):
    grid = parse_grid(p["dc_grid"])
    rows = simpledir_errors(grid, p["h"], p["gamma"], p["c0"], p["direction"], p["s0"],
                            p["action"])
    write_csv(os.path.join(out, "simpledir_error.csv"),
              ["dc_norm", "v_error", "closed_form_error"], rows)
    dev = max(abs(v - cf) for _, v, cf in rows)
    return ["simpledir_error.csv"], {"max_abs_deviation": dev, "rows": len(rows)}


def run_pendulum_gradcheck(p, out):
    rep = pendulum_gradcheck(p["trials"], p["steps"], p["h"], p["seed"], p["dt"])
    rep["passed"] = bool(rep["max_rel_error"] < GRADCHECK_TOL)
    write_json(os.path.join(out, "gradcheck.json"), rep)
    if not rep["passed"]:
        raise CheckFailed(f"gradcheck failed; worst case {rep['worst']}")
    return ["gradcheck.json"], rep


def run_bounds_check(p, out):
    gamma_range = (p["gamma_min"], p["gamma_max"])
    if p["theorem"] == "1":
        rep = certify_theorem1(p["trials"], p["states"], p["actions"], p["seed"], gamma_range)
    elif p["theorem"] == "3":
        rep = certify_theorem3(p["trials"], p["states"], p["actions"], p["seed"], gamma_range)
    else:
        rep = certify_policy_transfer(p["trials"], p["states"], p["actions"], p["seed"])
    write_json(os.path.join(out, f"theorem{p['theorem']}.json"), rep)
    return [f"theorem{p['theorem']}.json"], rep


def _train_config(p, mode, seed):
    return TrainConfig(
        mode=mode,
        epsilon_perturb=p["epsilon_perturb"],
        episodes=p["episodes"],
        learning_rate=p["learning_rate"],
        epsilon_greedy=p["epsilon_greedy"],
        seed=seed,
        updates_per_episode=p["updates"],
        batch_size=p["batch_size"],
    ).validate()


def run_train(p, out):
    files, returns = [], {}
    curve = []
    for seed in p["seeds"]:
        res = train(_train_config(p, p["mode"], seed))
        name = f"q_{p['mode']}_seed{seed}.json"
        res.q.to_json(os.path.join(out, name), meta={"mode": p["mode"], "seed": seed})
        files.append(name)
        curve.extend((p["mode"], seed, i, r) for i, r in enumerate(res.episode_returns))
        returns[seed] = float(np.mean(res.episode_returns[-100:]))
    write_csv(os.path.join(out, "learning_curve.csv"), ["mode", "seed", "episode", "return"],
              curve)
    return files + ["learning_curve.csv"], {"final_mean_return": returns}


EVAL_HEADER = ["mode", "seed", "context_x", "context_y", "mean_return", "stderr"]


def _contexts(p):
    if p.get("contexts"):
        v = parse_vector(p["contexts"])
        if len(v) % 2:
            raise UsageError("--contexts needs an even number of values")
        return np.array(v).reshape(-1, 2)
    return default_test_contexts()


def run_eval(p, out):
    contexts = _contexts(p)
    rows = []
    for path in p["q"]:
        q, meta = QTable.from_json(path, with_meta=True)
        rep = evaluate(q, contexts, p["episodes_per_context"], seed=meta.get("seed", 0))
        for r in rep.to_rows():
            rows.append({"mode": meta.get("mode", ""), "seed": meta.get("seed", 0), **r})
    write_csv(os.path.join(out, "eval.csv"), EVAL_HEADER, rows)
    return ["eval.csv"], {"rows": len(rows)}


def run_compare(p, out):
    base = _train_config(p, "baseline", p["seeds"][0])
    rows, summary = compare_modes(base, p["seeds"], _contexts(p), tuple(p["modes"]),
                                  p["episodes_per_context"])
    write_csv(os.path.join(out, "compare.csv"), EVAL_HEADER, rows)
    table = [(m, s["ring_mean"], s["ring_ci95"], s["ring_mean"] - s["ring_ci95"],
              s["ring_mean"] + s["ring_ci95"]) for m, s in summary.items()]
    write_csv(os.path.join(out, "compare_summary.csv"),
              ["mode", "ring_mean", "ci95_halfwidth", "ci95_low", "ci95_high"], table)
    report = {"summary": summary}
    if set(MODES) <= set(p["modes"]):
        report["ordering"] = ordering_check(summary)
    write_json(os.path.join(out, "compare_summary.json"), report)
    if p["check"] and "ordering" in report and not all(report["ordering"].values()):
        raise CheckFailed(f"mode ordering not met: {report['ordering']}")
    return ["compare.csv", "compare_summary.csv", "compare_summary.json"], report


RUNNERS = {
    "cliffwalk-scaling": run_cliffwalk_scaling,
    "simpledir-error": run_simpledir_error,
    "pendulum-gradcheck": run_pendulum_gradcheck,
    "bounds-check": run_bounds_check,
    "train": run_train,
    "eval": run_eval,
    "compare": run_compare,
}


# --- parser ---------------------------------------------------------------------


def _add_training_args(sp, seeds="0"):
    sp.add_argument("--env", default="simpledir", choices=["simpledir"])
    sp.add_argument("--seeds", type=parse_seeds, default=parse_seeds(seeds))
    sp.add_argument("--episodes", type=positive_int, default=TrainConfig.episodes)
    sp.add_argument("--epsilon-perturb", type=float, default=TrainConfig.epsilon_perturb)
    sp.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    sp.add_argument("--epsilon-greedy", type=float, default=TrainConfig.epsilon_greedy)
    sp.add_argument("--updates", type=positive_int, default=TrainConfig.updates_per_episode)
    sp.add_argument("--batch-size", type=positive_int, default=TrainConfig.batch_size)


def build_parser():
    parser = argparse.ArgumentParser(prog="cmdp-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("cliffwalk-scaling", help="CEBE error vs perturbation on the cliff grid")
    sp.add_argument("--rows", type=positive_int, default=5)
    sp.add_argument("--cols", type=positive_int, default=6)
    sp.add_argument("--c0", type=positive_float, default=0.1)
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--variant", choices=["a", "b", "A", "B"], default="a")
    sp.add_argument("--n-points", type=int, default=100)
    sp.add_argument("--fit-points", type=positive_int, default=10)
    sp.add_argument("--dc-min", type=positive_float, default=1e-4)
    sp.add_argument("--dc-max", type=positive_float, default=1e-1)
    sp.add_argument("--mode", choices=["eval", "control"], default="eval")

    sp = sub.add_parser("simpledir-error", help="enhanced vs true rollout values")
    sp.add_argument("--h", type=positive_int, default=10)
    sp.add_argument("--gamma", type=float, default=0.9)
    sp.add_argument("--dc-grid", type=str, default="log:1e-4:1e-1:50")
    sp.add_argument("--c0", type=parse_vector, default=[0.0, 0.0])
    sp.add_argument("--direction", type=parse_vector, default=[1.0, 1.0])
    sp.add_argument("--s0", type=parse_vector, default=[0.0, 0.0])
    sp.add_argument("--action", type=parse_vector, default=[1.0, 1.0])

    sp = sub.add_parser("pendulum-gradcheck", help="sensitivities vs finite differences")
    sp.add_argument("--steps", type=positive_int, default=50)
    sp.add_argument("--h", type=positive_float, default=1e-5)
    sp.add_argument("--trials", type=positive_int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dt", type=positive_float, default=0.02)

    sp = sub.add_parser("bounds-check", help="random certification of the stability bounds")
    sp.add_argument("--theorem", choices=["1", "3", "4"], default="1")
    sp.add_argument("--trials", type=positive_int, default=200)
    sp.add_argument("--states", type=positive_int, default=5)
    sp.add_argument("--actions", type=positive_int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gamma-min", type=float, default=None)
    sp.add_argument("--gamma-max", type=float, default=None)

    sp = sub.add_parser("train", help="train Q tables")
    _add_training_args(sp)
    sp.add_argument("--mode", choices=MODES, default="baseline")

    sp = sub.add_parser("eval", help="evaluate saved Q tables")
    sp.add_argument("--q", nargs="+", required=True)
    sp.add_argument("--contexts", type=str, default=None)
    sp.add_argument("--episodes-per-context", type=positive_int, default=64)

    sp = sub.add_parser("compare", help="train and compare all modes over seeds")
    _add_training_args(sp, seeds="0..9")
    sp.add_argument("--modes", type=lambda t: t.split(","), default=list(MODES))
    sp.add_argument("--contexts", type=str, default=None)
    sp.add_argument("--episodes-per-context", type=positive_int, default=64)
    sp.add_argument("--check", action="store_true", help="exit 4 if the ordering fails")

    for name, sp in sub.choices.items():
        sp.add_argument("--out", default=os.path.join("runs", name))

    sp = sub.add_parser("rerun", help="rerun a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None)
    return parser


def _normalise(command, p):
    """Fill defaults that depend on other arguments and validate ranges."""
    p = dict(p)
    p.pop("command", None)
    if command in ("cliffwalk-scaling", "simpledir-error"):
        if not 0 < p["gamma"] <= 1 or (command == "cliffwalk-scaling" and p["gamma"] >= 1):
            raise UsageError("gamma out of range")
    if command == "cliffwalk-scaling":
        p["variant"] = p["variant"].lower()
        if p["n_points"] < 0:
            raise UsageError("--n-points must be >= 0")
    if command == "simpledir-error":
        parse_grid(p["dc_grid"])
    if command == "bounds-check":
        lo, hi = (0.05, 0.99) if p["theorem"] == "1" else (0.01, 0.1)
        p["gamma_min"] = lo if p["gamma_min"] is None else p["gamma_min"]
        p["gamma_max"] = hi if p["gamma_max"] is None else p["gamma_max"]
        if not 0 < p["gamma_min"] <= p["gamma_max"] < 1:
            raise UsageError("need 0 < gamma-min <= gamma-max < 1")
    if command == "compare":
        bad = [m for m in p["modes"] if m not in MODES]
        if bad:
            raise UsageError(f"unknown mode(s) {bad}")
    if command in ("train", "compare"):
        if not p["seeds"]:
            raise UsageError("empty seed list")
        if command == "compare" and len(p["seeds"]) < 2:
            raise UsageError("compare needs at least two seeds")
    if command == "eval":
        p["q"] = [os.path.abspath(x) for x in p["q"]]
    p["out"] = os.path.abspath(p["out"])
    return p


def execute(command, params):
    """Run a subcommand and write its manifest; returns the report."""
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    data = {k: v for k, v in params.items() if k != "out"}
    files, report = RUNNERS[command](params, out)
    manifest = {
        "subcommand": command,
        "params": data,
        "seed": data.get("seed", data.get("seeds")),
        "version": __version__,
        "outputs": files,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    return report


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == "rerun":
            manifest = read_json(args.manifest)
            command = manifest["subcommand"]
            if command not in RUNNERS:
                raise UsageError(f"unknown subcommand {command!r} in manifest")
            params = dict(manifest["params"])
            out = args.out or os.path.dirname(os.path.abspath(args.manifest))
            params["out"] = os.path.abspath(out)
        else:
            command = args.command
            params = _normalise(command, vars(args))
        report = execute(command, params)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except BoundViolated as exc:
        print(f"bound violated: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (UsageError, ConfigInvalid, argparse.ArgumentTypeError, OSError, KeyError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _print_report(command, report)
    return EXIT_OK


def _print_report(command, report):
    import json

    from ._io import _jsonable

    print(f"{command}: {json.dumps(_jsonable(report), sort_keys=True)}")


if __name__ == "__main__":
    sys.exit(main())
