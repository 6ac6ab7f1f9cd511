"""Command-line entry point.

Every command resolves its settings from three layers, later layers winning:
command and family defaults, a JSON ``--config`` file, explicit flags.  The
resolved settings are echoed to ``<out>/config.json``; feeding that file back
through ``--config`` reproduces the run.  Output files carry no timestamps,
so a rerun in sequential mode is byte-identical except for wall-clock
columns, which ``--no-timing`` writes as zeros.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (DivergenceError, FemNNError, InsufficientDataError, NonConvergenceError, ParameterError,
                     RegistryError, ShapeError, SingularMatrixError)
from .fem import load_rotor_model
from .hybrid_forward import (ForwardTrainConfig, make_report, predict_batch, prediction_to_json, refine_prediction,
                             train_forward, train_supervised_baseline)
from .hybrid_inverse import (BearingParametrization, InverseTrainConfig, LinearBearingLaw,
                             generate_synthetic_observations, read_observations, train_inverse,
                             write_observations, write_stiffness_csv)
from .linalg import lu_solve, solve_counter
from .neural import load_model, save_model
from .problems import make_family
from .uq import run_monte_carlo, summarize, write_cdf_csv, write_ensemble_csv, write_pdf_csv, write_summary

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

_NUMERICAL = (DivergenceError, SingularMatrixError, NonConvergenceError, FloatingPointError)

TRAIN_KEYS = ("epochs", "batch_size", "steps_per_epoch", "lr", "lr_final", "loss_threshold", "loss_variant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with settings (overridden by flags)")
    common.add_argument("--seed", type=int, help="root seed for every random stream (default 0)")
    common.add_argument("--out", type=Path, help="output directory (default: out)")
    common.add_argument("--parallel", type=int, help="worker threads for Monte-Carlo evaluation (default 1)")
    common.add_argument("--no-timing", dest="timing", action="store_false", default=None,
                        help="write wall-clock columns as zeros so reruns are byte-identical")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--steps-per-epoch", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--lr-final", type=float)
    train.add_argument("--loss-threshold", type=float)
    train.add_argument("--loss-variant", choices=("mean_squared_norm", "norm"))
    train.add_argument("--hidden-layers", type=_ints, help="comma-separated hidden widths, e.g. 64,64,64")

    parser = _Parser(prog="femnn", description="Residual-trained neural surrogates for finite element models.")
    parser.add_argument("--version", action="version", version=f"femnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-forward", parents=[common, train], help="train a surrogate on the FEM residual")
    p.add_argument("--family")

    p = sub.add_parser("predict", parents=[common], help="evaluate a trained surrogate with its residual report")
    p.add_argument("--model", type=Path)
    p.add_argument("--family", help="family to assemble with (default: the one stored in the model)")
    p.add_argument("--inputs", help="comma-separated values in input order, or name=value pairs")
    p.add_argument("--tol", type=float, help="acceptance tolerance on the residual norm (default 1e-3)")
    p.add_argument("--absolute", action="store_true", default=None, help="treat --tol as an absolute bound")
    p.add_argument("--refine", action="store_true", default=None,
                   help="refine with a classical solve when the residual check fails")

    p = sub.add_parser("compare-baseline", parents=[common, train],
                       help="hybrid training against a supervised fit on solved samples")
    p.add_argument("--family")
    p.add_argument("--n-train", type=int, help="solved samples for the supervised baseline (default 50000)")
    p.add_argument("--n-test", type=int, help="held-out samples for the error curves (default 1000)")
    p.add_argument("--eval-every", type=int, help="epochs between error evaluations")

    p = sub.add_parser("uq", parents=[common], help="Monte-Carlo propagation through FEM or the surrogate")
    p.add_argument("--family")
    p.add_argument("--evaluator", choices=("fem", "surrogate", "surrogate-fallback"))
    p.add_argument("--model", type=Path)
    p.add_argument("--n", type=int, help="number of samples (default 10000)")
    p.add_argument("--tol", type=float, help="fallback tolerance on the relative residual (default 1e-3)")
    p.add_argument("--input-set", choices=("trained", "shifted"),
                   help="draw from the training distributions or the shifted ones")
    p.add_argument("--bins", type=int, help="histogram bins (default 50)")

    p = sub.add_parser("identify", parents=[common], help="identify bearing stiffness from rotor responses")
    p.add_argument("--observations", type=Path)
    p.add_argument("--generate-synthetic", action="store_true", default=None,
                   help="synthesise observations from the built-in ground truth first")
    p.add_argument("--rotor", type=Path, help="rotor model JSON (default: built-in demo rotor)")
    p.add_argument("--noise", type=float)
    p.add_argument("--n-speeds", type=int)
    p.add_argument("--omega-min", type=float)
    p.add_argument("--omega-max", type=float)
    p.add_argument("--sweep", type=int, help="speeds in the output stiffness table (default 100)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", type=float)
    p.add_argument("--hidden-layers", type=_ints)

    p = sub.add_parser("generate-synthetic-observations", parents=[common],
                       help="forward-solve the rotor with the ground-truth bearing law")
    p.add_argument("--rotor", type=Path)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-speeds", type=int)
    p.add_argument("--omega-min", type=float)
    p.add_argument("--omega-max", type=float)
    p.add_argument("--omegas", type=_floats, help="explicit comma-separated speeds (overrides the range)")
    return parser


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

COMMON_DEFAULTS = {"seed": 0, "parallel": 1, "timing": True}

COMMAND_DEFAULTS = {
    "train-forward": {"family": None, "family_options": {}},
    "predict": {"model": None, "family": None, "family_options": {}, "inputs": None, "tol": 1e-3, "absolute": False, "refine": False},
    "compare-baseline": {"family": "convdiff", "family_options": {}, "n_train": 50000, "n_test": 1000,
                         "eval_every": None},
    "uq": {"family": "building_beam", "family_options": {}, "evaluator": "fem", "model": None, "n": 10000,
           "tol": 1e-3, "input_set": "trained", "bins": 50},
    "identify": {"observations": None, "generate_synthetic": False, "rotor": None, "noise": 0.0, "n_speeds": 40,
                 "omega_min": 50.0, "omega_max": 500.0, "sweep": 100, "epochs": 400, "steps_per_epoch": 10,
                 "lr": 1e-2, "lr_final": 1e-4, "hidden_layers": [32, 32]},
    "generate-synthetic-observations": {"rotor": None, "noise": 0.0, "n_speeds": 40, "omega_min": 50.0,
                                        "omega_max": 500.0, "omegas": None},
}


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    data.pop("command", None)
    return data


def resolve(args, extra_defaults=None):
    """Merge defaults, config file and flags (in increasing priority)."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[args.command])
    cfg.update(extra_defaults or {})
    file_cfg = _read_config(args.config)
    known = set(cfg) | set(TRAIN_KEYS) | {"hidden_layers", "out"}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config key(s) {sorted(unknown)} for {args.command}")
    cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        cfg[key] = value
    cfg["out"] = str(cfg.get("out") or "out")
    return cfg


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _echo(cfg, command, out):
    """Write the resolved settings; the output directory is left out so the
    file is identical wherever the run is written."""
    echoed = {"command": command, **{k: _jsonable(v) for k, v in sorted(cfg.items()) if k != "out"}}
    _write_json(echoed, out / "config.json")


def _write_json(data, path):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _family(name, options):
    if not name:
        raise UsageError("no problem family given (use --family or the config key 'family')")
    return make_family(name, options or None)


def _train_config(cfg, family):
    values = dict(family.train_defaults)
    values.update({k: cfg[k] for k in TRAIN_KEYS if cfg.get(k) is not None})
    values["seed"] = cfg["seed"]
    try:
        return ForwardTrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc


def _hidden(cfg):
    layers = cfg.get("hidden_layers")
    return tuple(layers) if layers else None


def _train_echo(train_cfg):
    return {k: getattr(train_cfg, k) for k in TRAIN_KEYS}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train_forward(args):
    cfg = resolve(args)
    family = _family(cfg["family"], cfg["family_options"])
    train_cfg = _train_config(cfg, family)
    cfg.update(_train_echo(train_cfg))
    cfg["hidden_layers"] = list(_hidden(cfg) or family.hidden_layers)
    out = _out_dir(cfg)
    _echo(cfg, args.command, out)
    model = family.build_model(seed=cfg["seed"], hidden_layers=tuple(cfg["hidden_layers"]))
    model, history = train_forward(family.sampler, model, train_cfg)
    save_model(model, out / "model.json", family=family.name, family_options=cfg["family_options"],
               train_config=_train_echo(train_cfg), seed=cfg["seed"])
    history.write_csv(out / "history.csv", timing=cfg["timing"])
    print(f"trained {family.name} for {len(history)} epochs; final mean residual norm "
          f"{history.mean_loss[-1]:.6g}; wrote {out}")
    return EXIT_OK


def _parse_inputs(text, family):
    if text is None:
        raise UsageError("no inputs given (use --inputs)")
    if isinstance(text, (list, tuple)):
        values = [float(v) for v in text]
    else:
        parts = [p.strip() for p in str(text).split(",") if p.strip()]
        names = family.input_names()
        if parts and all("=" in p for p in parts):
            given = {}
            for p in parts:
                k, v = p.split("=", 1)
                given[k.strip()] = v
            missing = [n for n in names if n not in given]
            extra = sorted(set(given) - set(names))
            if missing or extra:
                raise UsageError(f"{family.name} inputs: missing {missing}, unknown {extra}")
            parts = [given[n] for n in names]
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise UsageError(f"malformed input values: {exc}") from exc
    if len(values) != len(family.inputs):
        raise UsageError(f"{family.name} expects {len(family.inputs)} inputs "
                         f"({', '.join(family.input_names())}), got {len(values)}")
    return np.array(values)


def _load_model(path):
    if path is None:
        raise UsageError("no model file given (use --model)")
    try:
        return load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"model file {path} is malformed: {exc}") from exc


def _model_family(cfg, meta):
    name = cfg.get("family") or meta.get("family")
    options = cfg.get("family_options") or meta.get("family_options") or {}
    return _family(name, options)


def _check_compatible(model, family):
    if model.n_inputs != len(family.inputs):
        raise UsageError(f"model takes {model.n_inputs} inputs, family {family.name} has {len(family.inputs)}")
    if model.n_outputs != family.n_outputs:
        raise UsageError(f"model predicts {model.n_outputs} DOFs, family {family.name} has {family.n_outputs}")


def cmd_predict(args):
    cfg = resolve(args)
    model, meta = _load_model(cfg["model"])
    family = _model_family(cfg, meta)
    _check_compatible(model, family)
    x = _parse_inputs(cfg["inputs"], family)
    cfg["family"] = family.name
    cfg["inputs"] = x.tolist()
    out = _out_dir(cfg)
    _echo(cfg, args.command, out)
    system = family.assemble(x)
    u = predict_batch(model, x)[0]
    report = make_report(system, u, cfg["tol"], absolute=cfg["absolute"])
    if cfg["refine"] and not report.accepted:
        u = refine_prediction(u, system)
        report = make_report(system, u, cfg["tol"], absolute=cfg["absolute"], refined=True)
    d = prediction_to_json(u, report, out / "prediction.json", family=family.name, inputs=x.tolist(),
                           qoi={family.qoi_name: family.qoi(system, u)})
    print(json.dumps({k: d[k] for k in ("residual_norm", "relative_residual", "accepted", "refined")}))
    return EXIT_OK


def _heldout(family, n, seed):
    X = family.draw(np.random.default_rng([seed, 5]), n)
    U = np.array([lu_solve(s.K, s.F) for s in (family.assemble(x) for x in X)])
    return X, U


def cmd_compare_baseline(args):
    cfg = resolve(args)
    family = _family(cfg["family"], cfg["family_options"])
    train_cfg = _train_config(cfg, family)
    cfg.update(_train_echo(train_cfg))
    cfg["hidden_layers"] = list(_hidden(cfg) or family.hidden_layers)
    if cfg["eval_every"] is None:
        cfg["eval_every"] = max(1, train_cfg.epochs // 50)
    if cfg["n_train"] < 1 or cfg["n_test"] < 1 or cfg["eval_every"] < 1:
        raise UsageError("n_train, n_test and eval_every must be positive")
    out = _out_dir(cfg)
    _echo(cfg, args.command, out)
    hidden = tuple(cfg["hidden_layers"])
    X_test, U_test = _heldout(family, cfg["n_test"], cfg["seed"])
    eval_epochs = set(range(cfg["eval_every"] - 1, train_cfg.epochs, cfg["eval_every"])) | {train_cfg.epochs - 1}

    def tracker(errors):
        def callback(epoch, model):
            if epoch in eval_epochs:
                errors[epoch] = float(np.mean(np.abs(predict_batch(model, X_test) - U_test)))
        return callback

    # supervised data: inputs from their own stream, targets from the direct solver
    t0 = time.perf_counter()
    X_train = family.draw(np.random.default_rng([cfg["seed"], 4]), cfg["n_train"])
    U_train = np.array([lu_solve(s.K, s.F) for s in (family.assemble(x) for x in X_train)])
    data_s = time.perf_counter() - t0

    solve_counter.reset()
    hybrid_err = {}
    hybrid, h_hist = train_forward(family.sampler, family.build_model(cfg["seed"], hidden), train_cfg,
                                   tracker(hybrid_err))
    hybrid_solves = solve_counter.calls
    sup_err = {}
    _, s_hist = train_supervised_baseline(X_train, U_train, family.build_model(cfg["seed"], hidden), train_cfg,
                                          tracker(sup_err))

    timing = cfg["timing"]
    h_cum, s_cum = np.cumsum(h_hist.wall_ms) / 1e3, np.cumsum(s_hist.wall_ms) / 1e3
    epochs = sorted(set(hybrid_err) & set(sup_err))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "hybrid_error", "supervised_error", "hybrid_train_s", "supervised_train_s"])
        for e in epochs:
            w.writerow([e + 1, repr(hybrid_err[e]), repr(sup_err[e]),
                        f"{h_cum[e]:.3f}" if timing else "0", f"{s_cum[e]:.3f}" if timing else "0"])
    last = epochs[-1]
    hybrid_s, sup_s = float(h_cum[last]), float(s_cum[last])
    summary = {
        "family": family.name,
        "epochs": len(h_hist),
        "hybrid_error": hybrid_err[last],
        "supervised_error": sup_err[last],
        "error_ratio": hybrid_err[last] / sup_err[last] if sup_err[last] > 0 else None,
        "error_metric": "mean absolute nodal error over held-out samples",
        "oracle_solves_during_hybrid_training": hybrid_solves,
        "n_train": cfg["n_train"],
        "n_test": cfg["n_test"],
        "data_creation_s": round(data_s, 3) if timing else 0,
        "hybrid_train_s": round(hybrid_s, 3) if timing else 0,
        "supervised_train_s": round(sup_s, 3) if timing else 0,
        "supervised_total_over_hybrid": round((data_s + sup_s) / hybrid_s, 3) if timing and hybrid_s > 0 else None,
    }
    _write_json(summary, out / "comparison_summary.json")
    print(f"held-out error: hybrid {summary['hybrid_error']:.4g}, supervised {summary['supervised_error']:.4g}; "
          f"oracle solves during hybrid training: {hybrid_solves}")
    return EXIT_OK


def cmd_uq(args):
    cfg = resolve(args)
    model = meta = None
    if cfg["evaluator"] != "fem":
        model, meta = _load_model(cfg["model"])
        if args.family is None and "family" not in _read_config(args.config):
            cfg["family"] = meta.get("family", cfg["family"])
            cfg["family_options"] = meta.get("family_options", cfg["family_options"])
    family = _family(cfg["family"], cfg["family_options"])
    if model is not None:
        _check_compatible(model, family)
    specs = None
    if cfg["input_set"] == "shifted":
        if not family.shifted_inputs:
            raise UsageError(f"family {family.name} defines no shifted input set")
        specs = family.shifted_inputs
    if cfg["n"] < 4:
        raise UsageError(f"need at least 4 samples, got n={cfg['n']}")
    out = _out_dir(cfg)
    _echo(cfg, args.command, out)
    result = run_monte_carlo(family, cfg["evaluator"], cfg["n"], cfg["seed"], model=model, specs=specs,
                             tol=cfg["tol"], parallel=cfg["parallel"])
    summary = summarize(result.outputs, n_bins=cfg["bins"])
    summary.extra.update({
        "family": family.name,
        "qoi": family.qoi_name,
        "evaluator": cfg["evaluator"],
        "input_set": cfg["input_set"],
        "inputs": {name: spec.to_dict() for name, spec in zip(family.input_names(), family.input_specs(specs))},
        "n_refined": result.n_refined,
        "fallback_tolerance": cfg["tol"] if cfg["evaluator"] == "surrogate-fallback" else None,
    })
    write_ensemble_csv(result, out / "ensemble.csv")
    write_summary(summary, out / "summary.json")
    write_pdf_csv(summary, out / "pdf.csv")
    write_cdf_csv(summary, out / "cdf.csv")
    print(f"{cfg['evaluator']}: mean {summary.mean:.6g}, std {summary.std:.6g}, refined {result.n_refined}/{cfg['n']}")
    return EXIT_OK


def _speeds(cfg):
    if cfg.get("omegas"):
        return np.array(cfg["omegas"], dtype=float)
    if cfg["n_speeds"] < 1 or not cfg["omega_min"] <= cfg["omega_max"]:
        raise UsageError("need n_speeds >= 1 and omega_min <= omega_max")
    return np.linspace(cfg["omega_min"], cfg["omega_max"], cfg["n_speeds"])


def _rotor(cfg):
    try:
        return load_rotor_model(cfg["rotor"])
    except OSError as exc:
        raise UsageError(f"cannot read rotor model {cfg['rotor']}: {exc}") from exc


def cmd_generate_observations(args):
    cfg = resolve(args)
    rotor = _rotor(cfg)
    omegas = _speeds(cfg)
    out = _out_dir(cfg)
    _echo(cfg, args.command, out)
    param = BearingParametrization(n_bearings=len(rotor.bearing_dofs) // 2)
    obs = generate_synthetic_observations(rotor, LinearBearingLaw(), omegas, param, cfg["noise"], cfg["seed"])
    write_observations(obs, out / "observations.json")
    print(f"wrote {len(obs)} observations to {out / 'observations.json'}")
    return EXIT_OK


def cmd_identify(args):
    cfg = resolve(args)
    rotor = _rotor(cfg)
    param = BearingParametrization(n_bearings=len(rotor.bearing_dofs) // 2)
    out = _out_dir(cfg)
    if cfg["generate_synthetic"]:
        obs = generate_synthetic_observations(rotor, LinearBearingLaw(), _speeds(cfg), param, cfg["noise"],
                                              cfg["seed"])
        write_observations(obs, out / "observations.json")
    else:
        if cfg["observations"] is None:
            raise UsageError("no observations given (use --observations or --generate-synthetic)")
        try:
            obs = read_observations(cfg["observations"])
        except OSError as exc:
            raise UsageError(f"cannot read observations {cfg['observations']}: {exc}") from exc
        except (ValueError, json.JSONDecodeError) as exc:
            raise UsageError(f"observations file {cfg['observations']} is malformed: {exc}") from exc
    if not obs:
        raise UsageError("observation file holds no speeds")
    n_dof = rotor.n_dof
    for o in obs:
        if o.U.shape != (n_dof,) or o.F.shape != (n_dof,):
            raise UsageError(f"observation at omega={o.omega} does not match the {n_dof}-DOF rotor")
    _echo(cfg, args.command, out)
    train_cfg = InverseTrainConfig(epochs=cfg["epochs"], steps_per_epoch=cfg["steps_per_epoch"], lr=cfg["lr"],
                                   lr_final=cfg["lr_final"], seed=cfg["seed"],
                                   hidden_layers=tuple(cfg["hidden_layers"]))
    model, history = train_inverse(obs, rotor, param, train_cfg)
    omegas = [o.omega for o in obs]
    sweep = np.linspace(min(omegas), max(omegas), cfg["sweep"])
    write_stiffness_csv(model, sweep, param, out / "stiffness.csv")
    history.write_csv(out / "history.csv", timing=cfg["timing"])
    save_model(model, out / "model.json", parametrization=param.kind, coefficients=list(param.coeff_names),
               seed=cfg["seed"])
    print(f"identified {param.n_coeffs} bearing coefficients from {len(obs)} speeds; wrote {out}")
    return EXIT_OK


COMMANDS = {
    "train-forward": cmd_train_forward,
    "predict": cmd_predict,
    "compare-baseline": cmd_compare_baseline,
    "uq": cmd_uq,
    "identify": cmd_identify,
    "generate-synthetic-observations": cmd_generate_observations,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, RegistryError, ParameterError, ShapeError, InsufficientDataError) as exc:
        print(f"femnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERICAL as exc:
        print(f"femnn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FemNNError as exc:
        print(f"femnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
