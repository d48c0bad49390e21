"""Command-line entry point tying the pipeline together.

Commands: generate, hdmd, train, evaluate, mi, lyapunov, tune.  Every
command writes a JSON manifest next to its primary output recording inputs
(with content hashes), outputs, seed, and timing, so artifacts stay
traceable.  Exit codes: 0 success, 2 usage, 3 data/contract error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autoencoder import decode as decode_batch
from .autoencoder import encode as encode_batch
from .data import (
    Dataset,
    Trajectory,
    export_dataset_csv,
    load_dataset,
    sample_dataset,
    save_dataset,
)
from .dmd import (
    build_hankel,
    fit_global,
    hdmd_pipeline,
    max_relative_error,
    reconstruct,
    reconstruction_errors,
    save_fit,
    spectrum,
    window_columns,
)
from .errors import (
    EXIT_DATA,
    EXIT_NUMERIC,
    EXIT_OK,
    ContractViolation,
    DataFormatError,
    DegenerateDataError,
    KhdmError,
    NumericalError,
    TuningFailureError,
)
from .ks import ks_dataset
from .lyapunov import largest_lyapunov
from .mi import alsi, alsi_compare, alsi_csv, comparison_csv
from .systems import SYSTEM_NAMES, make_spec
from .training import (
    TrainConfig,
    config_for,
    load_checkpoint,
    loss_history_csv,
    save_checkpoint,
    train,
    tune,
)


class UsageError(Exception):
    """A required setting is missing from both flags and config file."""


# ---------------------------------------------------------------------------
# config files and manifests
# ---------------------------------------------------------------------------


def load_config_file(path):
    """Flat ``section.key=value`` pairs; later lines win."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: malformed config line {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(primary_output, command, args, inputs, outputs, seed, started, elapsed):
    manifest = {
        "command": command,
        "argv": list(args),
        "config_path": getattr_or_none(args, "config"),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "started_utc": started,
        "elapsed_seconds": round(elapsed, 3),
    }
    path = Path(str(primary_output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def getattr_or_none(args, name):
    value = getattr(args, name, None)
    return str(value) if value is not None else None


class Setting:
    """Merge CLI flags over config-file entries over defaults."""

    def __init__(self, args, config_values):
        self.args = args
        self.values = config_values

    def get(self, flag, section_key, cast, default=None):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        if section_key in self.values:
            return cast(self.values[section_key])
        return default


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    cfg = Setting(args, load_config_file(args.config) if args.config else {})
    system = cfg.get("system", "data.system", str)
    if system is None:
        raise UsageError("generate needs --system (or data.system in a config file)")
    seed = cfg.get("seed", "data.seed", int, 0)
    n_traj = cfg.get("n_traj", "data.n_traj", int, 128)
    dt = cfg.get("dt", "data.dt", float, 0.05)
    out = Path(cfg.get("out", "data.out", str, f"{system}.khdm"))

    if system == "ks":
        dataset, reductions = ks_dataset(
            length=cfg.get("length", "data.length", float, 11.0),
            n_space=cfg.get("n_space", "data.n_space", int, 128),
            dt=cfg.get("dt", "data.dt", float, 0.25),
            n_traj=n_traj,
            seed=seed,
            n_pod_modes=cfg.get("state_dim", "data.state_dim", int, 12),
        )
        for i, red in enumerate(reductions):
            print(
                f"sample {i}: energy={red.energy_fraction:.4f} "
                f"sv_sum={red.sv_sum_fraction:.4f} ratio_in_band={red.ratio_in_band}"
            )
    else:
        spec = make_spec(
            system, state_dim=cfg.get("state_dim", "data.state_dim", int, None)
        )
        dataset = sample_dataset(
            spec,
            n_traj=n_traj,
            t_f=cfg.get("tf", "data.t_f", float, 20.0),
            dt=dt,
            seed=seed,
            burn_in=cfg.get("burn_in", "data.burn_in", float, None),
        )
    save_dataset(out, dataset)
    outputs = [out]
    if args.csv:
        csv_path = out.with_suffix(".csv")
        export_dataset_csv(csv_path, dataset)
        outputs.append(csv_path)
    write_manifest(out, "generate", sys.argv[1:], [], outputs, seed, started,
                   time.perf_counter() - t0)
    print(
        f"wrote {out}: {dataset.n_traj} trajectories, "
        f"{dataset.state_dim}x{dataset.n_columns} at dt={dataset.dt}"
    )
    return EXIT_OK


def _error_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _spectrum_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["re_ell", "im_ell", "re_lambda", "im_lambda"])
        for ell, lam in zip(report.discrete_eigenvalues, report.continuous_rates):
            writer.writerow(
                [f"{ell.real:.17g}", f"{ell.imag:.17g}", f"{lam.real:.17g}", f"{lam.imag:.17g}"]
            )


def cmd_hdmd(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    dataset = load_dataset(args.data)
    fit, _, errors = hdmd_pipeline(
        dataset, n_ob_bar=args.n_ob_bar, n_st=args.n_st, rel_tol=args.rel_tol
    )
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    error_path = Path(f"{prefix}.errors.csv")
    _error_csv(error_path, errors)
    spec_path = Path(f"{prefix}.spectrum.csv")
    _spectrum_csv(spec_path, spectrum(fit, dataset.dt))
    fit_path = Path(f"{prefix}.fit.khdm")
    save_fit(fit_path, fit)
    worst = max_relative_error(errors, "rel_error_worst_snapshot")
    frob = max_relative_error(errors, "rel_error_full")
    print(f"max relative error (frobenius, full range): {frob:.4f}%")
    print(f"max relative error (worst snapshot vs anomaly): {worst:.4f}%")
    write_manifest(error_path, "hdmd", sys.argv[1:], [args.data],
                   [error_path, spec_path, fit_path], None, started,
                   time.perf_counter() - t0)
    return EXIT_OK


def _train_config_from(args):
    file_values = load_config_file(args.config) if args.config else {}
    cfg = Setting(args, file_values)
    system = cfg.get("system", "data.system", str)
    table = {}
    if system is not None:
        from .training import SYSTEM_DEFAULTS

        table = dict(SYSTEM_DEFAULTS.get(system, {}))

    def pick(flag, key, cast, fallback):
        return cfg.get(flag, key, cast, table.get(flag, fallback))

    n_e = cfg.get("n_e", "train.n_e", int)
    n_c = cfg.get("n_c", "train.n_c", int)
    if n_e is None or n_c is None:
        raise ContractViolation("n_e and n_c are required (flags or config file)")
    f_r_raw = cfg.get("f_r", "train.f_r", str, None)
    f_r = float(f_r_raw) if f_r_raw is not None else table.get("f_r", 0.05)
    norm_raw = str(cfg.get("normalize", "train.normalize", str, "true")).lower()
    return TrainConfig(
        normalize=norm_raw in ("1", "true", "yes"),
        n_e=n_e,
        n_c=n_c,
        n_b=pick("n_b", "train.n_b", int, 64),
        alpha=pick("alpha", "train.alpha", float, 1e-12),
        gamma=pick("gamma", "train.gamma", float, 1e-4),
        f_r=f_r,
        n_st=pick("n_st", "train.n_st", int, 20),
        n_ob_bar=pick("n_ob_bar", "train.n_ob_bar", int, 10),
        e_max=cfg.get("e_max", "train.e_max", int, 40),
        e_tst=pick("e_tst", "train.e_tst", int, 10),
        hidden=pick("hidden", "train.hidden", int, 64),
        seed=cfg.get("seed", "train.seed", int, 0),
        n_test=cfg.get("n_test", "train.n_test", int, 0),
        rel_tol=cfg.get("rel_tol", "train.rel_tol", float, ad.TRAINING_REL_TOL),
        scope=cfg.get("scope", "train.scope", str, "global"),
    )


def cmd_train(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    config = _train_config_from(args)
    dataset = load_dataset(args.data)

    def progress(epoch, train_report, test_report, n_ob):
        test_part = f" test={test_report.l_tot:.6g}" if test_report else ""
        print(
            f"epoch {epoch}/{config.e_max}: train={train_report.l_tot:.6g}"
            f"{test_part} n_ob_bar={n_ob}",
            flush=True,
        )

    result = train(config, dataset, progress=progress if args.verbose else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result)
    losses_path = Path(f"{out}.losses.csv")
    losses_path.write_text(loss_history_csv(result))
    history_path = Path(f"{out}.n_ob_history.csv")
    history_path.write_text(
        "epoch,n_ob_bar\n" + "\n".join(f"{e},{n}" for e, n in result.n_ob_history) + "\n"
    )
    write_manifest(out, "train", sys.argv[1:], [args.data],
                   [out, losses_path, history_path], config.seed, started,
                   time.perf_counter() - t0)
    final_test = result.test_reports[-1].l_tot if result.test_reports else float("nan")
    print(
        f"trained {config.e_max} epochs: final test l_tot={final_test:.6g}, "
        f"n_ob_bar={result.final_n_ob_bar}"
    )
    return EXIT_OK


def _evaluation_indices(dataset, config, limit):
    if dataset.n_traj >= config.n_c + config.n_test and config.n_test > 0:
        ids = list(range(config.n_c, config.n_c + config.n_test))
    else:
        ids = list(range(dataset.n_traj))
    if limit is not None:
        ids = ids[: int(limit)]
    return ids


def evaluate_checkpoint(model, config, dataset, n_ob_bar, indices):
    """Encode, fit on the evaluation batch, reconstruct, decode, measure."""
    if dataset.state_dim != model.n_state:
        raise DataFormatError(
            f"checkpoint expects {model.n_state}-dimensional states, "
            f"dataset has {dataset.state_dim}"
        )
    flat = dataset.stacked(indices)
    n_traj = len(indices)
    wrapped = model.wrap(None)
    latent = encode_batch(wrapped, ad.constant(model.normalize(flat)))
    stack = build_hankel(latent, n_traj, n_ob_bar)
    targets = window_columns(latent, n_traj, stack.n_w)
    fit = fit_global(stack, targets, config.rel_tol)
    predicted_latent = reconstruct(fit, stack, config.n_st)
    predicted = model.denormalize(decode_batch(wrapped, predicted_latent).values)
    errors = reconstruction_errors(predicted, flat, n_traj, config.n_st)
    return predicted, flat, errors, fit


def cmd_evaluate(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    model, config, history = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    n_ob = history[-1][1]
    indices = _evaluation_indices(dataset, config, args.n_traj)
    predicted, truth, errors, fit = evaluate_checkpoint(
        model, config, dataset, n_ob, indices
    )
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    error_path = Path(f"{prefix}.errors.csv")
    _error_csv(error_path, errors)

    series_path = Path(f"{prefix}.series.csv")
    n_export = min(args.export_traj, len(indices))
    n_cols_pred = predicted.shape[1] // len(indices)
    n_columns = truth.shape[1] // len(indices)
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dims = truth.shape[0]
        writer.writerow(
            ["trajectory", "window_start", "target_column", "t", "kind"]
            + [f"y{i + 1}" for i in range(dims)]
        )
        for k in range(n_export):
            block = predicted[:, k * n_cols_pred : (k + 1) * n_cols_pred]
            true_block = truth[:, k * n_columns : (k + 1) * n_columns]
            for j in range(n_cols_pred):
                target = j + config.n_st
                t_val = target * dataset.dt
                kind = "reconstruction" if target < n_cols_pred else "forecast"
                writer.writerow(
                    [k, j, target, f"{t_val:.10g}", kind]
                    + [f"{v:.10g}" for v in block[:, j]]
                )
                if target < n_columns:
                    writer.writerow(
                        [k, j, target, f"{t_val:.10g}", "truth"]
                        + [f"{v:.10g}" for v in true_block[:, target]]
                    )
    frob = max_relative_error(errors, "rel_error_full")
    worst = max_relative_error(errors, "rel_error_worst_snapshot")
    print(f"evaluated {len(indices)} trajectories at n_ob_bar={n_ob}")
    print(f"max relative error (frobenius, full range): {frob:.4f}%")
    print(f"max relative error (worst snapshot vs anomaly): {worst:.4f}%")
    write_manifest(error_path, "evaluate", sys.argv[1:],
                   [args.checkpoint, args.data], [error_path, series_path],
                   config.seed, started, time.perf_counter() - t0)
    return EXIT_OK


def latent_dataset(model, dataset, indices=None):
    """Encode a dataset's trajectories through a trained encoder."""
    wrapped = model.wrap(None)
    ids = range(dataset.n_traj) if indices is None else indices
    trajectories = []
    for i in ids:
        block = model.normalize(dataset.trajectories[i].values)
        z = encode_batch(wrapped, ad.constant(block))
        trajectories.append(Trajectory(values=z.values, dt=dataset.dt))
    return Dataset(trajectories=trajectories, system=None, seed=dataset.seed)


def cmd_mi(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    dataset = load_dataset(args.data)
    if args.n_traj is not None:
        dataset = dataset.subset(range(min(args.n_traj, dataset.n_traj)))
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs, inputs = [], [args.data]
    tables = {}
    if args.source in ("original", "both"):
        tables["original"] = alsi(dataset, max_lag=args.max_lag, k=args.k, source="original")
    if args.source in ("latent", "both"):
        if not args.checkpoint:
            raise ContractViolation("latent ALSI needs --checkpoint")
        model, _, _ = load_checkpoint(args.checkpoint)
        inputs.append(args.checkpoint)
        encoded = latent_dataset(model, dataset)
        tables["latent"] = alsi(encoded, max_lag=args.max_lag, k=args.k, source="latent")
    for name, table in tables.items():
        path = Path(f"{prefix}.alsi_{name}.csv")
        path.write_text(alsi_csv(table))
        outputs.append(path)
    if len(tables) == 2:
        comps = alsi_compare(tables["original"], tables["latent"])
        path = Path(f"{prefix}.alsi_compare.csv")
        path.write_text(comparison_csv(comps))
        outputs.append(path)
        shifted = [c for c in comps if c.peak_shift != 0]
        print(f"pairs with shifted information peaks: {len(shifted)}/{len(comps)}")
    write_manifest(outputs[0], "mi", sys.argv[1:], inputs, outputs, None,
                   started, time.perf_counter() - t0)
    print("wrote " + ", ".join(str(o) for o in outputs))
    return EXIT_OK


def cmd_lyapunov(args):
    spec = make_spec(args.system)
    estimate = largest_lyapunov(
        spec,
        horizon=args.horizon,
        n_renorm=args.n_renorm,
        seed=args.seed if args.seed is not None else 0,
        dt=args.dt,
    )
    print(f"largest Lyapunov exponent of {args.system}: {estimate:.4f} (1/time)")
    return EXIT_OK


def cmd_tune(args):
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    dataset = load_dataset(args.data)
    base = _train_config_from(args)
    ranked = tune(base, dataset, budget=args.budget, seed=base.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "n_b", "alpha", "gamma", "final_test_l_tot"])
        for rank, (cfg, final) in enumerate(ranked, start=1):
            writer.writerow([rank, cfg.n_b, f"{cfg.alpha:.6g}", f"{cfg.gamma:.6g}",
                             f"{final:.6g}" if math.isfinite(final) else "inf"])
    best_cfg, best = ranked[0]
    print(
        f"best of {args.budget}: n_b={best_cfg.n_b} alpha={best_cfg.alpha:.3g} "
        f"gamma={best_cfg.gamma:.3g} final test l_tot={best:.6g}"
    )
    write_manifest(out, "tune", sys.argv[1:], [args.data], [out], base.seed,
                   started, time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="khdm",
        description="Koopman/Hankel DMD: data generation, fitting, adaptive "
        "deep-learning training, and information diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a trajectory dataset")
    p.add_argument("--config")
    p.add_argument("--system", choices=SYSTEM_NAMES)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--tf", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=float)
    p.add_argument("--state-dim", dest="state_dim", type=int)
    p.add_argument("--n-space", dest="n_space", type=int, help="KS collocation points")
    p.add_argument("--length", type=float, help="KS half-period L")
    p.add_argument("--out")
    p.add_argument("--csv", action="store_true", help="also export CSV")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("hdmd", help="Hankel DMD fit, reconstruction errors, spectrum")
    p.add_argument("--data", required=True)
    p.add_argument("--n-ob-bar", dest="n_ob_bar", type=int, required=True)
    p.add_argument("--n-st", dest="n_st", type=int, default=20)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=ad.DEFAULT_REL_TOL)
    p.add_argument("--out-prefix", dest="out_prefix", default="hdmd")
    p.set_defaults(func=cmd_hdmd)

    p = sub.add_parser("train", help="train the adaptive deep-learning HDMD")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--system", help="use reference hyperparameters of this system")
    p.add_argument("--verbose", action="store_true")
    for flag, cast in (
        ("--n-e", int), ("--n-c", int), ("--n-b", int), ("--alpha", float),
        ("--gamma", float), ("--f-r", str), ("--n-st", int), ("--n-ob-bar", int),
        ("--e-max", int), ("--e-tst", int), ("--hidden", int), ("--seed", int),
        ("--n-test", int), ("--rel-tol", float), ("--scope", str),
        ("--normalize", str),
    ):
        p.add_argument(flag, dest=flag.lstrip("-").replace("-", "_"), type=cast)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="reconstruction/forecast from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-prefix", dest="out_prefix", default="evaluate")
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--export-traj", dest="export_traj", type=int, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mi", help="averaged lagged self-information tables")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--source", choices=("original", "latent", "both"), default="original")
    p.add_argument("--max-lag", dest="max_lag", type=int, default=40)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.add_argument("--out-prefix", dest="out_prefix", default="mi")
    p.set_defaults(func=cmd_mi)

    p = sub.add_parser("lyapunov", help="largest Lyapunov exponent estimate")
    p.add_argument("--system", required=True, choices=SYSTEM_NAMES)
    p.add_argument("--horizon", type=float, default=500.0)
    p.add_argument("--n-renorm", dest="n_renorm", type=int, default=500)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_lyapunov)

    p = sub.add_parser("tune", help="random-search hyperparameter tuner")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=6)
    p.add_argument("--system")
    for flag, cast in (
        ("--n-e", int), ("--n-c", int), ("--e-tst", int), ("--n-st", int),
        ("--n-ob-bar", int), ("--f-r", str), ("--seed", int), ("--n-test", int),
        ("--hidden", int), ("--scope", str), ("--e-max", int),
    ):
        p.add_argument(flag, dest=flag.lstrip("-").replace("-", "_"), type=cast)
    p.set_defaults(func=cmd_tune)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, DataFormatError, DegenerateDataError, TuningFailureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KhdmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
