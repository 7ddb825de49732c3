"""Command-line interface.

Subcommands: ``generate`` (synthetic datasets), ``train`` (one model),
``eval`` (metrics for a checkpoint), ``sweep`` (mechanism x seed x noise
comparison grid), and ``fuse-demo`` (1-d fusion density curves as CSV).

Options may come from a flat key=value config file via ``--config``;
explicit flags override file entries. Exit codes: 0 success, 1 partial
sweep failure, 2 usage/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (
    NoiseSpec,
    apply_noise,
    generate_dataset,
    load_dataset,
    save_dataset_with_manifest,
)
from .estimator import CrossmodalVAE, evaluate_params
from .exceptions import ContractError, FormatError, NumericError
from .gaussians import DiagonalGaussian, FusionWeights, gpoe_fuse, poe_fuse, density_curve
from .ioutils import atomic_write_text, read_manifest

EVAL_CSV_COLUMNS = [
    "mechanism",
    "seed",
    "train_data_fraction",
    "train_pixel_fraction",
    "train_sigma",
    "test_data_fraction",
    "test_pixel_fraction",
    "test_sigma",
    "mean_epe",
    "auc",
    "iou",
    "f1",
]

TOY_MODALITY_NAMES = ("grid", "keypoints", ("points",))


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def _rows_to_csv(columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _load_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    if not Path(path).exists():
        raise ContractError(f"config file {path!r} does not exist")
    return read_manifest(path)


def _merged(args, config: dict[str, str], key: str, default, cast):
    """Flag value if given, else config-file value, else default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return default


# ---------------------------------------------------------------------------
# generate


def _cmd_generate(args) -> int:
    if args.n_train < 1 or args.n_test < 1:
        raise ContractError("--n-train and --n-test must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = generate_dataset(args.n_train, k=args.k, g=args.g, seed=args.seed)
    test = generate_dataset(args.n_test, k=args.k, g=args.g, seed=args.seed + 1)
    save_dataset_with_manifest(out / "train.gpd", train, seed=args.seed)
    save_dataset_with_manifest(out / "test.gpd", test, seed=args.seed + 1)
    print(
        f"wrote {out / 'train.gpd'} ({args.n_train} samples) and "
        f"{out / 'test.gpd'} ({args.n_test} samples); k={args.k} g={args.g} "
        f"seed={args.seed}"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _train_noise(data_fraction, pixel_fraction, sigma) -> NoiseSpec | None:
    spec = NoiseSpec(
        data_fraction=data_fraction,
        pixel_fraction=pixel_fraction,
        gaussian_sigma=sigma,
    )
    return None if spec.is_noop else spec


def _fit_toy_model(dataset, mechanism, seed, hyper: dict) -> CrossmodalVAE:
    model = CrossmodalVAE(
        mechanism=mechanism,
        beta=hyper["beta"],
        latent_dim=hyper["latent_dim"],
        hidden_dim=hyper["hidden_dim"],
        alpha_hidden_dim=hyper["alpha_hidden_dim"],
        learning_rate=hyper["learning_rate"],
        batch_size=hyper["batch_size"],
        epochs=hyper["epochs"],
        train_noise=_train_noise(
            hyper["train_data_fraction"],
            hyper["train_pixel_fraction"],
            hyper["train_sigma"],
        ),
        random_state=seed,
    )
    return model.fit(
        dataset.grids,
        dataset.keypoints,
        aux=[dataset.points],
        modality_names=TOY_MODALITY_NAMES,
    )


_HYPER_KEYS = {
    "beta": (0.01, float),
    "latent_dim": (8, int),
    "hidden_dim": (64, int),
    "alpha_hidden_dim": (32, int),
    "learning_rate": (1e-3, float),
    "batch_size": (64, int),
    "epochs": (50, int),
    "train_data_fraction": (0.0, float),
    "train_pixel_fraction": (0.0, float),
    "train_sigma": (0.0, float),
}


def _hyper_from(args, config: dict[str, str]) -> dict:
    return {
        key: _merged(args, config, key, default, cast)
        for key, (default, cast) in _HYPER_KEYS.items()
    }


def _history_csv(history) -> str:
    rows = [
        {
            "epoch": i,
            "target_recon": h.target_recon,
            "aux_recon": h.aux_recon,
            "kl": h.kl,
            "total": h.total,
        }
        for i, h in enumerate(history)
    ]
    return _rows_to_csv(["epoch", "target_recon", "aux_recon", "kl", "total"], rows)


def _cmd_train(args) -> int:
    config = _load_config_file(args.config)
    dataset = load_dataset(args.data)
    mechanism = _merged(args, config, "mechanism", "gpoe", str)
    seed = _merged(args, config, "seed", 0, int)
    hyper = _hyper_from(args, config)
    model = _fit_toy_model(dataset, mechanism, seed, hyper)
    model.save(args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    atomic_write_text(log_path, _history_csv(model.history_))
    final = model.history_[-1].total if model.history_ else float("nan")
    print(
        f"trained {mechanism} for {hyper['epochs']} epochs "
        f"(seed {seed}); final loss {final:.6f}; wrote {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_row(model: CrossmodalVAE, report, test_noise: NoiseSpec) -> dict:
    train_noise = model.train_noise or NoiseSpec()
    return {
        "mechanism": model.mechanism,
        "seed": model.random_state,
        "train_data_fraction": float(train_noise.data_fraction),
        "train_pixel_fraction": float(train_noise.pixel_fraction),
        "train_sigma": float(train_noise.gaussian_sigma),
        "test_data_fraction": float(test_noise.data_fraction),
        "test_pixel_fraction": float(test_noise.pixel_fraction),
        "test_sigma": float(test_noise.gaussian_sigma),
        "mean_epe": report.mean_epe,
        "auc": report.auc,
        "iou": report.iou,
        "f1": report.f1,
    }


def _append_csv_row(path, columns: list[str], row: dict) -> None:
    path = Path(path)
    header_needed = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header_needed:
            writer.writerow(columns)
        writer.writerow([_fmt(row[c]) for c in columns])


def _cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        raise ContractError(f"checkpoint {args.checkpoint!r} does not exist")
    model = CrossmodalVAE.load(args.checkpoint)
    dataset = load_dataset(args.data)
    test_noise = NoiseSpec(
        data_fraction=args.data_fraction,
        pixel_fraction=args.pixel_fraction,
        gaussian_sigma=args.sigma,
    )
    report = model.evaluate(
        dataset,
        noise=None if test_noise.is_noop else test_noise,
        noise_seed=args.noise_seed,
    )
    if args.report:
        atomic_write_text(
            args.report, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    if args.csv:
        _append_csv_row(args.csv, EVAL_CSV_COLUMNS, _eval_row(model, report, test_noise))
    print(
        f"mean_epe={report.mean_epe:.6f} auc={report.auc:.4f} "
        f"iou={report.iou:.4f} f1={report.f1:.4f} (n={report.count})"
    )
    return 0


# ---------------------------------------------------------------------------
# sweep


def _parse_list(text: str, cast) -> list:
    items = [t for t in text.replace(";", ",").split(",") if t.strip()]
    if not items:
        raise ContractError(f"empty list value: {text!r}")
    return [cast(t.strip()) for t in items]


def _sweep_cell(payload: dict) -> list[dict]:
    """Train one (mechanism, seed) cell and evaluate on every noise point."""
    train_set = load_dataset(payload["train_data"])
    test_set = load_dataset(payload["test_data"])
    model = _fit_toy_model(
        train_set, payload["mechanism"], payload["seed"], payload["hyper"]
    )
    rows = []
    for point in payload["grid"]:
        test_noise = NoiseSpec(**point)
        report = model.evaluate(
            test_set,
            noise=None if test_noise.is_noop else test_noise,
            noise_seed=payload["noise_seed"],
        )
        rows.append(_eval_row(model, report, test_noise))
    return rows


def run_sweep(
    train_data: str,
    test_data: str,
    mechanisms: list[str],
    seeds: list[int],
    hyper: dict,
    pixel_fractions: list[float],
    sigmas: list[float],
    data_fractions: list[float],
    noise_seed: int = 0,
    max_workers: int | None = None,
) -> tuple[list[dict], list[dict], list[str]]:
    """Train every mechanism x seed cell and evaluate on the noise grid.

    Returns (long-form rows, aggregated rows, failure messages); rows are
    deterministically sorted. Cells run in parallel up to ``max_workers``
    (the GPOE_THREADS environment variable, else machine parallelism).
    """
    if not mechanisms or not seeds:
        raise ContractError("mechanism and seed lists must be non-empty")
    if not (pixel_fractions and sigmas and data_fractions):
        raise ContractError("noise grids must be non-empty")
    grid = [
        {"data_fraction": df, "pixel_fraction": pf, "gaussian_sigma": sg}
        for df in data_fractions
        for pf in pixel_fractions
        for sg in sigmas
    ]
    payloads = [
        {
            "train_data": train_data,
            "test_data": test_data,
            "mechanism": mech,
            "seed": seed,
            "hyper": hyper,
            "grid": grid,
            "noise_seed": noise_seed,
        }
        for mech in mechanisms
        for seed in seeds
    ]
    if max_workers is None:
        max_workers = int(os.environ.get("GPOE_THREADS", 0)) or os.cpu_count() or 1

    rows: list[dict] = []
    failures: list[str] = []
    if max_workers <= 1:
        results = map(_try_cell, payloads)
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_try_cell, payloads))
    for payload, (cell_rows, error) in zip(payloads, results):
        if error is not None:
            failures.append(
                f"cell mechanism={payload['mechanism']} seed={payload['seed']}: {error}"
            )
        else:
            rows.extend(cell_rows)

    sort_key = lambda r: (
        r["mechanism"],
        r["seed"],
        r["test_data_fraction"],
        r["test_pixel_fraction"],
        r["test_sigma"],
    )
    rows.sort(key=sort_key)
    return rows, _aggregate_rows(rows), failures


def _try_cell(payload: dict) -> tuple[list[dict], str | None]:
    try:
        return _sweep_cell(payload), None
    except Exception as exc:  # cell failures are recorded, not fatal
        return [], f"{type(exc).__name__}: {exc}"


AGG_CSV_COLUMNS = ["mechanism", "test_data_fraction", "test_pixel_fraction", "test_sigma", "n_seeds"] + [
    f"{metric}_{stat}"
    for metric in ("mean_epe", "auc", "iou", "f1")
    for stat in ("mean", "std")
]


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (
            row["mechanism"],
            row["test_data_fraction"],
            row["test_pixel_fraction"],
            row["test_sigma"],
        )
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        cell = groups[key]
        agg = {
            "mechanism": key[0],
            "test_data_fraction": key[1],
            "test_pixel_fraction": key[2],
            "test_sigma": key[3],
            "n_seeds": len(cell),
        }
        for metric in ("mean_epe", "auc", "iou", "f1"):
            values = np.array([r[metric] for r in cell])
            agg[f"{metric}_mean"] = float(values.mean())
            agg[f"{metric}_std"] = float(values.std())
        out.append(agg)
    return out


def _cmd_sweep(args) -> int:
    config = _load_config_file(args.config)
    train_data = _merged(args, config, "train_data", None, str)
    test_data = _merged(args, config, "test_data", None, str)
    if not train_data or not test_data:
        raise ContractError("sweep requires train_data and test_data")
    for path in (train_data, test_data):
        if not Path(path).exists():
            raise ContractError(f"dataset {path!r} does not exist")
    mechanisms = _parse_list(
        _merged(args, config, "mechanisms", "poe,gpoe,moe", str), str
    )
    seeds = _parse_list(_merged(args, config, "seeds", "0,1,2", str), int)
    pixel_fractions = _parse_list(
        _merged(args, config, "test_pixel_fractions", "0.0,0.25,0.5", str), float
    )
    sigmas = _parse_list(_merged(args, config, "test_sigmas", "0.0", str), float)
    data_fractions = _parse_list(
        _merged(args, config, "test_data_fractions", "1.0", str), float
    )
    noise_seed = _merged(args, config, "noise_seed", 0, int)
    hyper = _hyper_from(args, config)

    out_dir = Path(_merged(args, config, "out", "sweep", str))
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, agg, failures = run_sweep(
        train_data,
        test_data,
        mechanisms,
        seeds,
        hyper,
        pixel_fractions,
        sigmas,
        data_fractions,
        noise_seed=noise_seed,
    )
    atomic_write_text(out_dir / "long.csv", _rows_to_csv(EVAL_CSV_COLUMNS, rows))
    atomic_write_text(out_dir / "aggregated.csv", _rows_to_csv(AGG_CSV_COLUMNS, agg))
    print(f"wrote {len(rows)} rows to {out_dir / 'long.csv'}")
    for failure in failures:
        print(f"FAILED {failure}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# fuse-demo


def _cmd_fusedemo(args) -> int:
    for name in ("var1", "var2"):
        if getattr(args, name) <= 0:
            raise ContractError(f"--{name} must be > 0")
    pairs = []
    for chunk in args.alphas.split(";"):
        pair = [float(t) for t in chunk.split(",") if t.strip()]
        if len(pair) != 2:
            raise ContractError(f"alpha pair {chunk!r} must have two entries")
        if abs(pair[0] + pair[1] - 1.0) > 1e-9:
            raise ContractError(f"alpha pair {chunk!r} must sum to 1")
        pairs.append(pair)
    if args.num_points < 2 or args.x_max <= args.x_min:
        raise ContractError("need num_points >= 2 and x_max > x_min")

    g1 = DiagonalGaussian.from_variance([args.mean1], [args.var1])
    g2 = DiagonalGaussian.from_variance([args.mean2], [args.var2])
    x = np.linspace(args.x_min, args.x_max, args.num_points)
    columns = {"x": x, "p1": density_curve(g1, x), "p2": density_curve(g2, x)}
    columns["poe"] = density_curve(poe_fuse([g1, g2]), x)
    for a1, a2 in pairs:
        fused = gpoe_fuse([g1, g2], FusionWeights([[a1], [a2]]))
        columns[f"gpoe_{a1:g}_{a2:g}"] = density_curve(fused, x)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    writer.writerow(names)
    for i in range(x.size):
        writer.writerow([repr(float(columns[n][i])) for n in names])
    atomic_write_text(args.out, buf.getvalue())
    print(f"wrote {x.size} rows x {len(names)} columns to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mechanism", choices=["poe", "gpoe", "moe"], default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    parser.add_argument(
        "--alpha-hidden-dim", dest="alpha_hidden_dim", type=int, default=None
    )
    parser.add_argument(
        "--learning-rate", dest="learning_rate", type=float, default=None
    )
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument(
        "--train-data-fraction", dest="train_data_fraction", type=float, default=None
    )
    parser.add_argument(
        "--train-pixel-fraction", dest="train_pixel_fraction", type=float, default=None
    )
    parser.add_argument("--train-sigma", dest="train_sigma", type=float, default=None)
    parser.add_argument("--config", default=None, help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpoe",
        description="Noise-robust crossmodal VAE training and evaluation harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/test datasets")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--k", type=int, default=5, help="keypoints per scene")
    p.add_argument("--g", type=int, default=16, help="grid side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--data", required=True, help="GPD1 training dataset")
    p.add_argument("--out", required=True, help="checkpoint path (GPV1)")
    p.add_argument("--log", default=None, help="training-log CSV path")
    _add_hyper_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="GPD1 test dataset")
    p.add_argument("--report", default=None, help="metric report JSON path")
    p.add_argument("--csv", default=None, help="CSV file to append one row to")
    p.add_argument("--data-fraction", dest="data_fraction", type=float, default=0.0)
    p.add_argument("--pixel-fraction", dest="pixel_fraction", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="mechanism x seed x noise comparison grid")
    p.add_argument("--train-data", dest="train_data", default=None)
    p.add_argument("--test-data", dest="test_data", default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--mechanisms", default=None, help="comma-separated list")
    p.add_argument("--seeds", default=None, help="comma-separated list")
    p.add_argument(
        "--test-pixel-fractions", dest="test_pixel_fractions", default=None
    )
    p.add_argument("--test-sigmas", dest="test_sigmas", default=None)
    p.add_argument(
        "--test-data-fractions", dest="test_data_fractions", default=None
    )
    p.add_argument("--noise-seed", dest="noise_seed", type=int, default=None)
    _add_hyper_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("fuse-demo", help="1-d fusion density curves as CSV")
    p.add_argument("--mean1", type=float, default=-1.0)
    p.add_argument("--var1", type=float, default=0.5)
    p.add_argument("--mean2", type=float, default=1.5)
    p.add_argument("--var2", type=float, default=1.0)
    p.add_argument(
        "--alphas",
        default="0.75,0.25;0.25,0.75",
        help="semicolon-separated alpha pairs, each summing to 1",
    )
    p.add_argument("--x-min", dest="x_min", type=float, default=-5.0)
    p.add_argument("--x-max", dest="x_max", type=float, default=5.0)
    p.add_argument("--num-points", dest="num_points", type=int, default=401)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_fusedemo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
