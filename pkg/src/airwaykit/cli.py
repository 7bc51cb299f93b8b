"""Command-line pipeline orchestration.

Every subcommand writes its artifacts into --out plus a run_manifest.json
naming the command, inputs, seeds and config hash, so a run can be
reproduced exactly. Errors exit with 2 (config), 3 (data) or 4 (numerics)
and print a single machine-parseable line to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import center_crop, standardize_array
from .biomarkers import (compute_segment_biomarkers, patient_rows,
                         read_biomarker_csv, write_biomarker_csv)
from .bundles import LABELS_HEADER, BundleWriter, open_bundle
from .config import RunConfig, load_config
from .errors import AirwayKitError, ConfigError, DataError, NumericalError
from .fwhm import measure_fwhm
from .labels import LABEL_FIELDS, AirwayLabel, Patch
from .models import EllipseRegressor, Refiner, build_refiner, build_regressor, measure_batch
from .perceptual import ablation_layer_sets, build_extractor
from .phantom import make_airway_tree
from .plotting import overlay_grid, pair_grid, patch_grid, plot_loss_curve
from .survival import (build_results_table, read_survival_csv, write_details,
                       write_results_table, write_survival_csv, SurvivalRecord)
from .synth import generate_dataset
from .training import (REFINER_HISTORY_HEADER, REGRESSOR_HISTORY_HEADER,
                       BundleSampler, eval_crops, load_model, train_refiner,
                       train_regressor)
from .util import derive_int_seed, format_float, item_rng
from .volume import (SegmentExcludedError, assemble_series,
                     extract_series_patches, load_volume_bundle,
                     read_centerline_csv, read_positions_csv,
                     save_volume_bundle, write_centerline_csv,
                     write_positions_csv, write_series_csv)

MEASUREMENTS_HEADER = LABELS_HEADER
FWHM_HEADER = LABELS_HEADER + ("valid_ray_fraction",)
PATIENTS_HEADER = ("patient_id", "volume_dir", "centerline_csv")
BIOMARKER_MANIFEST_HEADER = ("patient_id", "series_csv", "centerline_csv")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        _apply_determinism(args)
        config = load_config(getattr(args, "config", None))
        seed = args.seed if args.seed is not None else config.seed
        args.handler(args, config, seed)
        return 0
    except AirwayKitError as exc:
        _print_error(exc)
        return exc.exit_code


def _print_error(exc: AirwayKitError) -> None:
    message = " ".join(str(exc).split())
    print(f"airwaykit-error code={exc.exit_code} "
          f"type={type(exc).__name__} message={json.dumps(message)}",
          file=sys.stderr)


def _apply_determinism(args) -> None:
    if getattr(args, "deterministic", False):
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airwaykit",
        description="Synthetic airway patch pipeline: generation, perceptual "
                    "refinement, measurement, biomarkers, survival analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, deterministic torch kernels")
        p.set_defaults(handler=handler)
        return p

    p = command("synth-generate", cmd_synth_generate,
                "render a labeled synthetic patch bundle")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("pseudoreal-generate", cmd_pseudoreal_generate,
                "render a labeled pseudo-real patch bundle")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("train-refiner", cmd_train_refiner,
                "train the refiner on perceptual losses")
    p.add_argument("--synth", type=Path, required=True, help="synthetic bundle")
    p.add_argument("--real", type=Path, required=True, help="style-target bundle")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)

    p = command("refine", cmd_refine, "apply a trained refiner to a bundle")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="in_bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("train-cnr", cmd_train_cnr,
                "train the ellipse regressor on a labeled bundle")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--refiner", type=Path, default=None,
                   help="refine augmented crops during training")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--real-augment", action="store_true",
                   help="treat the bundle as real-domain (adds scale augmentation)")

    p = command("measure", cmd_measure,
                "regress ellipse labels for every patch in a bundle")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="in_bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--positions", type=Path, default=None,
                   help="positions CSV; also emits a per-segment series CSV")
    p.add_argument("--method", default="cnr", help="method tag for series rows")
    p.add_argument("--batch-size", type=int, default=256)

    p = command("fwhm", cmd_fwhm,
                "measure every patch with the FWHM ray baseline")
    p.add_argument("--in", dest="in_bundle", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--positions", type=Path, default=None,
                   help="positions CSV; also emits a per-segment series CSV")
    p.add_argument("--method", default="fwhm", help="method tag for series rows")

    p = command("extract-patches", cmd_extract_patches,
                "extract orthogonal patches along centerline segments")
    p.add_argument("--volume", type=Path, required=True, help="volume bundle")
    p.add_argument("--centerline", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = command("biomarkers", cmd_biomarkers,
                "compute tapering and volume biomarkers per patient")
    p.add_argument("--patients", type=Path, required=True,
                   help="CSV: patient_id,series_csv,centerline_csv")
    p.add_argument("--out", type=Path, required=True)

    p = command("survival", cmd_survival,
                "Cox models per (biomarker, method) with concordance")
    p.add_argument("--records", type=Path, required=True,
                   help="survival covariates CSV")
    p.add_argument("--biomarkers", type=Path, required=True)
    p.add_argument("--aggregation", default=None, choices=("mean", "median"))
    p.add_argument("--out", type=Path, required=True)

    p = command("simulate-cohort", cmd_simulate_cohort,
                "phantom airway trees plus survival covariates")
    p.add_argument("--out", type=Path, required=True)

    p = command("ablate-style-layers", cmd_ablate_style_layers,
                "refiner sweep over cumulative style-layer sets")
    p.add_argument("--synth", type=Path, required=True)
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    p = command("plot", cmd_plot, "loss curves, pair grids, ellipse overlays")
    p.add_argument("--loss-history", type=Path, nargs="+", default=None)
    p.add_argument("--pairs", type=Path, nargs=2, default=None,
                   metavar=("INPUT_BUNDLE", "REFINED_BUNDLE"))
    p.add_argument("--overlay", type=Path, nargs=2, default=None,
                   metavar=("BUNDLE", "MEASUREMENTS_CSV"))
    p.add_argument("--count", type=int, default=8, help="patches per grid")
    p.add_argument("--out", type=Path, required=True)

    return parser


def _write_manifest(out_dir: Path, command: str, config: RunConfig, seed: int,
                    args, inputs: dict, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "package_version": __version__,
        "config_hash": config.config_hash(),
        "seed": seed,
        "deterministic": bool(getattr(args, "deterministic", False)),
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "outputs": sorted(outputs),
    }
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    (out_dir / "run_manifest.json").write_text(text, encoding="utf-8")


def _write_history(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v
                             for v in row])


# ---------------------------------------------------------------- generation

def cmd_synth_generate(args, config: RunConfig, seed: int) -> None:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    generate_dataset(args.count, config.synth, seed, args.out)
    _write_manifest(args.out, "synth-generate", config, seed, args,
                    {}, ["manifest.txt", "patches.bin", "labels.csv"])
    print(f"wrote {args.count} synthetic patches to {args.out}")


def cmd_pseudoreal_generate(args, config: RunConfig, seed: int) -> None:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    generate_dataset(args.count, config.synth, seed, args.out,
                     domain=config.pseudoreal)
    _write_manifest(args.out, "pseudoreal-generate", config, seed, args,
                    {}, ["manifest.txt", "patches.bin", "labels.csv"])
    print(f"wrote {args.count} pseudo-real patches to {args.out}")


# ------------------------------------------------------------------ training

def _extractor_from_config(config: RunConfig):
    weights = config.paths.get("vgg16_weights")
    return build_extractor(config.extractor.variant,
                           weights_path=str(weights) if weights else None,
                           seed=config.extractor.hermetic_seed)


def cmd_train_refiner(args, config: RunConfig, seed: int) -> None:
    synth = open_bundle(args.synth)
    real = open_bundle(args.real)
    extractor = _extractor_from_config(config)
    train_config = dataclasses.replace(
        config.refiner, seed=seed,
        **{k: v for k, v in (("steps", args.steps),
                             ("batch_size", args.batch_size),
                             ("learning_rate", args.learning_rate))
           if v is not None})
    refiner = build_refiner(seed=seed)
    synth_sampler = BundleSampler(synth, config.augment, is_real=False, seed=seed)
    real_sampler = BundleSampler(real, config.augment, is_real=True, seed=seed)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_refiner(refiner, extractor, synth_sampler, real_sampler,
                           config.loss, train_config,
                           checkpoint_path=args.out / "refiner.ckpt")
    _write_history(args.out / "history.csv", REFINER_HISTORY_HEADER,
                   result.history)
    _write_manifest(args.out, "train-refiner", config, seed, args,
                    {"synth": args.synth, "real": args.real},
                    ["refiner.ckpt", "history.csv"])
    status = "diverged" if result.diverged else "finished"
    last_total = result.history[-1][1] if result.history else float("nan")
    print(f"refiner {status} after {result.steps_run} steps, "
          f"last total loss {last_total:.6g}")


def cmd_train_cnr(args, config: RunConfig, seed: int) -> None:
    bundle = open_bundle(args.bundle, need_labels=True)
    refiner = None
    if args.refiner is not None:
        model, _ = load_model(args.refiner)
        if not isinstance(model, Refiner):
            raise DataError(f"{args.refiner}: checkpoint is not a refiner")
        refiner = model
    train_config = dataclasses.replace(
        config.regressor, seed=seed,
        treat_as_real=bool(args.real_augment) or config.regressor.treat_as_real,
        **{k: v for k, v in (("epochs", args.epochs),
                             ("batch_size", args.batch_size),
                             ("learning_rate", args.learning_rate))
           if v is not None})
    model = build_regressor(seed=seed)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_regressor(model, bundle, config.augment, train_config,
                             refiner=refiner,
                             checkpoint_path=args.out / "cnr.ckpt")
    _write_history(args.out / "history.csv", REGRESSOR_HISTORY_HEADER,
                   result.history)
    _write_manifest(args.out, "train-cnr", config, seed, args,
                    {"bundle": args.bundle, "refiner": args.refiner},
                    ["cnr.ckpt", "history.csv"])
    last = result.history[-1] if result.history else (0, float("nan"), float("nan"))
    print(f"regressor trained {result.epochs_run} epochs, "
          f"val mse {last[2]:.6g}")


def cmd_refine(args, config: RunConfig, seed: int) -> None:
    model, _ = load_model(args.checkpoint)
    if not isinstance(model, Refiner):
        raise DataError(f"{args.checkpoint}: checkpoint is not a refiner")
    bundle = open_bundle(args.in_bundle)
    height = int(bundle.manifest["height"])
    width = int(bundle.manifest["width"])
    with BundleWriter(args.out, height=height, width=width,
                      pixel_spacing_mm=bundle.pixel_spacing_mm) as writer:
        chunk = 64
        for start in range(0, bundle.count, chunk):
            stop = min(start + chunk, bundle.count)
            raw = np.array(bundle.patches[start:stop], dtype=np.float64)
            means = raw.mean(axis=(1, 2), keepdims=True)
            stds = raw.std(axis=(1, 2), keepdims=True)
            if np.any(stds == 0) or not np.all(np.isfinite(stds)):
                raise DataError(f"{args.in_bundle}: constant patch cannot be "
                                "standardized for refinement")
            batch = torch.from_numpy(((raw - means) / stds).astype(np.float32))
            with torch.no_grad():
                refined = model(batch.unsqueeze(1)).squeeze(1).numpy()
            restored = refined.astype(np.float64) * stds + means
            for j in range(stop - start):
                label = bundle.labels[start + j] if bundle.labels is not None else None
                writer.add(restored[j].astype(np.float32), label)
    _write_manifest(args.out, "refine", config, seed, args,
                    {"checkpoint": args.checkpoint, "in": args.in_bundle},
                    ["manifest.txt", "patches.bin", "labels.csv"])
    print(f"refined {bundle.count} patches to {args.out}")


# --------------------------------------------------------------- measurement

def _measurement_row(item_id: str, label: AirwayLabel | None) -> list:
    if label is None:
        values = [format_float(float("nan"))] * len(LABEL_FIELDS) + ["0"]
    else:
        values = ([format_float(getattr(label, f)) for f in LABEL_FIELDS]
                  + [str(int(label.has_adjacent))])
    return [item_id] + values


def read_measurements_csv(path) -> dict[str, AirwayLabel | None]:
    """id -> label (None where the measurement failed), by position id."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"measurements file not found: {path}")
    out: dict[str, AirwayLabel | None] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:len(MEASUREMENTS_HEADER)]) != MEASUREMENTS_HEADER:
            raise DataError(f"{path}: bad measurements header {header!r}")
        for lineno, row in enumerate(reader, 2):
            if len(row) < len(MEASUREMENTS_HEADER):
                raise DataError(f"{path}:{lineno}: too few fields")
            try:
                values = [float(v) for v in row[1:len(LABEL_FIELDS) + 1]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if all(math.isfinite(v) for v in values):
                out[row[0]] = AirwayLabel(
                    **dict(zip(LABEL_FIELDS, values)),
                    has_adjacent=row[len(LABEL_FIELDS) + 1] == "1")
            else:
                out[row[0]] = None
    return out


def _series_ids(args, bundle):
    if args.positions is not None:
        positions = read_positions_csv(args.positions)
        if len(positions) != bundle.count:
            raise DataError(
                f"{args.positions}: {len(positions)} positions for "
                f"{bundle.count} patches")
        return positions, [p.id for p in positions]
    return None, [str(i) for i in range(bundle.count)]


def _emit_series(args, config: RunConfig, positions, labels_by_id,
                 out_dir: Path) -> list[str]:
    series_list, exclusions = assemble_series(positions, labels_by_id,
                                              args.method, config.series)
    write_series_csv(out_dir / "series.csv", series_list)
    for exc in exclusions:
        print(f"excluded segment {exc.segment_id}: {exc.reason}")
    return ["series.csv"]


def cmd_measure(args, config: RunConfig, seed: int) -> None:
    model, _ = load_model(args.checkpoint)
    if not isinstance(model, EllipseRegressor):
        raise DataError(f"{args.checkpoint}: checkpoint is not a regressor")
    bundle = open_bundle(args.in_bundle)
    positions, ids = _series_ids(args, bundle)
    crops = eval_crops(bundle, model.input_size)
    labels: list[AirwayLabel] = []
    for start in range(0, len(crops), args.batch_size):
        labels.extend(measure_batch(model, crops[start:start + args.batch_size]))
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "measurements.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MEASUREMENTS_HEADER)
        for item_id, label in zip(ids, labels):
            writer.writerow(_measurement_row(item_id, label))
    outputs = ["measurements.csv"]
    if positions is not None:
        outputs += _emit_series(args, config, positions,
                                dict(zip(ids, labels)), args.out)
    _write_manifest(args.out, "measure", config, seed, args,
                    {"checkpoint": args.checkpoint, "in": args.in_bundle,
                     "positions": args.positions}, outputs)
    print(f"measured {len(labels)} patches with the regressor")


def cmd_fwhm(args, config: RunConfig, seed: int) -> None:
    bundle = open_bundle(args.in_bundle)
    positions, ids = _series_ids(args, bundle)
    labels: list[AirwayLabel | None] = []
    fractions: list[float] = []
    for i in range(bundle.count):
        patch = Patch(pixels=np.array(bundle.patches[i]),
                      spacing_mm=bundle.pixel_spacing_mm)
        try:
            result = measure_fwhm(patch, config=config.fwhm)
            labels.append(result.label)
            fractions.append(result.valid_ray_fraction)
        except (DataError, NumericalError):
            labels.append(None)
            fractions.append(0.0)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "measurements.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FWHM_HEADER)
        for item_id, label, fraction in zip(ids, labels, fractions):
            writer.writerow(_measurement_row(item_id, label)
                            + [format_float(fraction)])
    outputs = ["measurements.csv"]
    if positions is not None:
        outputs += _emit_series(args, config, positions,
                                dict(zip(ids, labels)), args.out)
    _write_manifest(args.out, "fwhm", config, seed, args,
                    {"in": args.in_bundle, "positions": args.positions},
                    outputs)
    n_ok = sum(1 for v in labels if v is not None)
    print(f"fwhm measured {n_ok}/{len(labels)} patches")


def cmd_extract_patches(args, config: RunConfig, seed: int) -> None:
    volume = load_volume_bundle(args.volume)
    segments = read_centerline_csv(args.centerline)
    series_config = config.series
    all_positions = []
    args.out.mkdir(parents=True, exist_ok=True)
    with BundleWriter(args.out, height=series_config.patch_size_px,
                      width=series_config.patch_size_px,
                      pixel_spacing_mm=series_config.patch_spacing_mm) as writer:
        for segment in segments:
            try:
                positions, patches = extract_series_patches(volume, segment,
                                                            series_config)
            except SegmentExcludedError as exc:
                print(f"excluded segment {exc.segment_id}: {exc.reason}")
                continue
            for position, patch in zip(positions, patches):
                writer.add(patch.pixels)
                all_positions.append(position)
    write_positions_csv(args.out / "positions.csv", all_positions)
    _write_manifest(args.out, "extract-patches", config, seed, args,
                    {"volume": args.volume, "centerline": args.centerline},
                    ["manifest.txt", "patches.bin", "positions.csv"])
    print(f"extracted {len(all_positions)} patches from "
          f"{len(segments)} segments")


# ---------------------------------------------------- biomarkers and survival

def _read_simple_csv(path: Path, header: tuple[str, ...]) -> list[list[str]]:
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got is None or tuple(got) != header:
            raise DataError(f"{path}: bad header {got!r}, expected {list(header)}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields")
            rows.append(row)
    return rows


def cmd_biomarkers(args, config: RunConfig, seed: int) -> None:
    from .volume import read_series_csv

    manifest_rows = _read_simple_csv(args.patients, BIOMARKER_MANIFEST_HEADER)
    base = args.patients.parent
    per_patient: dict[str, dict] = {}
    for patient_id, series_path, centerline_path in manifest_rows:
        entry = per_patient.setdefault(patient_id,
                                       {"series": [], "centerlines": set()})
        entry["series"].append(base / series_path if not Path(series_path).is_absolute()
                               else Path(series_path))
        path = (base / centerline_path
                if not Path(centerline_path).is_absolute() else Path(centerline_path))
        entry["centerlines"].add(path)
    rows = []
    for patient_id in sorted(per_patient):
        entry = per_patient[patient_id]
        generations: dict[str, int] = {}
        for path in sorted(entry["centerlines"]):
            for segment in read_centerline_csv(path):
                generations[segment.segment_id] = segment.generation
        by_method: dict[str, dict] = {}
        for path in entry["series"]:
            for series in read_series_csv(path):
                by_method.setdefault(series.method, {})[series.segment_id] = series
        segments = []
        for method in sorted(by_method):
            segments.extend(compute_segment_biomarkers(
                by_method[method], generations,
                min_generation=config.biomarkers.min_generation))
        rows.extend(patient_rows(patient_id, segments))
    args.out.mkdir(parents=True, exist_ok=True)
    write_biomarker_csv(args.out / "biomarkers.csv", rows)
    _write_manifest(args.out, "biomarkers", config, seed, args,
                    {"patients": args.patients}, ["biomarkers.csv"])
    print(f"wrote {len(rows)} biomarker rows for {len(per_patient)} patients")


def cmd_survival(args, config: RunConfig, seed: int) -> None:
    records = read_survival_csv(args.records)
    biomarker_rows = read_biomarker_csv(args.biomarkers)
    aggregation = args.aggregation or config.biomarkers.aggregation
    table, detail = build_results_table(records, biomarker_rows, aggregation)
    args.out.mkdir(parents=True, exist_ok=True)
    write_results_table(args.out / "results_table.csv", table)
    write_details(args.out / "coefficients.csv", detail)
    _write_manifest(args.out, "survival", config, seed, args,
                    {"records": args.records, "biomarkers": args.biomarkers},
                    ["results_table.csv", "coefficients.csv"])
    for row in table:
        print(f"{row.biomarker:15s} {row.method:12s} {row.model:12s} "
              f"n={row.n_patients:<4d} C={row.c_index:.3f} p={row.p_value:.5f}")


def cmd_simulate_cohort(args, config: RunConfig, seed: int) -> None:
    cohort_cfg = config.cohort
    args.out.mkdir(parents=True, exist_ok=True)
    rng = item_rng(seed, 21)
    severities = rng.uniform(0.0, 1.0, size=cohort_cfg.n_patients)
    rates = cohort_cfg.baseline_rate_per_day * np.exp(
        cohort_cfg.severity_log_hazard * severities)
    t_event = rng.exponential(1.0 / rates)
    if cohort_cfg.censor_fraction > 0:
        lo, hi = cohort_cfg.baseline_rate_per_day * 1e-6, cohort_cfg.baseline_rate_per_day * 1e6
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if float(np.mean(mid / (mid + rates))) < cohort_cfg.censor_fraction:
                lo = mid
            else:
                hi = mid
        t_censor = rng.exponential(1.0 / mid, size=cohort_cfg.n_patients)
        time = np.minimum(t_event, t_censor)
        event = t_event <= t_censor
    else:
        time, event = t_event, np.ones(cohort_cfg.n_patients, dtype=bool)

    patients_rows = []
    records = []
    truth_rows = []
    for i in range(cohort_cfg.n_patients):
        patient_id = f"p{i:03d}"
        patient_dir = args.out / "patients" / patient_id
        tree = make_airway_tree(seed=derive_int_seed(seed, i, 31),
                                severity=float(severities[i]),
                                config=config.phantom,
                                generations=cohort_cfg.tree_generations)
        save_volume_bundle(tree.volume, patient_dir / "volume")
        write_centerline_csv(patient_dir / "centerline.csv", tree.segments)
        patients_rows.append([patient_id,
                              str(Path("patients") / patient_id / "volume"),
                              str(Path("patients") / patient_id / "centerline.csv")])
        records.append(SurvivalRecord(
            patient_id=patient_id, time_days=float(max(time[i], 1e-3)),
            event=bool(event[i]), age=float(rng.uniform(45, 85)),
            gender=float(rng.uniform() < 0.5), smoker=float(rng.uniform() < 0.6),
            fvc=float(rng.uniform(50, 120)), dlco=float(rng.uniform(30, 90))))
        truth_rows.append([patient_id, format_float(float(severities[i]))])
    with open(args.out / "patients.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PATIENTS_HEADER)
        writer.writerows(patients_rows)
    write_survival_csv(args.out / "cohort.csv", records)
    with open(args.out / "severity_truth.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("patient_id", "severity"))
        writer.writerows(truth_rows)
    _write_manifest(args.out, "simulate-cohort", config, seed, args, {},
                    ["patients.csv", "cohort.csv", "severity_truth.csv"])
    print(f"simulated {cohort_cfg.n_patients} patients "
          f"({int(np.sum(event))} events)")


# ----------------------------------------------------- ablation and plotting

def cmd_ablate_style_layers(args, config: RunConfig, seed: int) -> None:
    synth = open_bundle(args.synth)
    real = open_bundle(args.real)
    extractor = _extractor_from_config(config)
    args.out.mkdir(parents=True, exist_ok=True)
    train_config = dataclasses.replace(
        config.refiner, seed=seed,
        **{k: v for k, v in (("steps", args.steps),
                             ("batch_size", args.batch_size))
           if v is not None})
    synth_sampler = BundleSampler(synth, config.augment, is_real=False, seed=seed)
    real_sampler = BundleSampler(real, config.augment, is_real=True, seed=seed)
    show = min(8, synth.count)
    raw = [standardize_array(np.array(synth.patches[i])) for i in range(show)]
    crop = config.augment.crop_size_px
    raw = [center_crop(p, crop) for p in raw]
    rows = []
    outputs = []
    for layer_set in ablation_layer_sets():
        tag = "+".join(layer_set)
        loss_config = dataclasses.replace(config.loss, style_layers=layer_set)
        refiner = build_refiner(seed=seed)
        result = train_refiner(refiner, extractor, synth_sampler, real_sampler,
                               loss_config, train_config,
                               checkpoint_path=args.out / f"refiner_{tag}.ckpt")
        tail = result.history[-min(50, len(result.history)):]
        mean_total = float(np.mean([r[1] for r in tail])) if tail else float("nan")
        with torch.no_grad():
            refined = refiner(torch.from_numpy(
                np.stack(raw)[:, None].astype(np.float32))).squeeze(1).numpy()
        image = f"refined_{tag}.png"
        pair_grid(raw, list(refined), synth.pixel_spacing_mm,
                  args.out / image, n_pairs=show)
        rows.append([tag, result.steps_run, format_float(mean_total),
                     int(result.diverged)])
        outputs += [image, f"refiner_{tag}.ckpt"]
    with open(args.out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("style_layers", "steps", "mean_tail_total_loss",
                         "diverged"))
        writer.writerows(rows)
    _write_manifest(args.out, "ablate-style-layers", config, seed, args,
                    {"synth": args.synth, "real": args.real},
                    outputs + ["ablation.csv"])
    for row in rows:
        print(f"style {row[0]:28s} tail loss {row[2]}")


def cmd_plot(args, config: RunConfig, seed: int) -> None:
    if not (args.loss_history or args.pairs or args.overlay):
        raise ConfigError(
            "plot needs at least one of --loss-history, --pairs, --overlay")
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = []
    inputs = {}
    if args.loss_history:
        for path in args.loss_history:
            name = f"loss_{Path(path).stem}.png"
            plot_loss_curve(path, args.out / name)
            outputs.append(name)
        inputs["loss_history"] = ";".join(str(p) for p in args.loss_history)
    if args.pairs:
        left = open_bundle(args.pairs[0])
        right = open_bundle(args.pairs[1])
        n = min(args.count, left.count, right.count)
        pair_grid([np.array(left.patches[i]) for i in range(n)],
                  [np.array(right.patches[i]) for i in range(n)],
                  left.pixel_spacing_mm, args.out / "pairs.png", n_pairs=n)
        outputs.append("pairs.png")
        inputs["pairs"] = f"{args.pairs[0]};{args.pairs[1]}"
    if args.overlay:
        bundle = open_bundle(args.overlay[0])
        measured = read_measurements_csv(args.overlay[1])
        n = min(args.count, bundle.count)
        ids = (bundle.ids if bundle.ids is not None
               else [str(i) for i in range(bundle.count)])
        patches = [np.array(bundle.patches[i]) for i in range(n)]
        labels = [measured.get(ids[i]) for i in range(n)]
        overlay_grid(patches, labels, bundle.pixel_spacing_mm,
                     args.out / "overlay.png")
        outputs.append("overlay.png")
        inputs["overlay"] = f"{args.overlay[0]};{args.overlay[1]}"
    _write_manifest(args.out, "plot", config, seed, args, inputs, outputs)
    print(f"wrote {len(outputs)} figures to {args.out}")


if __name__ == "__main__":
    sys.exit(main())
