"""Command-line front end: ``idifkin <subcommand> ...``.

Every subcommand writes ``provenance.json`` (config echo, input digests,
tool version) next to its outputs. Exit status is 0 only when every
requested output was written.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from . import io as vio
from .core import FineGrid, KineticParams, Tac
from .fitting import (
    KINETIC_NAMES,
    PRESETS,
    FitMode,
    TacModel,
    fit_report,
    fit_tac,
    fit_voxelwise,
    get_preset,
    relative_mse_change,
    warm_start_chain,
)
from .input_functions import IDIF_NAMES, InputFunctionSet, extract_idif
from .morphology import (
    DEFAULT_RADII_MM,
    EmptySurrogateError,
    center_of_mass,
    nearest_component,
    renal_pelvis_surrogate,
)
from .optimizer import FitError
from .stats import format_table, read_cohort_csv, summarize_cohort
from .volume import LabelVolume

logger = logging.getLogger("idifkin")

IDIF_FLAGS = {name: f"idif_{name}" for name in IDIF_NAMES}
WEIGHT_FOR_IDIF = dict(zip(IDIF_NAMES, ("alpha", "beta", "gamma", "delta")))


class CliError(RuntimeError):
    """User-facing failure; printed without a traceback."""


@dataclass
class RunConfig:
    command: str
    inputs: dict = field(default_factory=dict)
    preset: str = None
    mode: str = None
    fine_step_s: float = 0.5
    radii_mm: tuple = DEFAULT_RADII_MM
    out: str = "."
    seed: int = 0
    threads: int = 1
    options: dict = field(default_factory=dict)

    def validate(self):
        if self.preset is not None and self.preset not in PRESETS:
            raise CliError(f"unknown preset {self.preset!r}")
        if self.mode is not None and self.mode not in ("baseline", "multi", "both"):
            raise CliError(f"unknown mode {self.mode!r}")
        if not self.fine_step_s > 0:
            raise CliError("--fine-step-s must be positive")
        if len(self.radii_mm) != 3 or any(r <= 0 for r in self.radii_mm):
            raise CliError("--radii needs three positive values")
        if self.threads < 1:
            raise CliError("--threads must be >= 1")
        for name, path in self.inputs.items():
            if path is None:
                continue
            paths = path if isinstance(path, (list, tuple)) else [path]
            for p in paths:
                if not Path(p).exists():
                    raise CliError(f"input file not found: {p} ({name})")
        return self


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _triple(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return values


def _digests(paths):
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file():
                    out[str(child)] = vio.file_digest(child)
        elif p.exists():
            out[str(p)] = vio.file_digest(p)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_provenance(config, input_paths, outputs):
    record = {
        "tool": "idifkin",
        "tool_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "config": _jsonable(asdict(config)),
        "input_digests": _digests(input_paths),
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    _write_json(Path(config.out) / "provenance.json", record)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _resolve_label(mask_path, label):
    """Integer label from a number or an organ name in the sidecar."""
    if label is None:
        return None
    try:
        return int(label)
    except ValueError:
        pass
    names = vio.read_label_names(mask_path)
    for value, name in names.items():
        if name == label:
            return value
    raise CliError(f"label {label!r} not found in {vio.label_sidecar_path(mask_path)}")


def _load_idifs(args, preset, mode):
    """Read the IDIF CSVs needed by (preset, mode); unused ones become zero curves."""
    columns = (args.col_start, args.col_duration, args.col_value)
    needed = {"aorta"}
    if mode != "baseline":
        needed |= {n for n in IDIF_NAMES if WEIGHT_FOR_IDIF[n] in preset.free_weights}
    tacs = {}
    for name in IDIF_NAMES:
        path = getattr(args, IDIF_FLAGS[name])
        if path is None:
            if name in needed:
                raise CliError(
                    f"--idif-{name} is required for preset {preset.organ!r} in mode {mode!r}"
                )
            continue
        if not Path(path).exists():
            raise CliError(f"IDIF file not found: {path} (--idif-{name})")
        try:
            tacs[name] = vio.read_tac_csv(path, columns)
        except (ValueError, KeyError) as exc:
            raise CliError(f"cannot read {path}: {exc}") from None
    grid = tacs["aorta"].grid
    for name in IDIF_NAMES:
        if name not in tacs:
            tacs[name] = Tac(grid, np.zeros(len(grid)))
        elif tacs[name].grid != grid:
            raise CliError(f"--idif-{name} is on a different frame grid than --idif-aorta")
    return InputFunctionSet(**tacs)


def _idif_paths(args):
    return [getattr(args, IDIF_FLAGS[n]) for n in IDIF_NAMES if getattr(args, IDIF_FLAGS[n])]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_extract_idif(args):
    config = RunConfig(
        "extract-idif",
        inputs={"pet_dir": args.pet_dir, "mask": args.mask, "timing": args.timing},
        out=args.out,
        seed=args.seed,
        threads=args.threads,
        options={"labels": list(args.label or [])},
    ).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes, grid, frame_paths = vio.read_dynamic(args.pet_dir, args.timing)
    mask = vio.read_volume(args.mask, kind="label")
    names = vio.read_label_names(args.mask)
    labels = args.label or [str(v) for v in mask.labels()]
    if not labels:
        raise CliError(f"{args.mask}: mask is empty")
    outputs = []
    for text in labels:
        label = _resolve_label(args.mask, text)
        if mask.count(label) == 0:
            raise CliError(f"label {text} not present in {args.mask}")
        try:
            tac = extract_idif(volumes, mask, grid, label=label)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        stem = names.get(label, f"label{label}")
        path = out / f"idif_{stem}.csv"
        vio.write_tac_csv(path, tac)
        outputs.append(path)
    timing = args.timing or Path(args.pet_dir) / "timing.json"
    _write_provenance(config, frame_paths + [Path(args.mask), Path(timing)], outputs)
    return outputs


def cmd_renal_pelvis(args):
    config = RunConfig(
        "renal-pelvis",
        inputs={"mask": args.mask},
        radii_mm=tuple(args.radii),
        out=args.out,
        options={"labels": list(args.label or [])},
    ).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = vio.read_volume(args.mask, kind="label")
    if args.label:
        keep = [_resolve_label(args.mask, t) for t in args.label]
        mask = mask.with_data(np.where(np.isin(mask.data, keep), mask.data, 0))
    report = {}
    try:
        surrogate = renal_pelvis_surrogate(mask, tuple(args.radii), report=report)
    except EmptySurrogateError as exc:
        raise CliError(str(exc)) from None
    except ValueError as exc:
        raise CliError(f"{args.mask}: {exc}") from None
    suffix = ".nii.gz" if str(args.mask).endswith(".nii.gz") else ".nii" if str(args.mask).endswith(".nii") else ""
    mask_out = vio.write_volume(out / f"renal_pelvis{suffix}", surrogate)
    vio.write_label_names(mask_out, {lab: f"renal_pelvis_{lab}" for lab in surrogate.labels()})
    report_path = out / "renal_pelvis_report.json"
    _write_json(report_path, report)
    _write_provenance(config, [args.mask], [mask_out, report_path])
    return [mask_out, report_path]


def cmd_nearest_component(args):
    config = RunConfig(
        "nearest-component",
        inputs={"mask": args.mask, "ref_mask": args.ref_mask},
        out=args.out,
        options={"label": args.label, "reference": args.reference, "ref_label": args.ref_label},
    ).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = vio.read_volume(args.mask, kind="label")
    label = _resolve_label(args.mask, args.label)
    if args.reference is not None:
        reference = tuple(args.reference)
    elif args.ref_mask is not None:
        ref = vio.read_volume(args.ref_mask, kind="label")
        try:
            reference = center_of_mass(ref, _resolve_label(args.ref_mask, args.ref_label))
        except ValueError as exc:
            raise CliError(f"{args.ref_mask}: {exc}") from None
    else:
        raise CliError("give --reference X,Y,Z or --ref-mask")
    try:
        kept = nearest_component(mask, reference, label=label)
    except ValueError as exc:
        raise CliError(f"{args.mask}: {exc}") from None
    suffix = ".nii.gz" if str(args.mask).endswith(".nii.gz") else ".nii" if str(args.mask).endswith(".nii") else ""
    mask_out = vio.write_volume(out / f"nearest_component{suffix}", kept)
    report_path = out / "nearest_component_report.json"
    _write_json(
        report_path,
        {
            "reference_mm": [float(c) for c in reference],
            "kept_voxels": kept.count(),
            "input_voxels": mask.count(label),
            "kept_centroid_mm": list(center_of_mass(kept)),
        },
    )
    _write_provenance(config, [p for p in (args.mask, args.ref_mask) if p], [mask_out, report_path])
    return [mask_out, report_path]


def _write_curves(path, grid, series):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("frame_start_s", "frame_duration_s", "frame_mid_s", "curve", "value_kbq_ml"))
        for name, values in series.items():
            for (start, duration), mid, value in zip(grid.frames, grid.midpoints.tolist(), values):
                writer.writerow((repr(start), repr(duration), repr(mid), name, repr(float(value))))


def cmd_fit(args):
    config = RunConfig(
        "fit",
        inputs={"tac": args.tac},
        preset=args.preset,
        mode=args.mode,
        fine_step_s=args.fine_step_s,
        out=args.out,
        seed=args.seed,
        options={"multistart": args.multistart},
    ).validate()
    preset = get_preset(args.preset)
    idifs = _load_idifs(args, preset, args.mode)
    tac = vio.read_tac_csv(args.tac, (args.col_start, args.col_duration, args.col_value))
    if tac.grid != idifs.grid:
        raise CliError(f"{args.tac} is on a different frame grid than the IDIFs")
    fine = FineGrid.covering(tac.grid, args.fine_step_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digests = _digests([args.tac] + _idif_paths(args))

    try:
        if args.mode == "baseline":
            fits = {"baseline": fit_tac(tac, idifs, preset, "baseline", fine, multistart=args.multistart, seed=args.seed)}
        else:
            baseline, multi = warm_start_chain(tac, idifs, preset, fine)
            fits = {"multi": multi} if args.mode == "multi" else {"baseline": baseline, "multi": multi}
    except FitError as exc:
        raise CliError(str(exc)) from None

    report = {"preset": preset.organ, "mode": args.mode, "fits": {}}
    curves = {"measured": tac.values}
    for mode_name, result in fits.items():
        report["fits"][mode_name] = fit_report(result, preset, mode_name, digests)
        curves[f"predicted_{mode_name}"] = TacModel(idifs, preset, mode_name, fine).predict(result.x)
    if "baseline" in fits and "multi" in fits and fits["baseline"].mse > 0:
        report["relative_mse_change_pct"] = relative_mse_change(fits["baseline"], fits["multi"])
    report_path = out / "fit_report.json"
    curves_path = out / "fitted_curves.csv"
    _write_json(report_path, report)
    _write_curves(curves_path, tac.grid, curves)
    _write_provenance(config, [args.tac] + _idif_paths(args), [report_path, curves_path])
    return [report_path, curves_path]


def cmd_paramap(args):
    config = RunConfig(
        "paramap",
        inputs={"pet_dir": args.pet_dir, "mask": args.mask, "timing": args.timing},
        preset=args.preset,
        mode=args.mode,
        fine_step_s=args.fine_step_s,
        out=args.out,
        seed=args.seed,
        threads=args.threads,
        options={"label": args.label},
    ).validate()
    preset = get_preset(args.preset)
    idifs = _load_idifs(args, preset, args.mode)
    volumes, grid, frame_paths = vio.read_dynamic(args.pet_dir, args.timing)
    if grid != idifs.grid:
        raise CliError("PET frame timing does not match the IDIF frame grid")
    mask = vio.read_volume(args.mask, kind="label")
    label = _resolve_label(args.mask, args.label)
    fine = FineGrid.covering(grid, args.fine_step_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(done, total):
        if done == total or done % max(1, total // 10) == 0:
            logger.info("fitted %d/%d voxels", done, total)

    try:
        maps = fit_voxelwise(
            volumes, mask, idifs, preset, args.mode, fine, threads=args.threads, label=label, progress=progress
        )
    except (ValueError, FitError) as exc:
        raise CliError(str(exc)) from None
    outputs = []
    for mode_name, volumes_by_param in maps.maps.items():
        for name, vol in volumes_by_param.items():
            outputs.append(vio.write_volume(out / f"{mode_name}_{name}", vol))
    if args.mode == "both":
        for name in KINETIC_NAMES + ("alpha",):
            outputs.append(vio.write_volume(out / f"diff_{name}", maps.difference(name)))
    failures_path = out / "failed_voxels.json"
    _write_json(failures_path, [{"voxel": list(v), "error": e} for v, e in maps.failures])
    outputs.append(failures_path)
    timing = args.timing or Path(args.pet_dir) / "timing.json"
    _write_provenance(config, frame_paths + [Path(args.mask), Path(timing)] + _idif_paths(args), outputs)
    return outputs


def cmd_cohort(args):
    config = RunConfig("cohort", inputs={"cohort": args.cohort}, out=args.out).validate()
    try:
        cohorts = read_cohort_csv(args.cohort)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not cohorts:
        raise CliError(f"{args.cohort}: no subjects")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [summarize_cohort(cohorts[organ]) for organ in sorted(cohorts)]
    json_path = out / "cohort_summary.json"
    table_path = out / "cohort_table.txt"
    _write_json(json_path, {"organs": rows})
    table = format_table(rows)
    table_path.write_text(table)
    sys.stdout.write(table)
    _write_provenance(config, [args.cohort], [json_path, table_path])
    return [json_path, table_path]


def _parse_params(text, preset):
    values = {"k1": 0.6, "k2": 0.8, "k3": 0.08, "v_b": 0.1, "alpha": 0.6}
    free = preset.free_weights
    for w in free[1:]:
        values[w] = 0.4 if w != "delta" else -0.2
    if text:
        for item in text.split(","):
            key, _, value = item.partition("=")
            if key.strip() not in KineticParams.NAMES:
                raise CliError(f"unknown parameter {key!r} in --params")
            values[key.strip()] = float(value)
    return KineticParams(**values)


def cmd_synth(args):
    config = RunConfig(
        "synth",
        preset=args.preset,
        fine_step_s=args.fine_step_s,
        out=args.out,
        seed=args.seed,
        options={"params": args.params, "noise_sd": args.noise_sd, "phantom": args.phantom},
    ).validate()
    from .core import protocol_grid

    preset = get_preset(args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = protocol_grid()
    idifs = vio.synth_bolus_idifs(grid, args.seed)
    fine = FineGrid.covering(grid, args.fine_step_s)
    outputs = [out / "timing.json"]
    vio.write_timing(outputs[0], grid)
    for name in IDIF_NAMES:
        path = out / f"idif_{name}.csv"
        vio.write_tac_csv(path, getattr(idifs, name))
        outputs.append(path)
    params = _parse_params(args.params, preset)
    try:
        tac = vio.synth_tac(
            params, idifs, preset, args.noise_sd, args.seed, fine, sidecar=out / "tac.truth.json"
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    vio.write_tac_csv(out / "tac.csv", tac)
    outputs += [out / "tac.csv", out / "tac.truth.json"]
    if args.phantom:
        dims = (10, 10, 10)
        region_a = np.zeros(dims, bool)
        region_b = np.zeros(dims, bool)
        region_a[2:5, 2:8, 3:7] = True
        region_b[6:9, 2:8, 3:7] = True
        other = params.replace(k1=params.k1 * 0.5, k3=params.k3 * 1.5, v_b=params.v_b * 0.6)
        volumes, mask = vio.synth_dynamic_phantom(grid, idifs, [(region_a, params), (region_b, other)], dims, preset=preset)
        vio.write_dynamic(out / "pet", volumes, grid)
        mask_path = vio.write_volume(out / "phantom_mask", mask)
        vio.write_label_names(mask_path, {1: "region_a", 2: "region_b"})
        _write_json(
            out / "phantom.truth.json",
            {"region_a": params.as_dict(), "region_b": other.as_dict(), "preset": preset.organ},
        )
        outputs += [out / "pet", mask_path, out / "phantom.truth.json"]
    _write_provenance(config, [], outputs)
    return outputs


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_common(p, threads=False):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    if threads:
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    else:
        p.set_defaults(threads=1)


def _add_idif_flags(p):
    for name in IDIF_NAMES:
        p.add_argument(f"--idif-{name}", dest=IDIF_FLAGS[name], help=f"{name} IDIF CSV")
    _add_csv_columns(p)


def _add_csv_columns(p):
    p.add_argument("--col-start", default=vio.TAC_COLUMNS[0], help="CSV column with frame start (s)")
    p.add_argument("--col-duration", default=vio.TAC_COLUMNS[1], help="CSV column with frame duration (s)")
    p.add_argument("--col-value", default=vio.TAC_COLUMNS[2], help="CSV column with activity (kBq/ml)")


def _add_fit_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), default="generic")
    p.add_argument("--mode", choices=("baseline", "multi", "both"), default="both")
    p.add_argument("--fine-step-s", type=float, default=0.5)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="idifkin", description="Multi-IDIF two-compartment kinetic modelling for dynamic FDG PET."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-idif", help="mean activity per frame inside mask labels")
    p.add_argument("--pet-dir", required=True)
    p.add_argument("--timing", help="frame timing JSON (default: PET_DIR/timing.json)")
    p.add_argument("--mask", required=True)
    p.add_argument("--label", action="append", help="label value or organ name; repeatable")
    _add_common(p, threads=True)
    p.set_defaults(func=cmd_extract_idif)

    p = sub.add_parser("renal-pelvis", help="renal-pelvis surrogate from a kidney mask")
    p.add_argument("--mask", required=True, help="kidney mask")
    p.add_argument("--label", action="append", help="kidney label(s) to use; default all")
    p.add_argument("--radii", type=_triple, default=DEFAULT_RADII_MM, metavar="RX,RY,RZ")
    _add_common(p)
    p.set_defaults(func=cmd_renal_pelvis)

    p = sub.add_parser("nearest-component", help="keep the component closest to a reference")
    p.add_argument("--mask", required=True)
    p.add_argument("--label")
    p.add_argument("--reference", type=_triple, metavar="X,Y,Z", help="reference point in mm")
    p.add_argument("--ref-mask", help="mask whose centroid is the reference (e.g. liver)")
    p.add_argument("--ref-label")
    _add_common(p)
    p.set_defaults(func=cmd_nearest_component)

    p = sub.add_parser("fit", help="fit an organ TAC (baseline and/or multi-IDIF)")
    p.add_argument("--tac", required=True)
    _add_idif_flags(p)
    _add_fit_flags(p)
    p.add_argument("--multistart", type=int, default=0, help="extra random starts (baseline mode)")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("paramap", help="voxelwise parametric maps")
    p.add_argument("--pet-dir", required=True)
    p.add_argument("--timing")
    p.add_argument("--mask", required=True)
    p.add_argument("--label")
    _add_idif_flags(p)
    _add_fit_flags(p)
    _add_common(p, threads=True)
    p.set_defaults(func=cmd_paramap)

    p = sub.add_parser("cohort", help="MSE comparison table with exact Wilcoxon test")
    p.add_argument("--cohort", required=True, help="CSV: subject_id,organ,mse_baseline,mse_multi")
    _add_common(p)
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("synth", help="synthetic IDIFs, TAC and optional voxel phantom")
    p.add_argument("--preset", choices=sorted(PRESETS), default="liver")
    p.add_argument("--params", help="e.g. k1=0.6,k2=0.8,k3=0.08,v_b=0.1,alpha=0.6,beta=0.4")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--fine-step-s", type=float, default=0.5)
    p.add_argument("--phantom", action="store_true", help="also write a 10x10x10 two-region phantom")
    _add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except CliError as exc:
        print(f"idifkin {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, vio.VolumeFormatError) as exc:
        print(f"idifkin {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
