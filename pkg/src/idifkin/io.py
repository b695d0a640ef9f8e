"""Reading and writing volumes, curves and frame timing; synthetic test data.

Native volume format: ``<name>.f32raw`` (little-endian float32, x fastest)
next to ``<name>.json`` holding ``dims``, ``spacing_mm``, ``origin_mm``,
``kind`` and the payload's ``sha256``.

Clinical masks may also be read from (and written to) single-file NIfTI-1
volumes, optionally gzip-compressed. Orientation fields of such headers are
kept verbatim in ``volume.meta["nifti_header"]`` and never interpreted.
"""

import csv
import gzip
import hashlib
import io as _io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FineGrid, FrameGrid, KineticParams, Tac, frame_average, solve_ode_reference
from .input_functions import InputFunctionSet, interp_to_fine, mix_input
from .volume import LabelVolume, ScalarVolume

TAC_COLUMNS = ("frame_start_s", "frame_duration_s", "value_kbq_ml")
RAW_SUFFIX = ".f32raw"
NIFTI_HEADER_SIZE = 348


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file."""


def sha256_bytes(payload):
    return hashlib.sha256(payload).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Frame timing and TAC CSV
# --------------------------------------------------------------------------


def write_timing(path, grid):
    frames = [{"start_s": s, "duration_s": d} for s, d in grid.frames]
    _dump_json(path, {"frames": frames})


def read_timing(path):
    try:
        frames = json.loads(Path(path).read_text())["frames"]
        return FrameGrid.from_frames((f["start_s"], f["duration_s"]) for f in frames)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a frame timing file ({exc})") from None


def write_tac_csv(path, tac):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TAC_COLUMNS)
        for (start, duration), value in zip(tac.grid.frames, tac.values.tolist()):
            writer.writerow([repr(start), repr(duration), repr(value)])


def read_tac_csv(path, columns=TAC_COLUMNS):
    """Read a TAC CSV; ``columns`` names the (start, duration, value) columns.

    Values are taken as measured, so the result is flagged ``raw``.
    """
    start_col, duration_col, value_col = columns
    starts, durations, values = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            starts.append(float(row[start_col]))
            durations.append(float(row[duration_col]))
            values.append(float(row[value_col]))
    if not values:
        raise ValueError(f"{path}: no rows")
    return Tac(FrameGrid(starts, durations), values, raw=True)


def read_idif_set(aorta, pv, pa, ureter, columns=TAC_COLUMNS):
    tacs = [read_tac_csv(p, columns) for p in (aorta, pv, pa, ureter)]
    return InputFunctionSet(*tacs)


# --------------------------------------------------------------------------
# Native raw + JSON volumes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    spacing: tuple
    origin: tuple
    kind: str
    digest: str
    frame: dict = None

    def to_json(self):
        out = {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "origin_mm": list(self.origin),
            "kind": self.kind,
            "dtype": "float32",
            "byte_order": "little",
            "order": "x-fastest",
            "sha256": self.digest,
        }
        if self.frame is not None:
            out["frame"] = dict(self.frame)
        return out


def _raw_paths(path):
    path = Path(path)
    if path.suffix in (RAW_SUFFIX, ".json"):
        path = path.with_suffix("")
    return path.with_suffix(RAW_SUFFIX), path.with_suffix(".json")


def write_volume(path, volume, frame=None):
    """Write ``volume`` as raw float32 + JSON header; returns the raw path.

    ``path`` ending in ``.nii`` or ``.nii.gz`` writes NIfTI-1 instead.
    """
    if str(path).endswith((".nii", ".nii.gz")):
        return write_nifti(path, volume)
    raw_path, header_path = _raw_paths(path)
    payload = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    header = VolumeHeader(
        volume.dims, volume.spacing, volume.origin, volume.kind, sha256_bytes(payload), frame
    )
    raw_path.write_bytes(payload)
    _dump_json(header_path, header.to_json())
    return raw_path


def read_volume_header(path):
    _, header_path = _raw_paths(path)
    meta = json.loads(header_path.read_text())
    try:
        return VolumeHeader(
            tuple(int(d) for d in meta["dims"]),
            tuple(float(s) for s in meta["spacing_mm"]),
            tuple(float(o) for o in meta.get("origin_mm", (0.0, 0.0, 0.0))),
            meta.get("kind", "pet"),
            meta.get("sha256", ""),
            meta.get("frame"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{header_path}: bad header ({exc})") from None


def read_volume(path, kind=None):
    """Read a native or NIfTI volume.

    Returns a :class:`LabelVolume` for label data (``kind == "label"`` in the
    native header, or integer NIfTI data without scaling) and a
    :class:`ScalarVolume` otherwise; ``kind`` overrides the detection.
    """
    if str(path).endswith((".nii", ".nii.gz")):
        return read_nifti(path, kind=kind)
    raw_path, _ = _raw_paths(path)
    header = read_volume_header(path)
    payload = raw_path.read_bytes()
    expected = 4 * int(np.prod(header.dims))
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload has {len(payload)} bytes, dims {header.dims} need {expected}"
        )
    if header.digest and sha256_bytes(payload) != header.digest:
        raise VolumeFormatError(f"{raw_path}: payload digest does not match its header")
    data = np.frombuffer(payload, dtype="<f4").reshape(header.dims, order="F")
    kind = kind or header.kind
    meta = {"frame": header.frame} if header.frame is not None else {}
    if kind == "label":
        return LabelVolume(data.astype(np.int32), header.spacing, header.origin, meta)
    return ScalarVolume(data.astype(np.float64), header.spacing, header.origin, meta, kind=kind)


# --------------------------------------------------------------------------
# NIfTI-1 single file (.nii / .nii.gz)
# --------------------------------------------------------------------------

NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v).name: k for k, v in NIFTI_DTYPES.items()}


def _read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def read_nifti(path, kind=None):
    blob = _read_maybe_gzip(path)
    if len(blob) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: truncated header")
    if struct.unpack("<i", blob[:4])[0] == NIFTI_HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", blob[:4])[0] == NIFTI_HEADER_SIZE:
        endian = ">"
    else:
        raise VolumeFormatError(f"{path}: not a NIfTI-1 file")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
    dim = struct.unpack(endian + "8h", blob[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", blob[70:74])
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(endian + "3f", blob[108:120])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(1, d) for d in dim[1 : ndim + 1]]
    if len(shape) > 3 and any(d != 1 for d in shape[3:]):
        raise VolumeFormatError(f"{path}: {ndim}-D data; store one volume per frame")
    shape = (shape + [1, 1, 1])[:3]
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(endian)
    if bitpix != dtype.itemsize * 8:
        raise VolumeFormatError(f"{path}: bitpix {bitpix} does not match datatype {datatype}")
    offset = int(vox_offset)
    n_bytes = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != n_bytes:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, dims {tuple(shape)} need {n_bytes}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    meta = {"nifti_header": blob[:NIFTI_HEADER_SIZE], "nifti_datatype": datatype}

    scaled = scl_slope not in (0.0, 1.0) or (scl_slope != 0.0 and scl_inter != 0.0)
    if kind is None:
        kind = "label" if dtype.kind in "iu" and not scaled else "pet"
    if kind == "label":
        return LabelVolume(data.astype(np.int32), spacing, (0.0, 0.0, 0.0), meta)
    values = data.astype(np.float64)
    if scaled:
        values = values * scl_slope + scl_inter
    return ScalarVolume(values, spacing, (0.0, 0.0, 0.0), meta, kind=kind)


def write_nifti(path, volume):
    """Write a single-file NIfTI-1 volume (gzip if the name ends in ``.gz``)."""
    if isinstance(volume, LabelVolume):
        data = np.asarray(volume.data)
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        dtype = np.dtype("<i2") if -32768 <= lo and hi <= 32767 else np.dtype("<i4")
    else:
        dtype = np.dtype("<f4")
    source = volume.meta.get("nifti_header")
    header = bytearray(source if source is not None else bytes(NIFTI_HEADER_SIZE))
    if source is not None and struct.unpack("<i", bytes(header[:4]))[0] != NIFTI_HEADER_SIZE:
        # big-endian source header: start clean rather than mixing byte orders
        header = bytearray(NIFTI_HEADER_SIZE)
        source = None
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, _NIFTI_CODES[dtype.name], dtype.itemsize * 8)
    pixdim = list(struct.unpack("<8f", bytes(header[76:108])))
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    pixdim[1:4] = volume.spacing
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<3f", header, 108, 352.0, 1.0, 0.0)
    if source is None:
        header[123] = 2  # xyzt_units: mm
    header[344:348] = b"n+1\x00"
    payload = np.asarray(volume.data).astype(dtype).tobytes(order="F")
    blob = bytes(header) + b"\x00\x00\x00\x00" + payload
    path = Path(path)
    if path.name.endswith(".gz"):
        buf = _io.BytesIO()
        with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0, filename="") as gz:
            gz.write(blob)
        blob = buf.getvalue()
    path.write_bytes(blob)
    return path


# --------------------------------------------------------------------------
# Label names sidecar and dynamic series
# --------------------------------------------------------------------------


def label_sidecar_path(volume_path):
    name = Path(volume_path).name
    for suffix in (".nii.gz", ".nii", RAW_SUFFIX, ".json"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return Path(volume_path).with_name(name + ".labels.json")


def write_label_names(volume_path, names):
    _dump_json(label_sidecar_path(volume_path), {str(k): v for k, v in sorted(names.items())})


def read_label_names(volume_path):
    """``{label: organ name}`` from the sidecar, or ``{}`` if there is none."""
    path = label_sidecar_path(volume_path)
    if not path.exists():
        return {}
    return {int(k): str(v) for k, v in json.loads(path.read_text()).items()}


def frame_volume_paths(pet_dir):
    pet_dir = Path(pet_dir)
    paths = sorted(pet_dir.glob("*" + RAW_SUFFIX))
    if not paths:
        paths = sorted(p for p in pet_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    return paths


def read_dynamic(pet_dir, timing=None):
    """One volume per frame from ``pet_dir`` (sorted by name) plus the frame grid.

    ``timing`` defaults to ``pet_dir/timing.json``.
    """
    pet_dir = Path(pet_dir)
    timing = Path(timing) if timing is not None else pet_dir / "timing.json"
    grid = read_timing(timing)
    paths = frame_volume_paths(pet_dir)
    if len(paths) != len(grid):
        raise ValueError(f"{pet_dir}: {len(paths)} frame volumes but {len(grid)} frames in {timing}")
    volumes = [read_volume(p, kind="pet") for p in paths]
    return volumes, grid, paths


def write_dynamic(pet_dir, volumes, grid):
    pet_dir = Path(pet_dir)
    pet_dir.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(volumes) - 1)))
    for f, (volume, (start, duration)) in enumerate(zip(volumes, grid.frames)):
        write_volume(
            pet_dir / f"frame_{f:0{width}d}",
            volume,
            frame={"index": f, "start_s": start, "duration_s": duration},
        )
    write_timing(pet_dir / "timing.json", grid)


# --------------------------------------------------------------------------
# Synthetic data oracle
# --------------------------------------------------------------------------

SYNTH_STEP_S = 0.25


def _gamma_variate(t, t0, peak, shape, scale):
    x = np.clip(t - t0, 0.0, None) / (shape * scale)
    with np.errstate(divide="ignore"):
        out = peak * np.exp(shape * (np.log(np.where(x > 0, x, 1.0)) + 1.0 - x))
    return np.where(x > 0, out, 0.0)


def _delay_disperse(curve, step, delay_s, tau_s):
    """Shift by ``delay_s`` then convolve with a unit-area exponential of time constant ``tau_s``."""
    shift = int(round(delay_s / step))
    delayed = np.concatenate((np.zeros(shift), curve[: curve.size - shift]))
    n_kernel = min(curve.size, int(np.ceil(12 * tau_s / step)) + 1)
    q = np.exp(-step / tau_s)
    kernel = (1.0 - q) * q ** np.arange(n_kernel)
    return np.convolve(delayed, kernel)[: curve.size]


def synth_bolus_idifs(grid, seed=0):
    """Four plausible IDIFs with sequential arrival.

    The pulmonary artery gets a gamma-variate bolus on a slowly clearing
    plateau; aorta and portal vein are delayed, dispersed (area preserving)
    copies of it; the ureter curve rises monotonically from a late onset.
    Peak times are ordered pa < aorta < pv < ureter for every seed.
    """
    rng = np.random.default_rng(seed)
    fine = FineGrid.covering(grid, SYNTH_STEP_S)
    t = fine.times
    t0 = rng.uniform(12.0, 16.0)
    x = np.clip(t - t0, 0.0, None)
    bolus = _gamma_variate(t, t0, rng.uniform(150.0, 250.0), rng.uniform(2.5, 3.5), rng.uniform(2.5, 3.5))
    plateau = rng.uniform(8.0, 15.0) * (-np.expm1(-x / 30.0)) * np.exp(-x / rng.uniform(1500.0, 3000.0))
    pa = bolus + plateau
    aorta = _delay_disperse(pa, SYNTH_STEP_S, rng.uniform(5.0, 8.0), rng.uniform(2.0, 4.0))
    pv = _delay_disperse(pa, SYNTH_STEP_S, rng.uniform(18.0, 25.0), rng.uniform(15.0, 25.0))
    onset = rng.uniform(120.0, 240.0)
    ureter = rng.uniform(20.0, 60.0) * -np.expm1(-np.clip(t - onset, 0.0, None) / rng.uniform(600.0, 1500.0))
    tacs = [frame_average(c, fine, grid) for c in (aorta, pv, pa, ureter)]
    return InputFunctionSet(*tacs)


def _check_in_preset(params, preset):
    from .fitting import FitMode, WEIGHT_NAMES, get_preset

    preset = get_preset(preset)
    names = preset.free_names(FitMode.MULTI)
    bounds = preset.bounds(FitMode.MULTI)
    values = params.as_dict()
    for name, lo, hi in zip(names, bounds.lower, bounds.upper):
        if not lo <= values[name] <= hi:
            raise ValueError(f"{name}={values[name]} outside preset bounds [{lo}, {hi}]")
    for name in WEIGHT_NAMES:
        if name not in names and values[name] != 0.0:
            raise ValueError(f"{name} is fixed at 0 by the {preset.organ} preset")


def synth_tac(
    params,
    idifs,
    preset,
    noise_sd=0.0,
    seed=0,
    fine=None,
    duration_scaled=False,
    sidecar=None,
):
    """TAC generated from known parameters with the ODE integrator.

    Parameters
    ----------
    params : KineticParams
        Must lie within the preset's multi-mode bounds.
    noise_sd : float
        Standard deviation (kBq/ml) of additive Gaussian noise. With
        ``duration_scaled`` it applies to a 60 s frame and scales as
        ``sqrt(60 / duration)``.
    sidecar : path, optional
        Where to record the generating parameters as JSON.
    """
    _check_in_preset(params, preset)
    grid = idifs.grid
    fine = fine if fine is not None else FineGrid.covering(grid)
    mixed = mix_input(idifs, *params.weights)
    curve = solve_ode_reference(params, interp_to_fine(mixed, fine), fine)
    values = frame_average(curve, fine, grid).values
    if noise_sd > 0:
        sd = noise_sd * (np.sqrt(60.0 / grid.durations) if duration_scaled else 1.0)
        values = values + np.random.default_rng(seed).normal(0.0, 1.0, len(grid)) * sd
    tac = Tac(grid, values, raw=noise_sd > 0 or bool(np.any(values < 0)))
    if sidecar is not None:
        from .fitting import get_preset

        _dump_json(
            sidecar,
            {
                "params_true": params.as_dict(),
                "preset": get_preset(preset).organ,
                "noise_sd": float(noise_sd),
                "duration_scaled": bool(duration_scaled),
                "seed": int(seed),
                "fine_step_s": float(fine.step_s),
            },
        )
    return tac


def synth_dynamic_phantom(grid, idifs, regions, dims=(10, 10, 10), spacing=(2.0, 2.0, 2.0), preset="generic"):
    """Dynamic volumes whose voxels follow region-wise synthetic TACs.

    Parameters
    ----------
    regions : sequence of (mask, KineticParams)
        Boolean ``dims``-shaped masks; region ``i`` gets label ``i + 1``.

    Returns
    -------
    (list of ScalarVolume, LabelVolume)
    """
    labels = np.zeros(dims, dtype=np.int32)
    frames = np.zeros(tuple(dims) + (len(grid),))
    for i, (mask, params) in enumerate(regions):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != tuple(dims):
            raise ValueError("region mask shape does not match dims")
        tac = synth_tac(params, idifs, preset)
        labels[mask] = i + 1
        frames[mask] = tac.values
    volumes = [ScalarVolume(frames[..., f], spacing, kind="pet") for f in range(len(grid))]
    return volumes, LabelVolume(labels, spacing)


def kinetic_params_from_dict(values):
    return KineticParams(**{k: float(v) for k, v in values.items() if k in KineticParams.NAMES})
