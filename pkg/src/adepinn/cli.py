"""Command-line front end: gen, train, analyze, export.

Exit codes: 0 success, 2 usage or configuration problem, 3 missing or
malformed files, 4 numerical failure during training.  Every command writes
a run_manifest.json into its output directory (atomically, last) with the
command line, config snapshot, seed, inputs, outputs and wall-clock
duration, so a run can be repeated from the manifest alone.

JSON inputs carry units in their key names (spacing_mm, timestamps_s);
frame times may be given as frame_times_min and are converted on parse.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .data import (FormatError, ScaleRecord, SynthSpec, field_to_frame,
                   generate_synthetic, load_voxel_series, prepare_batch,
                   sample_points, save_voxel_series, series_grid)
from .network import NetworkError, load_checkpoint, save_checkpoint
from .physics import (DEFAULT_L_C_MM, PhysicsError, format_peclet_report,
                      make_peclet_report)
from .trainer import (ConfigError, TrainingAborted, TrainingConfig, TrainRecord,
                      predict, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _version_string() -> str:
    root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=root, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"adepinn-{__version__}"


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_json(path):
    """(payload, error-exit-code-or-None).  Missing file is I/O, bad JSON is config."""
    if not os.path.exists(path):
        return None, _fail(EXIT_IO, f"missing file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh), None
    except json.JSONDecodeError as exc:
        return None, _fail(EXIT_USAGE, f"{path}: not valid JSON ({exc})")
    except OSError as exc:
        return None, _fail(EXIT_IO, f"cannot read {path}: {exc}")


def _write_json(payload, path) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, args: argparse.Namespace,
                    inputs: dict, outputs: dict, extra: dict,
                    started: float) -> None:
    manifest = {
        "command": command,
        "argv": [sys.argv[0]] + list(getattr(args, "_raw_argv", [])),
        "version": _version_string(),
        "started_utc": datetime.datetime.fromtimestamp(
            started, datetime.timezone.utc).isoformat(),
        "duration_s": round(time.time() - started, 3),
        "inputs": inputs,
        "outputs": outputs,
    }
    manifest.update(extra)
    _write_json(manifest, os.path.join(out_dir, "run_manifest.json"))


# -- gen -------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.time()
    raw, err = _read_json(args.spec)
    if err is not None:
        return err
    if args.seed is not None:
        if not isinstance(raw, dict):
            return _fail(EXIT_USAGE, f"{args.spec}: spec must be a JSON object")
        raw = dict(raw)
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
        series, truth = generate_synthetic(spec)
    except (FormatError, ValueError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest_path = save_voxel_series(series, args.out)
        _write_json(truth, os.path.join(args.out, "truth.json"))
        _write_manifest(args.out, "gen", args,
                        {"spec": os.path.abspath(args.spec)},
                        {"manifest": manifest_path,
                         "truth": os.path.join(args.out, "truth.json")},
                        {"seed": spec.seed, "spec": raw}, started)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write outputs: {exc}")
    if not args.quiet:
        print(f"wrote {series.n_frames} frames of {series.dims} voxels to {args.out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _apply_train_overrides(raw: dict, args) -> dict:
    raw = dict(raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    if args.mode is not None:
        raw["scalar_velocity"] = args.mode == "scalar"
    return raw


def cmd_train(args) -> int:
    started = time.time()
    raw, err = _read_json(args.config)
    if err is not None:
        return err
    if not isinstance(raw, dict):
        return _fail(EXIT_USAGE, f"{args.config}: config must be a JSON object")
    try:
        config = TrainingConfig.from_dict(_apply_train_overrides(raw, args))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        series = load_voxel_series(args.dataset)
    except FormatError as exc:
        return _fail(EXIT_IO, str(exc))
    try:
        batch, normalized = prepare_batch(series, config.k_ade, config.k_data,
                                          config.seed, config.with_replacement)
    except FormatError as exc:
        return _fail(EXIT_USAGE, str(exc))

    resampler = None
    if config.resample_every > 0:
        def resampler(epoch: int):
            return sample_points(normalized, config.k_ade, config.k_data,
                                 config.seed + epoch, config.with_replacement,
                                 scale=batch.scale)

    os.makedirs(args.out, exist_ok=True)
    log_every = 0 if args.quiet else max(1, config.epochs // 20)
    try:
        record = train(config, batch, resampler=resampler, log_every=log_every)
    except TrainingAborted as exc:
        if exc.record is not None and exc.record.n_epochs > 0:
            exc.record.write_csv(os.path.join(args.out, "record.csv"))
        return _fail(EXIT_NUMERICAL, str(exc))

    try:
        record.write_csv(os.path.join(args.out, "record.csv"))
        save_checkpoint(record.params, os.path.join(args.out, "checkpoint.bin"))
        result = {
            "d_mm2_s": record.final_d_mm2_s,
            "v_mm_s": record.final_v_mm_s.tolist(),
            "speed_mm_s": record.final_speed_mm_s,
            "spatial_dim": record.spatial_dim,
            "scalar_velocity": config.scalar_velocity,
            "log_parameterized_d": config.log_parameterized_d,
            "resample_every": config.resample_every,
            "final_loss": float(record.loss[-1]),
            "epochs": record.n_epochs,
            "scale": record.scale.to_dict(),
            "checkpoint": "checkpoint.bin",
            "record_csv": "record.csv",
        }
        _write_json(result, os.path.join(args.out, "result.json"))
        _write_manifest(args.out, "train", args,
                        {"config": os.path.abspath(args.config),
                         "dataset": os.path.abspath(args.dataset)},
                        {"record_csv": "record.csv", "checkpoint": "checkpoint.bin",
                         "result": "result.json"},
                        {"seed": config.seed, "config": config.to_dict(),
                         "scale": record.scale.to_dict(),
                         "spatial_dim": record.spatial_dim}, started)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write outputs: {exc}")
    if not args.quiet:
        print(f"final D = {record.final_d_mm2_s:.6e} mm^2/s, "
              f"|v| = {record.final_speed_mm_s:.6e} mm/s "
              f"(loss {record.loss[-1]:.6e})")
    return EXIT_OK


# -- analyze ---------------------------------------------------------------

def _parse_velocity(text: str):
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise PhysicsError(f"cannot parse velocity {text!r}") from None


def cmd_analyze(args) -> int:
    started = time.time()
    inputs: dict = {}
    if args.run is not None:
        result_path = os.path.join(args.run, "result.json")
        result, err = _read_json(result_path)
        if err is not None:
            return err
        try:
            d_val = float(result["d_mm2_s"])
            velocity = result["v_mm_s"]
        except (KeyError, TypeError, ValueError):
            return _fail(EXIT_IO, f"{result_path}: missing d_mm2_s / v_mm_s")
        inputs["run"] = os.path.abspath(args.run)
    elif args.D is not None and args.v is not None:
        d_val = args.D
        try:
            velocity = _parse_velocity(args.v)
        except PhysicsError as exc:
            return _fail(EXIT_USAGE, str(exc))
    else:
        return _fail(EXIT_USAGE, "analyze needs --run RUNDIR or both --D and --v")
    try:
        report = make_peclet_report(d_val, velocity, args.L)
    except PhysicsError as exc:
        return _fail(EXIT_USAGE, str(exc))

    text = format_peclet_report(report)
    if args.out is not None:
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "peclet.txt"), "w") as fh:
                fh.write(text)
            _write_manifest(args.out, "analyze", args, inputs,
                            {"report": "peclet.txt"},
                            {"report": report.to_dict()}, started)
        except OSError as exc:
            return _fail(EXIT_IO, f"cannot write outputs: {exc}")
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


# -- export ----------------------------------------------------------------

def _write_pgm(path: str, image: np.ndarray) -> None:
    u8 = np.ascontiguousarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode())
        fh.write(u8.tobytes())


def _pair_to_pgm(truth: np.ndarray, pred: np.ndarray):
    """Scale a truth/prediction pair into u8 with one shared min-max window."""
    lo = float(min(truth.min(), pred.min()))
    hi = float(max(truth.max(), pred.max()))
    span = hi - lo
    if span <= 0.0:
        z = np.zeros(truth.shape, dtype=np.uint8)
        return z, z.copy(), lo, hi
    t8 = np.round(255.0 * (truth - lo) / span).astype(np.uint8)
    p8 = np.round(255.0 * (pred - lo) / span).astype(np.uint8)
    return t8, p8, lo, hi


def _write_curves(record: dict[str, np.ndarray], out_dir: str) -> list[str]:
    def dump(name: str, cols: list[str]) -> str:
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(record["epoch"].size):
                fh.write(",".join(f"{record[c][i]:.17g}" for c in cols) + "\n")
        return name

    written = [dump("loss.csv", ["epoch", "lr", "loss", "loss_ade", "loss_data"]),
               dump("diffusion.csv", ["epoch", "D"])]
    vcols = [c for c in record if c == "v" or (c.startswith("v") and c[1:].isdigit())]
    written.append(dump("velocity.csv", ["epoch"] + sorted(vcols)))
    return written


def cmd_export(args) -> int:
    started = time.time()
    record_path = os.path.join(args.run, "record.csv")
    result_path = os.path.join(args.run, "result.json")
    ckpt_path = os.path.join(args.run, "checkpoint.bin")
    for path in (record_path, result_path, ckpt_path):
        if not os.path.exists(path):
            return _fail(EXIT_IO, f"missing file: {path}")
    result, err = _read_json(result_path)
    if err is not None:
        return err
    try:
        record = TrainRecord.read_csv(record_path)
        params = load_checkpoint(ckpt_path)
        scale = ScaleRecord.from_dict(result["scale"])
        series = load_voxel_series(args.dataset)
    except (NetworkError, FormatError, KeyError, OSError) as exc:
        return _fail(EXIT_IO, str(exc))

    times = args.time if args.time else series.timestamps_s.tolist()
    frame_idx = []
    for t in times:
        hits = np.flatnonzero(np.isclose(series.timestamps_s, t, rtol=0.0, atol=1e-9))
        if hits.size == 0:
            return _fail(EXIT_USAGE,
                         f"time {t:g} s is not a dataset frame; available: "
                         f"{series.timestamps_s.tolist()}")
        frame_idx.append(int(hits[0]))
    nz = series.dims[2]
    z = args.slice if args.slice is not None else nz // 2
    if not 0 <= z < nz:
        return _fail(EXIT_USAGE, f"slice {z} outside [0, {nz})")

    try:
        os.makedirs(args.out, exist_ok=True)
        outputs: dict = {"curves": _write_curves(record, args.out)}
        grid = series_grid(series)
        truth_frames = series.frames / scale.C_s
        chosen = [series.timestamps_s[i] for i in frame_idx]
        pred_fields = predict(params, scale, chosen, grid)
        images = []
        for k, i in enumerate(frame_idx):
            pred_frame = field_to_frame(series.dims, pred_fields[k])
            t8, p8, lo, hi = _pair_to_pgm(truth_frames[i][z], pred_frame[z])
            stem = f"frame_t{series.timestamps_s[i]:g}_z{z}"
            _write_pgm(os.path.join(args.out, f"{stem}_truth.pgm"), t8)
            _write_pgm(os.path.join(args.out, f"{stem}_pred.pgm"), p8)
            sidecar = {"time_s": float(series.timestamps_s[i]), "slice_z": int(z),
                       "min": lo, "max": hi,
                       "truth": f"{stem}_truth.pgm", "prediction": f"{stem}_pred.pgm"}
            _write_json(sidecar, os.path.join(args.out, f"{stem}.json"))
            images.append(f"{stem}.json")
        outputs["images"] = images
        _write_manifest(args.out, "export", args,
                        {"run": os.path.abspath(args.run),
                         "dataset": os.path.abspath(args.dataset)},
                        outputs, {"times_s": [float(t) for t in chosen],
                                  "slice_z": int(z)}, started)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write outputs: {exc}")
    if not args.quiet:
        print(f"wrote curves and {len(frame_idx)} image pairs to {args.out}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adepinn",
        description="Recover advection-diffusion coefficients from voxel time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--spec", required=True, help="synthetic spec JSON")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=None, help="override the spec seed")
    gen.add_argument("--quiet", action="store_true")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="fit the surrogate and coefficients")
    tr.add_argument("--config", required=True, help="training config JSON")
    tr.add_argument("--dataset", required=True, help="dataset directory or manifest")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, default=None, help="override the config seed")
    tr.add_argument("--epochs", type=int, default=None, help="override epoch count")
    tr.add_argument("--mode", choices=("vector", "scalar"), default=None,
                    help="velocity parameterization")
    tr.add_argument("--quiet", action="store_true")
    tr.set_defaults(func=cmd_train)

    an = sub.add_parser("analyze", help="Peclet number and transport regime")
    an.add_argument("--run", default=None, help="training output directory")
    an.add_argument("--D", type=float, default=None, help="diffusion coefficient, mm^2/s")
    an.add_argument("--v", default=None,
                    help="velocity components, comma separated, mm/s")
    an.add_argument("--L", type=float, default=DEFAULT_L_C_MM,
                    help="characteristic length, mm (default 0.1)")
    an.add_argument("--out", default=None, help="optional output directory")
    an.add_argument("--quiet", action="store_true")
    an.set_defaults(func=cmd_analyze)

    ex = sub.add_parser("export", help="CSV curves and PGM image pairs")
    ex.add_argument("--run", required=True, help="training output directory")
    ex.add_argument("--dataset", required=True, help="dataset directory or manifest")
    ex.add_argument("--out", required=True, help="output directory")
    ex.add_argument("--time", type=float, action="append", default=None,
                    help="frame time in seconds (repeatable; default all frames)")
    ex.add_argument("--slice", type=int, default=None,
                    help="z slice to image (default middle)")
    ex.add_argument("--quiet", action="store_true")
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if not exc.code else EXIT_USAGE
    args._raw_argv = list(argv) if argv is not None else sys.argv[1:]
    return args.func(args)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
