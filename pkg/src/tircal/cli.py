"""Command line surface: calibrate sequences, generate synthetic data, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GenerationError, TircalError
from .io import list_frame_files, read_image, write_pgm, write_ppm
from .metrics import (
    DEFAULT_SWEEP_THRESHOLDS,
    EvalReport,
    photometric_delta,
    photometric_error,
    threshold_sweep,
)
from .model import Frame, ParamChain
from .pipeline import CalibrationSession, PipelineConfig, pipeline_config_from_dict
from .spatial import SpatialField
from .synth import (
    GroundTruth,
    HotEvent,
    SceneSpec,
    gaussian_bias_field,
    render_sequence,
    truth_correspondences,
    value_noise,
    wandering_bounds,
)
from .tracker import ingest_correspondences, write_correspondences

__all__ = ["main", "scene_from_document"]


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ConfigError(f"{context}: missing required field {key!r}")
    return doc[key]


def _check_keys(doc: dict, allowed: set[str], context: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{context}: unknown field {key!r}")


def scene_from_document(doc: dict, seed: int = 0) -> SceneSpec:
    """Build a SceneSpec from the published JSON schema, naming bad fields."""
    if not isinstance(doc, dict):
        raise ConfigError("scene spec: document must be an object")
    _check_keys(
        doc,
        {"frames", "viewport", "radiance", "motion", "hot_events", "spatial_field",
         "agc", "noise_sigma"},
        "scene spec",
    )
    n_frames = int(_require(doc, "frames", "scene spec"))
    if n_frames < 1:
        raise ConfigError("scene spec: 'frames' must be >= 1")
    viewport = _require(doc, "viewport", "scene spec")
    if not (isinstance(viewport, (list, tuple)) and len(viewport) == 2):
        raise ConfigError("scene spec: 'viewport' must be [width, height]")
    w, h = int(viewport[0]), int(viewport[1])

    rad = doc.get("radiance", {"type": "value_noise"})
    _check_keys(rad, {"type", "width", "height", "octaves", "lo", "hi", "path"}, "radiance")
    rtype = rad.get("type", "value_noise")
    if rtype == "value_noise":
        radiance = value_noise(
            int(rad.get("width", 2 * w)),
            int(rad.get("height", 2 * h)),
            octaves=int(rad.get("octaves", 4)),
            seed=seed,
            lo=float(rad.get("lo", 0.1)),
            hi=float(rad.get("hi", 0.9)),
        )
    elif rtype == "file":
        radiance = read_image(_require(rad, "path", "radiance"))
    else:
        raise ConfigError(f"radiance: unknown type {rtype!r}")
    rh, rw = radiance.shape

    motion = doc.get("motion", {"type": "static"})
    _check_keys(motion, {"type", "velocity", "start", "step", "offsets"}, "motion")
    mtype = motion.get("type", "static")
    start = motion.get("start", [(rw - w) // 2, (rh - h) // 2])
    sx, sy = int(start[0]), int(start[1])
    if mtype == "static":
        path = np.tile([[sx, sy]], (n_frames, 1))
    elif mtype == "linear":
        vx, vy = (int(v) for v in _require(motion, "velocity", "motion"))
        steps = np.arange(n_frames)
        path = np.stack([sx + vx * steps, sy + vy * steps], axis=1)
    elif mtype == "random_walk":
        step = int(motion.get("step", 2))
        rng = np.random.default_rng(seed + 1)
        deltas = rng.integers(-step, step + 1, size=(n_frames, 2))
        deltas[0] = 0
        path = np.clip(
            np.cumsum(deltas, axis=0) + [sx, sy], 0, [rw - w, rh - h]
        )
    elif mtype == "path":
        path = np.asarray(_require(motion, "offsets", "motion"), dtype=int)
        if path.shape != (n_frames, 2):
            raise ConfigError("motion: 'offsets' must have one [x, y] per frame")
    else:
        raise ConfigError(f"motion: unknown type {mtype!r}")
    if (
        path[:, 0].min() < 0
        or path[:, 1].min() < 0
        or path[:, 0].max() + w > rw
        or path[:, 1].max() + h > rh
    ):
        raise ConfigError("motion: path leaves the radiance map")

    events = []
    for k, ev in enumerate(doc.get("hot_events", [])):
        _check_keys(ev, {"start", "stop", "rect", "amplitude"}, f"hot_events[{k}]")
        events.append(
            HotEvent(
                start=int(_require(ev, "start", f"hot_events[{k}]")),
                stop=int(_require(ev, "stop", f"hot_events[{k}]")),
                rect=tuple(int(v) for v in _require(ev, "rect", f"hot_events[{k}]")),
                amplitude=float(_require(ev, "amplitude", f"hot_events[{k}]")),
            )
        )

    sf = doc.get("spatial_field", {"type": "none"})
    _check_keys(sf, {"type", "count", "amplitude", "values"}, "spatial_field")
    stype = sf.get("type", "none")
    if stype == "none":
        field = None
    elif stype == "gaussians":
        field = gaussian_bias_field(
            w, h,
            n_bumps=int(sf.get("count", 3)),
            amplitude=float(sf.get("amplitude", 0.1)),
            seed=seed + 2,
        )
    elif stype == "array":
        field = np.asarray(_require(sf, "values", "spatial_field"), dtype=float)
        if field.shape != (h, w):
            raise ConfigError("spatial_field: 'values' must match the viewport")
    else:
        raise ConfigError(f"spatial_field: unknown type {stype!r}")

    agc = doc.get("agc", {"mode": "minmax"})
    _check_keys(agc, {"mode", "low", "high", "bounds", "scale_step", "offset_step"}, "agc")
    mode = agc.get("mode", "minmax")
    kwargs = {}
    if mode == "minmax":
        kwargs["agc_mode"] = "minmax"
    elif mode == "percentile":
        kwargs["agc_mode"] = "percentile"
        kwargs["agc_percentiles"] = (
            float(agc.get("low", 1.0)),
            float(agc.get("high", 99.0)),
        )
    elif mode == "explicit":
        kwargs["agc_mode"] = "explicit"
        kwargs["agc_bounds"] = np.asarray(_require(agc, "bounds", "agc"), dtype=float)
    elif mode == "wander":
        # Dry pass over the latent signal to find bounds that always cover it.
        lo_all, hi_all = np.inf, -np.inf
        for t in range(1, n_frames + 1):
            ox, oy = path[t - 1]
            signal = radiance[oy : oy + h, ox : ox + w].copy()
            for event in events:
                if event.active(t):
                    x0, y0, x1, y1 = event.rect
                    vx0, vy0 = max(x0 - ox, 0), max(y0 - oy, 0)
                    vx1, vy1 = min(x1 - ox, w), min(y1 - oy, h)
                    if vx0 < vx1 and vy0 < vy1:
                        signal[vy0:vy1, vx0:vx1] += event.amplitude
            if field is not None:
                signal = signal + field
            lo_all = min(lo_all, float(signal.min()))
            hi_all = max(hi_all, float(signal.max()))
        kwargs["agc_mode"] = "explicit"
        kwargs["agc_bounds"] = wandering_bounds(
            lo_all,
            hi_all,
            n_frames,
            seed=seed + 3,
            scale_step=float(agc.get("scale_step", 2.0)),
            offset_step=float(agc.get("offset_step", 0.15)),
        )
    else:
        raise ConfigError(f"agc: unknown mode {mode!r}")

    try:
        return SceneSpec(
            radiance_map=radiance,
            viewport=(w, h),
            motion_path=path,
            hot_events=events,
            spatial_field=field,
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            **kwargs,
        )
    except GenerationError as exc:
        raise ConfigError(f"scene spec: {exc}") from exc


def _load_config(args) -> PipelineConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
    # CLI flags override file values.
    if args.seed is not None:
        doc.setdefault("ransac", {})["rng_seed"] = args.seed
        doc.setdefault("gp", {})["subsample_seed"] = args.seed
    if args.output_mode is not None:
        doc.setdefault("pipeline", {})["output_mode"] = args.output_mode
    if args.grid is not None:
        try:
            cx, cy = (int(v) for v in args.grid.lower().split("x"))
        except ValueError as exc:
            raise ConfigError(f"--grid expects WxH cells, got {args.grid!r}") from exc
        doc.setdefault("grid", {})
        doc["grid"]["cells_x"] = cx
        doc["grid"]["cells_y"] = cy
    if args.xi_gap is not None:
        doc.setdefault("drift", {})["xi_gap"] = args.xi_gap
    if args.xi_base is not None:
        doc.setdefault("drift", {})["xi_base"] = args.xi_base
    return pipeline_config_from_dict(doc)


def _frame_name(index: int, palette: bool) -> str:
    return f"frame_{index:06d}.{'ppm' if palette else 'pgm'}"


def cmd_calibrate(args) -> int:
    config = _load_config(args)
    input_dir = Path(args.input)
    out_dir = Path(args.output)
    files = list_frame_files(input_dir)
    frames = []
    shape = None
    for k, path in enumerate(files):
        try:
            img = read_image(path)
        except (OSError, DataError) as exc:
            raise DataError(f"unreadable frame {path}: {exc}") from exc
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(
                f"{path}: dimension mismatch {img.shape} vs {shape}"
            )
        frames.append(Frame(k + 1, np.clip(img, 0.0, 1.0)))

    external = None
    if args.correspondences:
        sets = ingest_correspondences(
            args.correspondences,
            frames={f.index: f for f in frames},
            bounds=(shape[1], shape[0]),
        )
        external = {}
        for cset in sets:
            external.setdefault(cset.to_frame, []).append(cset)

    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    session = CalibrationSession(config, external_sets=external)
    palette = config.output_mode == "palette"
    for frame in frames:
        result = session.push(frame.pixels)
        dest = out_dir / "frames" / _frame_name(result.index, palette)
        if palette:
            write_ppm(dest, result.output)
        else:
            write_pgm(dest, result.output)
    session.finalize()

    session.chain.write_jsonl(out_dir / "chain.jsonl")
    session.chain.write_csv(out_dir / "chain.csv")
    session.field.to_json(out_dir / "spatial_field.json")
    session.field.to_pgm(out_dir / "spatial_field.pgm")
    write_correspondences(out_dir / "correspondences.csv", session.all_sets)
    with open(out_dir / "untracked.txt", "w", encoding="utf-8") as fh:
        for t in sorted(session.chain.untracked):
            fh.write(f"{t}\n")
    timing = {
        "temporal_ms": session.temporal_ms,
        "temporal_ms_mean": float(np.mean(session.temporal_ms))
        if session.temporal_ms
        else 0.0,
        "spatial_ms": session.spatial_ms,
    }
    with open(out_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=2)
    echo = dataclasses.asdict(config)
    echo["correspondence_source"] = "external" if external is not None else "tracker"
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)

    print(
        f"calibrated {len(frames)} frames -> {out_dir} "
        f"(mean temporal {timing['temporal_ms_mean']:.2f} ms, "
        f"{len(session.spatial_ms)} spatial solves, "
        f"{len(session.chain.untracked)} untracked)"
    )
    return 0


def cmd_synth(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"scene spec not found: {args.spec}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON: {exc}") from exc
    seed = args.seed if args.seed is not None else 0
    spec = scene_from_document(doc, seed=seed)
    frames, truth = render_sequence(spec, seed=seed)
    truth.meta["scene_spec"] = doc

    out_dir = Path(args.output)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    for frame in frames:
        write_pgm(out_dir / "frames" / _frame_name(frame.index, False), frame.pixels)
    truth.to_json(out_dir / "truth.json")

    if args.correspondences:
        sets = []
        for t in range(2, truth.n_frames + 1):
            for gap in (1, 2):
                if t - gap >= 1:
                    sets.append(
                        truth_correspondences(
                            frames, truth, t - gap, t, args.correspondences, seed=seed
                        )
                    )
        write_correspondences(out_dir / "correspondences.csv", sets)

    print(f"rendered {len(frames)} frames -> {out_dir}")
    return 0


def _per_frame_sets(sets) -> dict[int, list]:
    grouped: dict[int, list] = {}
    for cset in sets:
        grouped.setdefault(cset.to_frame, []).append(cset)
    return grouped


def _concat_sets(sets):
    from .temporal import CorrespondenceSet

    first = sets[0]
    return CorrespondenceSet(
        first.from_frame,
        first.to_frame,
        np.concatenate([s.xy_from for s in sets]),
        np.concatenate([s.xy_to for s in sets]),
        np.concatenate([s.i_from for s in sets]),
        np.concatenate([s.i_to for s in sets]),
    )


def cmd_eval(args) -> int:
    calib_dir = Path(args.input)
    for name in ("chain.jsonl", "spatial_field.json", "correspondences.csv"):
        if not (calib_dir / name).exists():
            raise DataError(f"missing calibration artifact: {calib_dir / name}")
    chain = ParamChain.read_jsonl(calib_dir / "chain.jsonl")
    field = SpatialField.from_json(calib_dir / "spatial_field.json")
    sets = ingest_correspondences(calib_dir / "correspondences.csv")
    grouped = _per_frame_sets(sets)

    frames = chain.frames()
    have_field = bool(field.known_mask.any())
    errors: dict[str, list[float]] = {"uncalibrated": [], "temporal": []}
    if have_field:
        errors["temporal+spatial"] = []
    deltas = [float("nan")]
    for t in frames[1:]:
        deltas.append(photometric_delta(chain, t))
    for t in frames:
        if t not in grouped:
            for mode in errors:
                errors[mode].append(float("nan"))
            continue
        merged = grouped[t]
        raw = float(
            np.mean([photometric_error(s, mode="uncalibrated") for s in merged])
        )
        temporal = float(
            np.mean([photometric_error(s, chain, mode="temporal") for s in merged])
        )
        errors["uncalibrated"].append(raw)
        errors["temporal"].append(temporal)
        if have_field:
            errors["temporal+spatial"].append(
                float(
                    np.mean(
                        [
                            photometric_error(s, chain, field, mode="temporal+spatial")
                            for s in merged
                        ]
                    )
                )
            )

    valid = [
        i
        for i in range(len(frames))
        if not (math.isnan(deltas[i]) or math.isnan(errors["uncalibrated"][i]))
    ]
    improvements = [
        errors["uncalibrated"][i] - errors["temporal"][i] for i in valid
    ]
    sweep = threshold_sweep(
        [deltas[i] for i in valid], improvements, DEFAULT_SWEEP_THRESHOLDS
    )

    param_rmse = None
    if args.truth:
        truth_path = Path(args.truth) / "truth.json"
        if not truth_path.exists():
            raise DataError(f"missing ground truth: {truth_path}")
        truth = GroundTruth.from_json(truth_path)
        n = min(truth.n_frames, len(frames))
        entries = truth.chain_entries()[:n]
        gain_err = []
        offset_err = []
        for want, t in zip(entries, frames[:n]):
            got = chain.entry(t)
            gain_err.append((math.exp(got.a) - math.exp(want.a)) ** 2)
            offset_err.append((got.b - want.b) ** 2)
        param_rmse = {
            "gain_1t": float(np.sqrt(np.mean(gain_err))),
            "offset_1t": float(np.sqrt(np.mean(offset_err))),
        }

    summary_errors = {
        mode: [v for v in vals if not math.isnan(v)] for mode, vals in errors.items()
    }
    report = EvalReport(
        frames=frames,
        errors=errors,
        deltas=deltas,
        sweep=sweep,
        param_rmse=param_rmse,
        summary={m: float(np.mean(v)) for m, v in summary_errors.items() if v},
    )
    report_path = Path(args.report) if args.report else calib_dir / "report.json"
    report.to_json(report_path)
    report.to_csv(report_path.with_suffix(".csv"))
    print(report.format_table())
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="tircal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="calibrate a frame sequence")
    cal.add_argument("--input", required=True, help="directory of ordered PGM/PNG frames")
    cal.add_argument("--output", required=True, help="output artifact directory")
    cal.add_argument("--config", help="JSON config file")
    cal.add_argument("--seed", type=int, help="global RNG seed override")
    cal.add_argument("--output-mode", choices=["ramp", "palette", "clamp"])
    cal.add_argument("--correspondences", help="external correspondence CSV")
    cal.add_argument("--grid", help="spatial grid cells as WxH, e.g. 32x32")
    cal.add_argument("--xi-gap", type=float, help="gap adjustment coefficient")
    cal.add_argument("--xi-base", type=float, help="drift pull coefficient")
    cal.set_defaults(func=cmd_calibrate)

    syn = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    syn.add_argument("--spec", required=True, help="scene spec JSON file")
    syn.add_argument("--output", required=True, help="output directory")
    syn.add_argument("--seed", type=int, default=None)
    syn.add_argument(
        "--correspondences",
        type=int,
        default=0,
        help="also write N exact correspondences per frame pair",
    )
    syn.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="evaluate calibration artifacts")
    ev.add_argument("--input", required=True, help="calibrate output directory")
    ev.add_argument("--truth", help="synth output directory with truth.json")
    ev.add_argument("--report", help="report JSON path (default: <input>/report.json)")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GenerationError) as exc:
        print(f"tircal: config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"tircal: data error: {exc}", file=sys.stderr)
        return 2
    except TircalError as exc:
        print(f"tircal: internal error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - safety net
        print(f"tircal: unexpected error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
