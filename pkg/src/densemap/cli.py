"""Command-line entry point: ``densemap <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (a JSON object of option values,
or a manifest written by a previous run) and writes a manifest beside its
outputs. Option values resolve as flags > config file > built-in defaults.
Exit status is 0 on success, 1 on invalid input and 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import detection as det
from . import estimator as est
from . import metrics as met
from . import simulator as sim
from . import synthesis as syn
from . import tracking as trk
from .core import (
    DotAnnotations,
    RoiMask,
    load_roi,
    parse_annotations,
    read_perspective,
    read_pgm,
    read_raster,
    sum_in_roi,
    write_annotations,
    write_pgm,
    write_raster,
)
from .errors import DensemapError, ValidationError

SEED_ENV = "DENSEMAP_SEED"
FRAME_RE = re.compile(r"^frame_(\d+)$")
_NOT_SAVED = ("config", "jobs")


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1 (invalid input) instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# option tables: (flag, dest, type, default, help, extra argparse kwargs)

def _levels(text) -> list[int]:
    text = str(text)
    if ".." in text:
        a, b = text.split("..", 1)
        out = list(range(int(a), int(b) + 1))
    else:
        out = [int(t) for t in text.split(",") if t.strip()]
    if not out or min(out) < 0:
        raise ValidationError(f"levels must be 'a..b' or a comma list of non-negative integers, got {text!r}")
    return out


def _opt_float(text):
    return None if text is None or str(text).lower() == "none" else float(text)


def _opt_int(text):
    return None if text is None or str(text).lower() == "none" else int(text)


def _float_or_noisy(text):
    return "noisy" if str(text).lower() == "noisy" else float(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


SIM_OPTS = [
    ("--out", "out", str, None, "output directory", {}),
    ("--scenario", "scenario", str, "crowd", "crowd or distractor", {"choices": ["crowd", "distractor"]}),
    ("--width", "width", int, sim.SceneConfig.width, "frame width in pixels", {}),
    ("--height", "height", int, sim.SceneConfig.height, "frame height in pixels", {}),
    ("--n-people", "n_people", int, sim.SceneConfig.n_people, "number of people", {}),
    ("--n-frames", "n_frames", int, sim.SceneConfig.n_frames, "number of frames", {}),
    ("--top-scale", "top_scale", float, sim.SceneConfig.top_scale, "perspective scale of the top row", {}),
    ("--bottom-scale", "bottom_scale", float, sim.SceneConfig.bottom_scale, "perspective scale of the bottom row", {}),
    ("--render-sigma", "render_sigma", float, sim.SceneConfig.person_render_sigma, "blob sigma at scale 1", {}),
    ("--speed", "speed", float, sim.SceneConfig.speed, "walking speed, px/frame", {}),
    ("--noise", "noise", float, sim.SceneConfig.noise_sigma, "additive Gaussian noise sigma", {}),
    ("--n-clutter", "n_clutter", int, sim.SceneConfig.n_clutter, "static unannotated blobs (crowd scenario)", {}),
    ("--clutter", "clutter", _bool, True, "static blob on the target path (distractor scenario)", {}),
    ("--min-gap", "min_gap", _opt_float, None, "closest approach in the distractor scenario (None: one blob diameter)", {}),
]

SYNTH_OPTS = [
    ("--ann", "ann", str, None, "annotation JSON", {}),
    ("--out", "out", str, None, "output directory", {}),
    ("--sigma", "sigma", float, 4.0, "Gaussian sigma in pixels", {}),
    ("--mode", "mode", str, syn.FIXED, "fixed or perspective", {"choices": [syn.FIXED, syn.PERSPECTIVE]}),
    ("--perspective", "perspective", str, None, "perspective map (DMF1), needed in perspective mode", {}),
    ("--reference-scale", "reference_scale", float, 1.0, "perspective value at which sigma applies", {}),
    ("--truncation", "truncation", float, 4.0, "kernel truncation radius in sigmas", {}),
    ("--normalization", "normalization", str, syn.RENORMALIZE, "renormalize or none",
     {"choices": [syn.RENORMALIZE, syn.NO_NORMALIZATION]}),
    ("--width", "width", _opt_int, None, "output width (None: annotation width)", {}),
    ("--height", "height", _opt_int, None, "output height (None: annotation height)", {}),
]

TRAIN_OPTS = [
    ("--frames", "frames", str, None, "directory of frame_*.pgm images", {}),
    ("--density", "density", str, None, "directory of frame_*.dmf target maps", {}),
    ("--out", "out", str, None, "output model file (RRM1)", {}),
    ("--patch-size", "patch_size", int, est.DEFAULT_PATCH_SIZE, "odd patch size", {}),
    ("--lambda", "ridge_lambda", float, est.DEFAULT_LAMBDA, "ridge penalty", {}),
    ("--stride", "stride", int, 1, "use every stride-th row and column as samples", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
]

PREDICT_OPTS = [
    ("--model", "model", str, None, "model file (RRM1)", {}),
    ("--frames", "frames", str, None, "directory of frame_*.pgm images", {}),
    ("--out", "out", str, None, "output directory for frame_*.dmf", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
]

TRACK_OPTS = [
    ("--frames", "frames", str, None, "directory of frame_*.pgm images", {}),
    ("--ann", "ann", str, None, "annotation JSON with the target's start position", {}),
    ("--out", "out", str, None, "output directory", {}),
    ("--density", "density", str, None, "optional directory of frame_*.dmf maps to fuse", {}),
    ("--track-id", "track_id", _opt_int, None, "target track id (None: first id of the first frame)", {}),
    ("--window", "window", int, list(trk.DEFAULT_WINDOW), "tracker window width height", {"nargs": 2}),
    ("--learning-rate", "learning_rate", float, trk.TrackerConfig.learning_rate, "template update rate", {}),
    ("--regularization", "regularization", float, trk.TrackerConfig.regularization, "filter ridge term", {}),
    ("--target-sigma", "target_sigma", _opt_float, None, "target peak sigma (None: window / 10)", {}),
    ("--cosine-window", "cosine_window", _bool, True, "apply a cosine window to patches", {}),
    ("--density-smooth", "density_smooth", int, 1, "causal moving average span over density maps", {}),
    ("--max-threshold", "max_threshold", int, 50, "precision curve thresholds 0..N px", {}),
]

EVAL_COUNT_OPTS = [
    ("--pred", "pred", str, None, "directory of predicted frame_*.dmf", {}),
    ("--gt", "gt", str, None, "directory of ground-truth frame_*.dmf", {}),
    ("--ann", "ann", str, None, "annotation JSON; counts dots instead of summing --gt maps", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
    ("--out", "out", str, None, "output CSV", {}),
]

EVAL_GAME_OPTS = [
    ("--pred", "pred", str, None, "directory of predicted frame_*.dmf", {}),
    ("--gt", "gt", str, None, "directory of ground-truth frame_*.dmf", {}),
    ("--levels", "levels", str, "0..3", "GAME levels, 'a..b' or a comma list", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
    ("--out", "out", str, None, "output CSV", {}),
]

EVAL_QUALITY_OPTS = [
    ("--pred", "pred", str, None, "directory of predicted frame_*.dmf", {}),
    ("--gt", "gt", str, None, "directory of ground-truth frame_*.dmf", {}),
    ("--ann", "ann", str, None, "annotation JSON", {}),
    ("--perspective", "perspective", str, None, "perspective map (DMF1) scaling the boxes", {}),
    ("--box-width", "box_width", float, 16.0, "box width at the reference scale", {}),
    ("--box-height", "box_height", float, 16.0, "box height at the reference scale", {}),
    ("--reference-scale", "reference_scale", float, 1.0, "perspective value of the base box", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
    ("--out", "out", str, None, "output CSV", {}),
]

EVAL_DET_OPTS = [
    ("--det", "det", str, None, "detections JSON", {}),
    ("--ann", "ann", str, None, "annotation JSON", {}),
    ("--distance", "distance", float, 4.0, "matching distance in pixels", {}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
    ("--out", "out", str, None, "output CSV", {}),
]

EVAL_TRACK_OPTS = [
    ("--positions", "positions", str, None, "positions CSV written by 'track'", {}),
    ("--ann", "ann", str, None, "annotation JSON", {}),
    ("--track-id", "track_id", _opt_int, None, "target track id (None: first id of the first frame)", {}),
    ("--max-threshold", "max_threshold", int, 50, "precision curve thresholds 0..N px", {}),
    ("--out", "out", str, None, "output directory", {}),
]

PIPELINE_OPTS = [
    ("--out", "out", str, None, "output directory", {}),
]

DETECT_OPTS = [
    ("--density", "density", str, None, "directory of frame_*.dmf maps", {}),
    ("--out", "out", str, None, "output detections JSON", {}),
    ("--method", "method", str, det.LOCAL_MAX, "detector", {"choices": list(det.METHODS)}),
    ("--sigma", "sigma", float, det.DEFAULT_SIGMA, "density sigma the defaults refer to", {}),
    ("--tau", "tau", str, "default", "segment threshold: a number, 'default' (1e-3 x peak) or 'noisy' (0.1 x peak)", {}),
    ("--presmooth", "presmooth", _float_or_noisy, 0.0, "Gaussian presmoothing sigma, or 'noisy' for the preset", {}),
    ("--nms-radius", "nms_radius", float, det.DEFAULT_NMS_RADIUS, "local-max suppression radius", {}),
    ("--quantization", "quantization", int, det.DEFAULT_QUANTIZATION, "gmm-weighted replication scale", {}),
    ("--window", "window", _opt_int, None, "intprog window (None: from sigma)", {}),
    ("--stride", "stride", int, 1, "intprog window stride", {}),
    ("--candidate-stride", "candidate_stride", int, 1, "intprog candidate lattice stride", {}),
    ("--solver", "solver", str, "greedy", "intprog solver", {"choices": ["greedy", "exact"]}),
    ("--norm", "norm", str, "l1", "intprog misfit norm", {"choices": ["l1", "l2"]}),
    ("--roi", "roi", str, None, "ROI (JSON polygon or DMF1 mask)", {}),
]

# (options, uses seed, runs frames in parallel)
COMMANDS = {
    "simulate": (SIM_OPTS, True, False, "generate a synthetic annotated scene"),
    "synth": (SYNTH_OPTS, False, True, "ground-truth density maps from annotations"),
    "train-rr": (TRAIN_OPTS, False, False, "train the ridge-regression estimator"),
    "predict": (PREDICT_OPTS, False, True, "predict density maps with a trained model"),
    "detect": (DETECT_OPTS, True, True, "detect objects in density maps"),
    "track": (TRACK_OPTS, False, False, "track one person, optionally fused with density"),
    "eval-count": (EVAL_COUNT_OPTS, False, False, "counting MAE / MSE"),
    "eval-game": (EVAL_GAME_OPTS, False, False, "grid average mean absolute error"),
    "eval-quality": (EVAL_QUALITY_OPTS, False, False, "per-pixel scatter, BBDR, BBMAE and MAD"),
    "eval-det": (EVAL_DET_OPTS, False, False, "detection precision / recall / F1 and ED / EDD"),
    "eval-track": (EVAL_TRACK_OPTS, False, False, "tracking error and precision curve"),
    "pipeline": (PIPELINE_OPTS, True, True, "simulate, synth, detect and eval-det in one run"),
}

PIPELINE_STAGES = ("simulate", "synth", "detect", "eval_det")


def defaults(command: str) -> dict:
    opts, seeded, parallel, _ = COMMANDS[command]
    out = {dest: default for _, dest, _, default, _, _ in opts}
    if seeded:
        out["seed"] = 0
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densemap", description="Density-map toolkit for crowd counting, detection and tracking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (opts, seeded, parallel, summary) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config or manifest (default: none)")
        for flag, dest, typ, default, text, extra in opts:
            kw = dict(extra)
            p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=f"{text} (default: {default})", **kw)
        if seeded:
            p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                           help=f"random seed (default: ${SEED_ENV} or 0)")
        if parallel:
            p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes (default: 1)")
    return parser


# ---------------------------------------------------------------------------
# configuration


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return doc


def _config_section(doc: dict, command: str) -> dict:
    if "command" in doc and "config" in doc:  # a manifest
        if doc["command"] != command:
            raise ValidationError(f"manifest is for '{doc['command']}', not '{command}'")
        doc = doc["config"]
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve(command: str, flags: dict, env=None) -> dict:
    """Effective options: flags over config file over defaults (seed falls back to the environment)."""
    env = os.environ if env is None else env
    opts = COMMANDS[command][0]
    base = defaults(command)
    cfg = {}
    if "config" in flags:
        cfg = _config_section(_load_json(flags["config"]), command)
        stage_keys = set(PIPELINE_STAGES) if command == "pipeline" else set()
        unknown = set(cfg) - set(base) - stage_keys
        if unknown:
            raise ValidationError(f"unknown config keys for '{command}': {', '.join(sorted(unknown))}")
    if "seed" in base and env.get(SEED_ENV) not in (None, ""):
        try:
            base["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    types = {dest: typ for _, dest, typ, _, _, _ in opts}
    merged = dict(base)
    for k, v in cfg.items():
        if k in types and v is not None:
            if isinstance(v, list):
                v = [types[k](x) for x in v]
            elif not (types[k] is str and isinstance(v, str)):
                v = types[k](v) if not isinstance(v, bool) or types[k] is _bool else v
        merged[k] = v
    for k, v in flags.items():
        if k not in _NOT_SAVED:
            merged[k] = v
    merged["jobs"] = int(flags.get("jobs", cfg.get("jobs", 1)) or 1)
    if merged["jobs"] < 1:
        raise ValidationError("--jobs must be >= 1")
    return merged


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------------------
# files


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_hashes(*paths) -> dict:
    """SHA-256 of each input file; directories contribute their frame files in order."""
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.iterdir() if FRAME_RE.match(q.stem)):
                out[str(f)] = _sha256(f)
        else:
            out[str(p)] = _sha256(p)
    return out


def _saved_config(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in _NOT_SAVED}


def write_manifest(path, command: str, cfg: dict, inputs: dict) -> None:
    doc = {
        "command": command,
        "config": _saved_config(cfg),
        "inputs": dict(sorted(inputs.items())),
        "version": __version__,
        "seed": int(cfg.get("seed", 0)),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def frame_name(frame_id: int, ext: str) -> str:
    return f"frame_{frame_id:06d}.{ext}"


def list_frames(directory, ext: str) -> dict[int, Path]:
    """``frame_<id>.<ext>`` files of a directory keyed by integer frame id."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: no such directory")
    out = {}
    for f in d.iterdir():
        m = FRAME_RE.match(f.stem)
        if m and f.suffix == "." + ext:
            out[int(m.group(1))] = f
    if not out:
        raise ValidationError(f"{d}: no frame_*.{ext} files")
    return dict(sorted(out.items()))


def paired_frames(a, ext_a: str, b, ext_b: str) -> list[tuple[int, Path, Path]]:
    fa, fb = list_frames(a, ext_a), list_frames(b, ext_b)
    common = sorted(set(fa) & set(fb))
    if not common:
        raise ValidationError(f"no frame ids shared by {a} and {b}")
    return [(i, fa[i], fb[i]) for i in common]


def _roi(path, width: int, height: int) -> RoiMask | None:
    return None if path is None else load_roi(path, width, height)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path, header: list[str], rows: list[list], stream=None) -> None:
    """CSV with a header row plus the same table printed for people."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    stream = sys.stdout if stream is None else stream
    cells = [header] + [[(f"{v:.4f}" if isinstance(v, float) else _fmt(v)) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    for row in cells:
        print("  ".join(c.rjust(wd) for c, wd in zip(row, widths)), file=stream)


def _map_frames(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def _scene_config(cfg: dict) -> sim.SceneConfig:
    return sim.SceneConfig(
        width=cfg["width"], height=cfg["height"], n_people=cfg["n_people"], n_frames=cfg["n_frames"],
        top_scale=cfg["top_scale"], bottom_scale=cfg["bottom_scale"], person_render_sigma=cfg["render_sigma"],
        speed=cfg["speed"], noise_sigma=cfg["noise"], seed=cfg["seed"], n_clutter=cfg["n_clutter"],
    )


def cmd_simulate(cfg: dict) -> int:
    _require(cfg, "out")
    scfg = _scene_config(cfg)
    if cfg["scenario"] == "distractor":
        scene = sim.scenario_distractor(scfg, cfg["min_gap"], cfg["clutter"])
    else:
        scene = sim.simulate_scene(scfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(scene.images):
        write_pgm(img, out / frame_name(t, "pgm"))
    write_annotations(scene.annotations, out / "annotations.json")
    write_raster(scene.perspective, out / "perspective.dmf")
    write_manifest(out / "manifest.json", "simulate", cfg, {})
    print(f"wrote {len(scene.images)} frames of {scfg.width}x{scfg.height} with {scene.annotations.frames[0].points.shape[0]} people to {out}")
    return 0


def _synth_one(job):
    ann, frame_id, scfg, width, height, out = job
    write_raster(syn.synthesize_density(ann, frame_id, scfg, width, height), out)
    return out


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "ann", "out")
    ann = parse_annotations(cfg["ann"])
    persp = None
    if cfg["mode"] == syn.PERSPECTIVE:
        _require(cfg, "perspective")
        persp = read_perspective(cfg["perspective"])
    scfg = syn.SynthesisConfig(
        sigma=cfg["sigma"], mode=cfg["mode"], perspective=persp, reference_scale=cfg["reference_scale"],
        truncation_radius=cfg["truncation"], normalization=cfg["normalization"],
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(ann, f.frame_id, scfg, cfg["width"], cfg["height"], out / frame_name(f.frame_id, "dmf")) for f in ann.frames]
    _map_frames(_synth_one, jobs, cfg["jobs"])
    write_manifest(out / "manifest.json", "synth", cfg, input_hashes(cfg["ann"], cfg["perspective"]))
    print(f"wrote {len(jobs)} density maps to {out}")
    return 0


def cmd_train_rr(cfg: dict) -> int:
    _require(cfg, "frames", "density", "out")
    pairs = paired_frames(cfg["frames"], "pgm", cfg["density"], "dmf")
    images = [read_pgm(a) for _, a, _ in pairs]
    dens = [read_raster(b) for _, _, b in pairs]
    h, w = images[0].shape
    roi = _roi(cfg["roi"], w, h)
    model = est.fit_estimator(images, dens, cfg["patch_size"], cfg["ridge_lambda"], roi, cfg["stride"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save_model(model, out)
    write_manifest(_file_manifest(out), "train-rr", cfg, input_hashes(cfg["frames"], cfg["density"], cfg["roi"]))
    print(f"trained on {len(pairs)} frames, patch {model.patch_size}, lambda {model.ridge_lambda:g} -> {out}")
    return 0


def _predict_one(job):
    model, image_path, roi_path, out = job
    img = read_pgm(image_path)
    roi = _roi(roi_path, img.shape[1], img.shape[0])
    write_raster(est.predict_density(model, img, roi), out)
    return out


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "model", "frames", "out")
    model = est.load_model(cfg["model"])
    frames = list_frames(cfg["frames"], "pgm")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(model, p, cfg["roi"], out / frame_name(i, "dmf")) for i, p in frames.items()]
    _map_frames(_predict_one, jobs, cfg["jobs"])
    write_manifest(out / "manifest.json", "predict", cfg, input_hashes(cfg["model"], cfg["frames"], cfg["roi"]))
    print(f"wrote {len(jobs)} predicted maps to {out}")
    return 0


def detector_options(cfg: dict) -> dict:
    """Keyword options for :func:`densemap.detection.detect` from resolved CLI options."""
    method = cfg["method"]
    presmooth = cfg["presmooth"]
    if presmooth == "noisy":
        presmooth = det.NOISY_PRESMOOTH[method]
    tau_text = str(cfg["tau"]).lower()
    peak = syn.peak_density(cfg["sigma"])
    if tau_text in ("default", "none"):
        tau = det.default_tau(cfg["sigma"])
    elif tau_text == "noisy":
        tau = det.NOISY_TAU_FRACTION * peak
    else:
        try:
            tau = float(tau_text)
        except ValueError as exc:
            raise ValidationError(f"--tau must be a number, 'default' or 'noisy', got {cfg['tau']!r}") from exc
    if method == det.LOCAL_MAX:
        return {"nms_radius": cfg["nms_radius"], "presmooth_sigma": presmooth}
    if method == det.KMEANS:
        return {"tau": tau, "seed": cfg["seed"], "presmooth_sigma": presmooth}
    if method in (det.GMM, det.GMM_WEIGHTED):
        return {"tau": tau, "seed": cfg["seed"], "presmooth_sigma": presmooth, "quantization": cfg["quantization"]}
    window = cfg["window"] if cfg["window"] is not None else det.default_window(cfg["sigma"])
    ip = det.IntProgConfig(window=window, stride=cfg["stride"], candidate_stride=cfg["candidate_stride"],
                           solver=cfg["solver"], norm=cfg["norm"])
    return {"cfg": ip, "presmooth_sigma": presmooth}


def _detect_one(job):
    frame_id, path, method, options, roi_path = job
    dmap = read_raster(path)
    roi = _roi(roi_path, dmap.width, dmap.height)
    if roi is not None:
        dmap = dmap.with_roi(roi)
    ds = det.detect(dmap, method, frame_id, **options)
    return frame_id, dmap.width, dmap.height, ds.points.tolist(), ds.source_count


def detections_to_dict(width: int, height: int, method: str, frames: list) -> dict:
    return {
        "width": width,
        "height": height,
        "method": method,
        "frames": [{"id": i, "points": pts, "source_count": sc} for i, pts, sc in frames],
    }


def cmd_detect(cfg: dict) -> int:
    _require(cfg, "density", "out")
    options = detector_options(cfg)
    frames = list_frames(cfg["density"], "dmf")
    jobs = [(i, p, cfg["method"], options, cfg["roi"]) for i, p in frames.items()]
    results = _map_frames(_detect_one, jobs, cfg["jobs"])
    width, height = results[0][1], results[0][2]
    doc = detections_to_dict(width, height, cfg["method"], [(i, pts, sc) for i, _, _, pts, sc in results])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    write_manifest(_file_manifest(out), "detect", cfg, input_hashes(cfg["density"], cfg["roi"]))
    n = sum(len(pts) for _, _, _, pts, _ in results)
    print(f"{cfg['method']}: {n} detections over {len(results)} frames -> {out}")
    return 0


def _target_track(ann: DotAnnotations, track_id):
    """Per-frame position of one track (None where absent) and the track id used."""
    if not ann.has_tracks():
        raise ValidationError("annotations carry no track ids")
    first = ann.frames[0]
    if track_id is None:
        if len(first.points) == 0:
            raise ValidationError("first annotated frame is empty; pass --track-id")
        track_id = int(first.track_ids[0])
    pos = {}
    for f in ann.frames:
        ids = list(f.track_ids)
        if track_id in ids:
            pos[f.frame_id] = tuple(float(v) for v in f.points[ids.index(track_id)])
    if not pos:
        raise ValidationError(f"track id {track_id} never appears in the annotations")
    return pos, track_id


def _curve_rows(errors, max_threshold: int):
    return [[t, p] for t, p in met.tracking_precision_curve(errors, range(max_threshold + 1))]


def cmd_track(cfg: dict) -> int:
    _require(cfg, "frames", "ann", "out")
    ann = parse_annotations(cfg["ann"])
    gt, track_id = _target_track(ann, cfg["track_id"])
    frames = list_frames(cfg["frames"], "pgm")
    ids = [i for i in frames if i >= min(gt)]
    if not ids or ids[0] not in gt:
        raise ValidationError(f"track {track_id} has no position on the first tracked frame")
    images = [read_pgm(frames[i]) for i in ids]
    densities = None
    if cfg["density"] is not None:
        dmaps = list_frames(cfg["density"], "dmf")
        densities = trk.smooth_densities([read_raster(dmaps[i]) if i in dmaps else None for i in ids],
                                         cfg["density_smooth"])
    tcfg = trk.TrackerConfig(cfg["learning_rate"], cfg["regularization"], cfg["target_sigma"], cfg["cosine_window"])
    positions = trk.run_tracker(images, gt[ids[0]], tuple(cfg["window"]), tcfg, densities)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, errors = [], []
    for i, p in zip(ids, positions):
        g = gt.get(i)
        err = math.hypot(p[0] - g[0], p[1] - g[1]) if g else None
        if err is not None:
            errors.append(err)
        rows.append([i, p[0], p[1], g[0] if g else None, g[1] if g else None, err])
    _write_track_outputs(out, rows, errors, cfg["max_threshold"])
    inputs = input_hashes(cfg["frames"], cfg["ann"], cfg["density"])
    write_manifest(out / "manifest.json", "track", cfg, inputs)
    return 0


def _write_track_outputs(out: Path, rows, errors, max_threshold: int):
    header = ["frame", "x", "y", "gt_x", "gt_y", "error"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    mean_err = float(np.mean(errors)) if errors else math.nan
    w.writerow(["mean", "", "", "", "", _fmt(mean_err)])
    (out / "positions.csv").write_text(buf.getvalue(), encoding="utf-8")
    if errors:
        curve = _curve_rows(errors, max_threshold)
        write_table(out / "precision.csv", ["threshold", "precision"], curve, stream=io.StringIO())
        p4 = dict((t, p) for t, p in curve).get(4, math.nan)
        print(f"{len(rows)} frames, mean error {mean_err:.3f} px, precision@4px {p4:.3f}")


def cmd_eval_track(cfg: dict) -> int:
    _require(cfg, "positions", "ann", "out")
    ann = parse_annotations(cfg["ann"])
    gt, _ = _target_track(ann, cfg["track_id"])
    rows, errors = [], []
    with open(cfg["positions"], newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if not rec["frame"].isdigit():
                continue
            i, x, y = int(rec["frame"]), float(rec["x"]), float(rec["y"])
            g = gt.get(i)
            err = math.hypot(x - g[0], y - g[1]) if g else None
            if err is not None:
                errors.append(err)
            rows.append([i, x, y, g[0] if g else None, g[1] if g else None, err])
    if not errors:
        raise ValidationError("no tracked frame overlaps the annotated track")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_track_outputs(out, rows, errors, cfg["max_threshold"])
    write_manifest(out / "manifest.json", "eval-track", cfg, input_hashes(cfg["positions"], cfg["ann"]))
    return 0


def _load_pairs(cfg):
    pairs = paired_frames(cfg["pred"], "dmf", cfg["gt"], "dmf")
    return [(i, read_raster(a), read_raster(b)) for i, a, b in pairs]


def cmd_eval_count(cfg: dict) -> int:
    _require(cfg, "pred", "out")
    if cfg["gt"] is None and cfg["ann"] is None:
        raise ValidationError("eval-count needs --gt maps or --ann annotations")
    preds = list_frames(cfg["pred"], "dmf")
    ann = parse_annotations(cfg["ann"]) if cfg["ann"] else None
    gts = list_frames(cfg["gt"], "dmf") if ann is None else None
    rows, pc, gc = [], [], []
    for i, path in preds.items():
        pred = read_raster(path)
        roi = _roi(cfg["roi"], pred.width, pred.height) or RoiMask.full(pred.width, pred.height)
        if ann is not None:
            g = float(syn.ground_truth_count(ann, i, roi))
        elif i in gts:
            g = sum_in_roi(read_raster(gts[i]), roi)
        else:
            continue
        p = sum_in_roi(pred, roi)
        pc.append(p)
        gc.append(g)
        rows.append([i, p, g, abs(p - g), (p - g) ** 2])
    if not rows:
        raise ValidationError("no predicted frame has a ground truth")
    agg = met.count_errors(pc, gc)
    rows.append(["mean", float(np.mean(pc)), float(np.mean(gc)), agg["mae"], agg["mse"]])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, ["frame", "pred_count", "gt_count", "mae", "mse_mean_sq"], rows)
    write_manifest(_file_manifest(out), "eval-count", cfg, input_hashes(cfg["pred"], cfg["gt"], cfg["ann"], cfg["roi"]))
    return 0


def cmd_eval_game(cfg: dict) -> int:
    _require(cfg, "pred", "gt", "out")
    levels = _levels(cfg["levels"])
    rows, per = [], []
    for i, pred, gt in _load_pairs(cfg):
        roi = _roi(cfg["roi"], pred.width, pred.height)
        if roi is not None:
            pred, gt = pred.with_roi(roi), gt.with_roi(roi)
        vals = [met.game(pred, gt, L) for L in levels]
        per.append(vals)
        rows.append([i] + vals)
    rows.append(["mean"] + [float(v) for v in np.mean(per, axis=0)])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, ["frame"] + [f"game{L}" for L in levels], rows)
    write_manifest(_file_manifest(out), "eval-game", cfg, input_hashes(cfg["pred"], cfg["gt"], cfg["roi"]))
    return 0


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except DensemapError:
        return math.nan


def cmd_eval_quality(cfg: dict) -> int:
    _require(cfg, "pred", "gt", "ann", "out")
    ann = parse_annotations(cfg["ann"])
    persp = read_perspective(cfg["perspective"]) if cfg["perspective"] else None
    box = met.BoxSpec(cfg["box_width"], cfg["box_height"], persp, cfg["reference_scale"])
    rows, seq = [], []
    prev = None
    for i, pred, gt in _load_pairs(cfg):
        roi = _roi(cfg["roi"], pred.width, pred.height)
        if roi is not None:
            pred, gt = pred.with_roi(roi), gt.with_roi(roi)
        pts = ann.frame(i).points
        if roi is not None:
            pts = met.points_in_roi(pts, roi)
        try:
            sc = met.scatter_stats(pred, gt)
        except DensemapError:
            sc = {"pearson": math.nan, "slope": math.nan, "intercept": math.nan}
        mad = met.temporal_mad([prev, pred]) if prev is not None else None
        rows.append([
            i, sc["pearson"], sc["slope"], sc["intercept"],
            _safe(met.bbdr, pred, pts, box), _safe(met.bbdr, gt, pts, box),
            _safe(met.bbmae, pred, gt, pts, box), mad,
        ])
        seq.append(pred)
        prev = pred
    cols = np.array([[np.nan if v is None else v for v in r[1:7]] for r in rows], dtype=float)
    agg = ["mean"] + [float(np.nanmean(c)) if np.any(~np.isnan(c)) else math.nan for c in cols.T]
    agg.append(met.temporal_mad(seq) if len(seq) > 1 else math.nan)
    rows.append(agg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ["frame", "pearson", "slope", "intercept", "bbdr_pred", "bbdr_gt", "bbmae", "mad"]
    write_table(out, header, rows)
    inputs = input_hashes(cfg["pred"], cfg["gt"], cfg["ann"], cfg["perspective"], cfg["roi"])
    write_manifest(_file_manifest(out), "eval-quality", cfg, inputs)
    return 0


def load_detections(path) -> dict[int, np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return {int(f["id"]): np.asarray(f["points"], dtype=np.float64).reshape(-1, 2) for f in doc["frames"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed detections file ({exc})") from exc


def evaluate_detections(dets: dict, ann: DotAnnotations, distance: float, roi=None):
    """Per-frame rows and the pooled aggregate row of the eval-det table."""
    rows, matches, det_pts, gt_pts, gt_ids = [], [], [], [], []
    tp = nd = ng = 0
    for f in ann.frames:
        d = dets.get(f.frame_id, np.zeros((0, 2)))
        g, ids = f.points, f.track_ids
        if roi is not None:
            keep = roi.contains(g) if len(g) else np.zeros(0, dtype=bool)
            g = g[keep]
            ids = None if ids is None else tuple(np.asarray(ids)[keep].tolist())
            d = met.points_in_roi(d, roi)
        m = met.match_detections(d, g, distance)
        s = met.prf(m)
        tp, nd, ng = tp + m.true_positives, nd + len(d), ng + len(g)
        ed = [p[2] for p in m.pairs]
        rows.append([f.frame_id, len(d), len(g), m.true_positives, s["precision"], s["recall"], s["f1"],
                     float(np.mean(ed)) if ed else math.nan, len(g) and 1 - m.true_positives / len(g) or 0.0])
        matches.append(m)
        det_pts.append(d)
        gt_pts.append(g)
        gt_ids.append(ids)
    precision = tp / nd if nd else 0.0
    recall = tp / ng if ng else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    traj = {"ed_mean": math.nan, "ed_std": math.nan, "edd_mean": math.nan, "edd_std": math.nan,
            "miss_rate": (ng - tp) / ng if ng else 0.0}
    if all(i is not None for i in gt_ids):
        traj = met.trajectory_errors(matches, det_pts, gt_pts, gt_ids)
    agg = ["all", nd, ng, tp, precision, recall, f1, traj["ed_mean"], traj["miss_rate"]]
    return rows, agg, traj


def cmd_eval_det(cfg: dict) -> int:
    _require(cfg, "det", "ann", "out")
    ann = parse_annotations(cfg["ann"])
    dets = load_detections(cfg["det"])
    roi = _roi(cfg["roi"], ann.width, ann.height)
    rows, agg, traj = evaluate_detections(dets, ann, cfg["distance"], roi)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ["frame", "n_det", "n_gt", "tp", "precision", "recall", "f1", "ed_mean", "miss_rate"]
    write_table(out, header, rows + [agg])
    print(f"ED {traj['ed_mean']:.3f} +/- {traj['ed_std']:.3f}  EDD {traj['edd_mean']:.3f} +/- {traj['edd_std']:.3f}")
    write_manifest(_file_manifest(out), "eval-det", cfg, input_hashes(cfg["det"], cfg["ann"], cfg["roi"]))
    return 0


def cmd_pipeline(cfg: dict) -> int:
    """simulate -> synth -> detect -> eval-det under one output directory."""
    _require(cfg, "out")
    out = Path(cfg["out"])
    seed, jobs = cfg["seed"], cfg["jobs"]

    def stage(name, section, fixed):
        c = defaults(name)
        if "seed" in c:
            c["seed"] = seed
        c.update({k.replace("-", "_"): v for k, v in (cfg.get(section) or {}).items()})
        c.update(fixed)
        c["jobs"] = jobs
        unknown = set(c) - set(defaults(name)) - {"jobs"}
        if unknown:
            raise ValidationError(f"unknown '{section}' keys: {', '.join(sorted(unknown))}")
        return c

    scene = out / "scene"
    gt = out / "gt"
    sim_cfg = stage("simulate", "simulate", {"out": str(scene)})
    syn_cfg = stage("synth", "synth", {"ann": str(scene / "annotations.json"), "out": str(gt)})
    det_cfg = stage("detect", "detect", {"density": str(gt), "out": str(out / "detections.json")})
    ev_cfg = stage("eval-det", "eval_det",
                   {"det": str(out / "detections.json"), "ann": str(scene / "annotations.json"),
                    "out": str(out / "eval_det.csv")})
    for fn, c in ((cmd_simulate, sim_cfg), (cmd_synth, syn_cfg), (cmd_detect, det_cfg), (cmd_eval_det, ev_cfg)):
        rc = fn(c)
        if rc:
            return rc
    saved = dict(cfg)
    for section, c in zip(PIPELINE_STAGES, (sim_cfg, syn_cfg, det_cfg, ev_cfg)):
        saved[section] = _saved_config(c)
    write_manifest(out / "manifest.json", "pipeline", saved, {})
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "train-rr": cmd_train_rr,
    "predict": cmd_predict,
    "detect": cmd_detect,
    "track": cmd_track,
    "eval-count": cmd_eval_count,
    "eval-game": cmd_eval_game,
    "eval-quality": cmd_eval_quality,
    "eval-det": cmd_eval_det,
    "eval-track": cmd_eval_track,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("densemap: error: a subcommand is required", file=sys.stderr)
        return 1
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        cfg = resolve(args.command, flags)
        return HANDLERS[args.command](cfg)
    except DensemapError as exc:
        print(f"densemap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"densemap {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
