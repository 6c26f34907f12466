"""Command-line entry point: ``mobonet <command> [flags]``.

Commands: synth, train-boundary, train-fusion, infer, eval-boundary,
eval-flow, grad-check.

Every command accepts ``--config FILE``, a flat ``key = value`` text file
(``#`` starts a comment). Flags given on the command line override file
values. Recognised keys, with defaults:

    count               synth: number of samples (4)
    width, height       synth: frame extent in px (64, 64)
    flow_noise          synth: initial-flow noise std in px (0.5)
    flow_smoothing      synth: Gaussian blur sigma on initial flows (0)
    seed                any randomised step (0)
    width_multiplier    boundary net channel scale (0.125)
    iterations          training iterations (2000 boundary, 1000 fusion)
    batch_size          training batch (4 boundary, 2 fusion)
    lr                  initial learning rate, overrides the phase default
    divisor             schedule step divisor (1000)
    layer_count         fusion layers (8)
    feature_maps        fusion feature maps (64)
    tol_frac            matching tolerance as a fraction of the diagonal (0.0075)
    nms                 thin maps before matching (true)
    per_image           average per-image AP instead of pooling (false)

Exit status: 0 on success, 2 for usage errors, 3 for configuration or
checkpoint mismatches, 4 for I/O and file-format errors, 5 when training
diverges, 6 when grad-check finds an op above tolerance.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import evaluation as ev
from . import flowio, gradcheck
from .flowdata import Sample, sample_from_files, synth_dataset
from .nets import FusionNet, FusionNetConfig, RefineNet, RefineNetConfig, build_fusion_net, build_refinenet
from .optim import TrainingLog
from .training import TrainConfig, TrainingDiverged, predict_boundaries, refine_flows, train_boundary, train_fusion

EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_GRADCHECK = 2, 3, 4, 5, 6
GRADCHECK_TOL = 1e-4
DTYPE = np.float32


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); per-command defaults override these below
KEYS = {
    "count": (int, 4),
    "width": (int, 64),
    "height": (int, 64),
    "flow_noise": (float, 0.5),
    "flow_smoothing": (float, 0.0),
    "seed": (int, 0),
    "width_multiplier": (float, 0.125),
    "iterations": (int, 2000),
    "batch_size": (int, 4),
    "lr": (float, None),
    "divisor": (float, 1000.0),
    "augment_prob": (float, 0.0),
    "layer_count": (int, 8),
    "feature_maps": (int, 64),
    "tol_frac": (float, ev.DEFAULT_TOL_FRAC),
    "nms": (_bool, True),
    "per_image": (_bool, False),
}
COMMAND_DEFAULTS = {"train-fusion": {"iterations": 1000, "batch_size": 2}}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def read_config(path) -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value", EXIT_CONFIG)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise CliError(f"{path}:{lineno}: unknown key {key!r}", EXIT_CONFIG)
        values[key] = value
    return values


def resolve(args: argparse.Namespace, keys: Sequence[str]) -> Dict[str, object]:
    """Merge defaults, config file and flags (in increasing priority)."""
    from_file = read_config(args.config) if args.config else {}
    out = {}
    for key in keys:
        parse, default = KEYS[key]
        default = COMMAND_DEFAULTS.get(args.command, {}).get(key, default)
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in from_file:
            try:
                out[key] = parse(from_file[key])
            except ValueError as exc:
                raise CliError(f"config key {key}: {exc}", EXIT_CONFIG) from exc
        else:
            out[key] = default
    return out


# --- data --------------------------------------------------------------------


def load_samples(manifest) -> List[Sample]:
    samples = []
    for rec in flowio.read_manifest(manifest):
        samples.append(
            sample_from_files(
                flowio.read_image(rec.frame1),
                flowio.read_image(rec.frame2),
                flowio.load_flo(rec.fwd_flow),
                flowio.load_flo(rec.bwd_flow),
                flowio.load_flo(rec.gt_flow),
                flowio.read_image(rec.gt_boundary),
            )
        )
    return samples


def read_predictions(path) -> List[List[Path]]:
    """Prediction listing written by ``infer``: boundary map and refined flow per line."""
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            rows.append([path.parent / p for p in line.split()])
    return rows


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    c = resolve(args, ["count", "width", "height", "flow_noise", "flow_smoothing", "seed"])
    samples = synth_dataset(
        c["count"], c["width"], c["height"], c["seed"], flow_noise=c["flow_noise"], flow_smoothing=c["flow_smoothing"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Path(args.manifest) if args.manifest else out / "manifest.txt"
    rel = os.path.relpath(out, manifest.parent or ".")
    lines = []
    for i, s in enumerate(samples):
        names = [f"{i:04d}_{n}" for n in ("frame1.png", "frame2.png", "fwd.flo", "bwd.flo", "gt.flo", "boundary.pgm")]
        flowio.write_image(out / names[0], s.frame1)
        flowio.write_image(out / names[1], s.frame2)
        flowio.save_flo(out / names[2], s.fwd_flow)
        flowio.save_flo(out / names[3], s.bwd_flow)
        flowio.save_flo(out / names[4], s.gt_flow)
        flowio.write_image(out / names[5], s.gt_boundary.astype(np.float64))
        lines.append(flowio.format_manifest_line(Path(rel, n).as_posix() for n in names))
    _write_text(manifest, "".join(lines))
    print(f"wrote {c['count']} samples, manifest {manifest}")
    return 0


def _train_config(c) -> TrainConfig:
    if not 0.0 <= c.get("augment_prob", 0.0) <= 1.0:
        raise CliError("augment_prob must lie in [0, 1]", EXIT_CONFIG)
    return TrainConfig(
        iterations=c["iterations"],
        batch_size=c["batch_size"],
        base_lr=c["lr"],
        divisor=c["divisor"],
        seed=c["seed"],
        augment_prob=c.get("augment_prob", 0.0),
    )


def _require(value, flag):
    if not value:
        raise CliError(f"{flag} is required", EXIT_USAGE)
    return value


def cmd_train_boundary(args) -> int:
    c = resolve(args, ["seed", "width_multiplier", "iterations", "batch_size", "lr", "divisor", "augment_prob"])
    samples = load_samples(_require(args.manifest, "--manifest"))
    if not samples:
        raise CliError("manifest lists no samples", EXIT_CONFIG)
    h, w = samples[0].gt_boundary.shape
    cfg = RefineNetConfig(input_height=h, input_width=w, width_multiplier=c["width_multiplier"])
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    net = build_refinenet(cfg, seed=c["seed"], dtype=DTYPE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "boundary_log.txt", "w") as stream:
        train_boundary(net, samples, _train_config(c), TrainingLog(stream))
    ckpt.save_checkpoint(out / "boundary.ckpt", net)
    print(f"wrote {out / 'boundary.ckpt'}")
    return 0


def _boundary_net(path) -> RefineNet:
    net, _ = ckpt.load_checkpoint(_require(path, "--checkpoint"), DTYPE, expect_kind=RefineNet.kind)
    return net


def _check_extent(net: RefineNet, samples):
    for s in samples:
        if s.gt_boundary.shape != (net.cfg.input_height, net.cfg.input_width):
            raise CliError(
                f"data extent {s.gt_boundary.shape} does not match checkpoint input "
                f"{(net.cfg.input_height, net.cfg.input_width)}",
                EXIT_CONFIG,
            )


def cmd_train_fusion(args) -> int:
    c = resolve(args, ["seed", "iterations", "batch_size", "lr", "divisor", "layer_count", "feature_maps"])
    samples = load_samples(_require(args.manifest, "--manifest"))
    if not samples:
        raise CliError("manifest lists no samples", EXIT_CONFIG)
    bnet = _boundary_net(args.checkpoint)
    _check_extent(bnet, samples)
    boundaries = predict_boundaries(bnet, samples)
    net = build_fusion_net(FusionNetConfig(layer_count=c["layer_count"], feature_maps=c["feature_maps"]), seed=c["seed"], dtype=DTYPE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fusion_log.txt", "w") as stream:
        train_fusion(net, samples, boundaries, _train_config(c), TrainingLog(stream))
    ckpt.save_checkpoint(out / "fusion.ckpt", net)
    print(f"wrote {out / 'fusion.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    samples = load_samples(_require(args.manifest, "--manifest"))
    bnet = _boundary_net(args.checkpoint)
    _check_extent(bnet, samples)
    probs = predict_boundaries(bnet, samples)
    refined: Optional[List[np.ndarray]] = None
    if args.fusion_checkpoint:
        fnet, _ = ckpt.load_checkpoint(args.fusion_checkpoint, DTYPE, expect_kind=FusionNet.kind)
        refined = refine_flows(fnet, [s.fwd_flow for s in samples], probs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(probs):
        names = [f"{i:04d}_prob.pgm"]
        flowio.write_image(out / names[0], np.clip(p, 0.0, 1.0), maxval=65535)
        if refined is not None:
            names.append(f"{i:04d}_refined.flo")
            flowio.save_flo(out / names[1], refined[i].astype(np.float32))
        lines.append(" ".join(names) + "\n")
    _write_text(out / "predictions.txt", "".join(lines))
    print(f"wrote {len(probs)} predictions to {out}")
    return 0


def _emit(text: str, out) -> None:
    if out:
        _write_text(Path(out), text)
    else:
        sys.stdout.write(text)


def _aligned_predictions(args, n):
    rows = read_predictions(_require(args.predictions, "--predictions"))
    if len(rows) != n:
        raise CliError(f"{len(rows)} predictions for {n} manifest entries", EXIT_CONFIG)
    return rows


def cmd_eval_boundary(args) -> int:
    c = resolve(args, ["tol_frac", "nms", "per_image"])
    records = flowio.read_manifest(_require(args.manifest, "--manifest"))
    rows = _aligned_predictions(args, len(records))
    cfg = ev.EvalConfig(tol_frac=c["tol_frac"], nms=c["nms"], per_image=c["per_image"])
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    probs = [flowio.read_image(r[0]) for r in rows]
    gts = [flowio.read_image(rec.gt_boundary) > 0.5 for rec in records]
    curve = ev.pr_curve(probs, gts, cfg)
    _emit(ev.format_pr_table(curve, ev.dataset_ap(probs, gts, cfg)), args.out)
    return 0


def cmd_eval_flow(args) -> int:
    records = flowio.read_manifest(_require(args.manifest, "--manifest"))
    if args.predictions:
        rows = _aligned_predictions(args, len(records))
        if any(len(r) < 2 for r in rows):
            raise CliError("predictions listing has no refined flows", EXIT_CONFIG)
        preds = [flowio.load_flo(r[1]) for r in rows]
    else:
        preds = [flowio.load_flo(rec.fwd_flow) for rec in records]  # initial flows
    gts = [flowio.load_flo(rec.gt_flow) for rec in records]
    per = [float(ev.endpoint_errors(p, g).mean()) for p, g in zip(preds, gts)]
    names = [rec.fwd_flow.name for rec in records]
    _emit(ev.format_epe_table(names, per, ev.epe_stats(preds, gts)), args.out)
    return 0


def cmd_grad_check(args) -> int:
    c = resolve(args, ["seed"])
    checks = gradcheck.default_op_checks(instances=args.instances, seed=c["seed"])
    lines = ["# op instances max_rel_error\n"]
    worst = 0.0
    for chk in checks:
        lines.append(f"{chk.name} {chk.instances} {chk.max_rel_error:.3e}\n")
        worst = max(worst, chk.max_rel_error)
    _emit("".join(lines), args.out)
    if not worst <= GRADCHECK_TOL:
        print(f"gradient check failed: max relative error {worst:.3e} > {GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


# --- parser ------------------------------------------------------------------------


def _add_keys(p, keys):
    for key in keys:
        parse, _ = KEYS[key]
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=parse, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobonet", description="Motion boundary detection and flow refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, keys, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", help="output directory (or file for eval and grad-check)")
        p.add_argument("--manifest", help="dataset manifest")
        p.add_argument("--checkpoint", help="boundary network checkpoint")
        _add_keys(p, keys)
        p.set_defaults(func=func)
        return p

    command("synth", cmd_synth, ["count", "width", "height", "flow_noise", "flow_smoothing", "seed"], "generate a synthetic dataset")
    command("train-boundary", cmd_train_boundary, ["seed", "width_multiplier", "iterations", "batch_size", "lr", "divisor", "augment_prob"], "train the boundary network")
    command("train-fusion", cmd_train_fusion, ["seed", "iterations", "batch_size", "lr", "divisor", "layer_count", "feature_maps"], "train the fusion network")
    p = command("infer", cmd_infer, ["seed"], "predict boundary maps and refined flows")
    p.add_argument("--fusion-checkpoint", help="fusion network checkpoint; enables refined flow output")
    p = command("eval-boundary", cmd_eval_boundary, ["tol_frac", "nms", "per_image", "seed"], "PR table and AP")
    p.add_argument("--predictions", help="listing written by infer")
    p = command("eval-flow", cmd_eval_flow, ["seed"], "mean endpoint error table")
    p.add_argument("--predictions", help="listing written by infer; default evaluates the initial flows")
    p = command("grad-check", cmd_grad_check, ["seed"], "finite-difference gradient report")
    p.add_argument("--instances", type=int, default=20)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("synth", "train-boundary", "train-fusion", "infer") and not args.out:
        parser.error("--out is required")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ckpt.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, flowio.FlowFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
