"""Command-line entry point: ``python -m oldn <command>``.

Results go to stdout as JSON; progress and errors go to stderr through
:func:`oldn.logs.log_event`. Configuration precedence is built-in defaults,
then the ``--config`` file, then explicit flags.
"""

from __future__ import annotations

import argparse
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import orjson

from .checks import CheckResult, dctcheck_suite, gradcheck_suite
from .codec_sim import Plane, Yuv420Frame, load_image, load_rgb, pad_to_multiple, save_image
from .errors import OldnError
from .harness import CHROMA_PLANES, FRAME_ALIGN, decode_plane, encode_plane, load_experiment_model, run_experiment, simulate_roundtrip
from .logs import log_event
from .metrics import psnr
from .network import ModelParams, enhance_plane
from .param_codec import read_stream, stream_size_bits, write_stream
from .settings import DEFAULT_CONFIG_PATH, ExperimentConfig, build_config, load_kv_file
from .storage import CHECKPOINT_PATH, load_model, read_report, save_model
from .tensor_core import no_grad
from .training import build_dataset, evaluate_dataset, load_manifest, split_dataset, train_offline


def _emit(obj: Any) -> None:
    sys.stdout.write(orjson.dumps(obj, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY).decode() + "\n")
    sys.stdout.flush()


def _load_config(args: argparse.Namespace, lr_key: str = "online.lr", **overrides: Any) -> ExperimentConfig:
    if args.config:
        flat = load_kv_file(args.config)
    elif DEFAULT_CONFIG_PATH.exists():
        flat = load_kv_file(DEFAULT_CONFIG_PATH)
    else:
        flat = {}
    flags: Dict[str, Any] = {
        "qps": [args.qp] if args.qp is not None else None,
        "online.steps": args.steps,
        lr_key: args.lr,
        "prec": args.prec,
        "seed": args.seed,
    }
    flags.update(overrides)
    return build_config(ExperimentConfig, flat, **flags)


def _model(checkpoint: Optional[str], cfg: ExperimentConfig) -> ModelParams:
    if checkpoint:
        return load_model(checkpoint)
    return load_experiment_model(cfg)


def _padded_frame(frame: Yuv420Frame) -> Yuv420Frame:
    """Luma to a multiple of 16 and chroma to a multiple of 8, edge replicated."""
    return Yuv420Frame(
        Plane(pad_to_multiple(frame.y.samples, FRAME_ALIGN)),
        Plane(pad_to_multiple(frame.u.samples, FRAME_ALIGN // 2)),
        Plane(pad_to_multiple(frame.v.samples, FRAME_ALIGN // 2)),
    )


def _yuv(path: str, width: int, height: int) -> Yuv420Frame:
    frame = load_image(path, width=width, height=height)
    assert isinstance(frame, Yuv420Frame)
    return frame


# --- Commands -------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(
        args,
        lr_key="offline.lr",
        **{
            "offline.epochs": args.epochs,
            "offline.patches_per_image": args.patches,
            "offline.batch_size": args.batch_size,
            "offline.holdout_fraction": args.holdout,
            "offline.seed": args.seed,
            "offline.qp": args.qp,
            "model.n": args.n,
        },
    )
    off = cfg.offline
    records = load_manifest(args.manifest, default_qp=off.qp)
    dataset = build_dataset(records, off.patches_per_image, cfg.seed, patch=off.chroma_patch)
    train_set, holdout = split_dataset(dataset, off.holdout_fraction, cfg.seed)
    params = train_offline(train_set, off, cfg.model)
    out = save_model(args.out, params)
    result: Dict[str, Any] = {"checkpoint": str(out), "pairs": len(train_set), "epochs": off.epochs}
    if len(holdout):
        result["holdout_pairs"] = len(holdout)
        result["holdout_gain_db"] = evaluate_dataset(params, holdout, off.batch_size)
    log_event("cli", "train done", checkpoint=str(out), pairs=len(train_set))
    _emit(result)
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model = _model(args.checkpoint, cfg)
    raw_in = _yuv(args.raw, args.width, args.height)
    deg_in = _yuv(args.degraded, args.width, args.height)
    raw, deg = _padded_frame(raw_in), _padded_frame(deg_in)
    region = raw_in.u.shape
    crop = (slice(0, region[0]), slice(0, region[1]))

    stats: Dict[str, Any] = {}
    for name in CHROMA_PLANES:
        c_raw = raw.chroma(name).samples
        c_deg = deg.chroma(name).samples
        enc = encode_plane(
            model, deg.y.samples, c_deg, c_raw, cfg.online,
            prec=cfg.prec, online_enabled=cfg.online_enabled, region=region,
        )
        path = write_stream(f"{args.out}.{name}.alrs", enc.stream)
        stats[name] = {
            "stream": str(path),
            "side_bits": stream_size_bits(enc.stream),
            "nonzero_symbols": enc.symbols.nonzero,
            "guard_fallback": enc.guard_fallback,
            "initial_loss": enc.initial_loss,
            "final_loss": enc.final_loss,
            "degraded_psnr": psnr(c_deg[crop], c_raw[crop]),
            "enhanced_psnr": psnr(enc.enhanced[crop], c_raw[crop]),
        }
    log_event("cli", "encode done", side_bits=sum(s["side_bits"] for s in stats.values()))
    _emit({"prec": cfg.prec, "steps": cfg.online.steps, "planes": stats})
    return 0


def cmd_enhance(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model = _model(args.checkpoint, cfg)
    deg_in = _yuv(args.degraded, args.width, args.height)
    deg = _padded_frame(deg_in)
    ch, cw = deg_in.u.shape
    streams = {"u": args.stream_u, "v": args.stream_v}

    planes: Dict[str, Plane] = {}
    sources: Dict[str, str] = {}
    for name in CHROMA_PLANES:
        c_deg = deg.chroma(name).samples
        if streams[name]:
            out = decode_plane(model, read_stream(streams[name]), deg.y.samples, c_deg)
            sources[name] = "stream"
        else:
            with no_grad():
                out = enhance_plane(model, deg.y.samples, c_deg)
            sources[name] = "baseline"
        planes[name] = Plane(np.ascontiguousarray(out[:ch, :cw]))
    path = save_image(args.out, deg_in.replace(**planes))
    log_event("cli", "enhance done", out=str(path))
    _emit({"out": str(path), "planes": sources})
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model = _model(args.checkpoint, cfg)
    rgb = load_rgb(args.image)
    reports: List[Dict[str, Any]] = []
    for qp in cfg.qps:
        report = simulate_roundtrip(rgb, qp, model, cfg.online, prec=cfg.prec, online_enabled=cfg.online_enabled)
        reports.append(report.as_dict())
    log_event("cli", "simulate done", image=args.image, runs=len(reports))
    _emit({"image": args.image, "runs": reports})
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    overrides: Dict[str, Any] = {"report": args.out, "checkpoint": args.checkpoint}
    if args.image:
        overrides["images"] = list(args.image)
    cfg = _load_config(args, **overrides)
    path = run_experiment(cfg)
    _, summary = read_report(path)
    _emit({"report": str(path), "summary": summary})
    return 0


def _report_checks(tag: str, results: Sequence[CheckResult]) -> int:
    for r in results:
        sys.stdout.write(r.line() + "\n")
    failed = [r.name for r in results if not r.ok]
    log_event(tag, "checks done", total=len(results), failed=len(failed))
    return 1 if failed else 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    return _report_checks("gradcheck", gradcheck_suite(seed=args.seed or 0))


def cmd_dctcheck(args: argparse.Namespace) -> int:
    return _report_checks("dctcheck", dctcheck_suite(seed=args.seed or 0))


# --- Parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help="key = value config file")
    shared.add_argument("--qp", type=int, default=None, help="Quantization parameter (0..51)")
    shared.add_argument("--steps", type=int, default=None, help="Online Adam steps (0 disables fine-tuning)")
    shared.add_argument("--lr", type=float, default=None, help="Learning rate")
    shared.add_argument("--prec", type=int, default=None, help="AL residual precision bits (q = 2^-prec)")
    shared.add_argument("--seed", type=int, default=None, help="Random seed")

    ap = argparse.ArgumentParser(prog="oldn", description="Online-learning dual-domain chroma enhancement")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[shared], help="Offline-train a baseline checkpoint from a manifest")
    p.add_argument("--manifest", required=True, help="Lines of 'PATH_OR_synthetic:SEED:WxH [QP]'")
    p.add_argument("--out", default=str(CHECKPOINT_PATH))
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patches", type=int, default=None, help="Patch pairs per image and chroma plane")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--holdout", type=float, default=None, help="Held-out fraction for validation")
    p.add_argument("--n", type=int, default=None, help="Feature channels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", parents=[shared], help="Online-train AL weights and write residual streams")
    p.add_argument("--checkpoint", default=str(CHECKPOINT_PATH))
    p.add_argument("--raw", required=True)
    p.add_argument("--degraded", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True, help="Output prefix; writes PREFIX.u.alrs and PREFIX.v.alrs")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("enhance", parents=[shared], help="Decoder path: apply residual streams and enhance chroma")
    p.add_argument("--checkpoint", default=str(CHECKPOINT_PATH))
    p.add_argument("--degraded", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--stream-u", default=None)
    p.add_argument("--stream-v", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("simulate", parents=[shared], help="Full encoder/decoder round trip on one image")
    p.add_argument("--image", required=True, help="Image path or synthetic:SEED:WxH")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[shared], help="Run the experiment and write the report")
    p.add_argument("--out", default=None, help="Report path")
    p.add_argument("--image", action="append", default=None, help="Add an image (repeatable)")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[shared], help="Finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dctcheck", parents=[shared], help="DCT transform property suite")
    p.set_defaults(func=cmd_dctcheck)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except OldnError as e:
        log_event("cli", "error", code=e.code, detail=e.detail)
        return 2


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
