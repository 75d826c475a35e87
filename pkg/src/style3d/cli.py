"""Command line front end.

Three subcommands: run (one content-style pair end to end), sweep (one
parameter axis over a shared feature bank) and eval (score view sets
against a manifest). Values resolve as flags over config file over
defaults; only flags the user actually passed override the file, which is
why every argparse default here is None.

Exit codes: 0 success, 2 validation or configuration error, 3 backend or
weight loading error, 4 any other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .errors import BackendError, ConfigError, EvalError, Style3DError
from .pipeline import RunConfig, run_pipeline, sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_RUNTIME = 4

_RUN_KEYS = (
    "content",
    "style",
    "lambda_scale",
    "steps",
    "seed",
    "backend",
    "device",
    "out_dir",
    "sign_convention",
    "grid_res",
    "train_steps",
    "weight_source",
)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--content", help="content image path")
    p.add_argument("--style", help="style image path")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--beta-c", type=float, dest="beta_c", help="content query weight")
    p.add_argument("--beta-p", type=float, dest="beta_p", help="preserved query weight")
    p.add_argument(
        "--lambda", type=float, dest="lambda_scale", help="attention scale multiplier"
    )
    p.add_argument("--steps", type=int, help="denoising steps")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--backend", choices=["toy", "pretrained"], help="diffusion backend")
    p.add_argument("--device", help="device selector (default cpu)")
    p.add_argument("--out", dest="out_dir", help="output base directory")
    p.add_argument(
        "--sign-convention",
        dest="sign_convention",
        choices=["positive_inside", "negative_inside"],
    )
    p.add_argument("--grid-res", type=int, dest="grid_res", help="extraction grid nodes per axis")
    p.add_argument(
        "--train-steps",
        type=int,
        dest="train_steps",
        help="optional per-object refinement steps",
    )
    p.add_argument(
        "--weights", dest="weight_source", help="pretrained weight directory (or STYLE3D_CACHE)"
    )


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _resolve_beta(args, file_cfg: dict) -> tuple[float, float]:
    """Flags beat the file; a single component fills in its complement."""
    c, p = args.beta_c, args.beta_p
    if c is None and p is None:
        if "beta" in file_cfg:
            pair = file_cfg["beta"]
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"config beta must be a pair, got {pair!r}")
            return float(pair[0]), float(pair[1])
        c = file_cfg.get("beta_c")
        p = file_cfg.get("beta_p")
        if c is None and p is None:
            return 0.4, 0.6
    if c is not None and p is not None:
        return float(c), float(p)
    # complements are rounded so 1 - 0.7 reads back as 0.3, not 0.30000...04
    if c is not None:
        return float(c), round(1.0 - float(c), 12)
    return round(1.0 - float(p), 12), float(p)


def resolve_run_config(args) -> RunConfig:
    file_cfg = _load_config_file(args.config)
    unknown = set(file_cfg) - set(_RUN_KEYS) - {"beta", "beta_c", "beta_p", "target_layers"}
    if unknown:
        raise ConfigError(f"unknown config file keys: {sorted(unknown)}")
    values = {}
    for key in _RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
        elif key in file_cfg:
            values[key] = file_cfg[key]
    values["beta"] = _resolve_beta(args, file_cfg)
    if "target_layers" in file_cfg:
        values["target_layers"] = tuple(file_cfg["target_layers"])
    if "content" not in values:
        raise ConfigError("a content image is required (--content or config file)")
    if "style" not in values:
        raise ConfigError("a style image is required (--style or config file)")
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc))


def _parse_values(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"could not parse sweep values from {text!r}")
    if not vals:
        raise ConfigError("sweep needs at least one value")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="style3d",
        description="Stylized multi-view generation and mesh reconstruction.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="one content-style pair, end to end")
    _add_run_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="repeat generation across one parameter axis")
    _add_run_flags(sweep_p)
    sweep_p.add_argument(
        "--param", choices=["beta", "lambda"], required=True, help="axis to sweep"
    )
    sweep_p.add_argument(
        "--values", required=True, help="comma-separated values (beta values are beta_c)"
    )

    eval_p = sub.add_parser("eval", help="score rendered view sets against a manifest")
    eval_p.add_argument("--manifest", required=True, help="JSON manifest of cases")
    eval_p.add_argument("--out", dest="out_dir", help="directory for report.json/.csv")
    eval_p.add_argument(
        "--aggregate", choices=["flat", "per_case"], default="flat", help="mean protocol"
    )
    eval_p.add_argument(
        "--clip-weights",
        dest="clip_weights",
        help="local CLIP weights; default is the deterministic stub embedder",
    )
    return parser


def _cmd_run(args) -> int:
    cfg = resolve_run_config(args)
    report = run_pipeline(cfg)
    print(f"run complete: {report.out_dir}")
    print(f"report: {report.report_path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = resolve_run_config(args)
    values = _parse_values(args.values)
    result = sweep(args.param, values, cfg)
    for v, d in zip(result.values, result.out_dirs):
        print(f"{args.param}={v:g}: {d}")
    print(f"contact sheet: {result.contact_sheet}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluation import eval_run, load_clip_embedder

    embedder = load_clip_embedder(args.clip_weights) if args.clip_weights else None
    report = eval_run(
        args.manifest, out_dir=args.out_dir, embedder=embedder, aggregate=args.aggregate
    )
    print(f"text_image mean: {report.mean_text_image:.6f}")
    print(f"image_image mean: {report.mean_image_image:.6f}")
    if args.out_dir:
        print(f"report: {args.out_dir}/report.json")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.cmd == "run":
            return _cmd_run(args)
        if args.cmd == "sweep":
            return _cmd_sweep(args)
        return _cmd_eval(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except EvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Style3DError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001  (CLI boundary: map to exit code)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
