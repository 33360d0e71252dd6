"""Command-line entry points: train, eval, gradcheck, bench, routes-dump.

Exit codes: 0 success, 2 configuration error, 3 numerical abort,
4 check-suite failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import config as cfg_mod
from . import gradcheck as gc
from . import pipeline as pl
from . import routes as rt
from .errors import ConfigurationError, ContractError, NumericsError

OUT_DIR_ENV = "STMAMBA_OUT_DIR"

ABLATION_PRESETS = {
    "backbone-only": {"gsm_blocks": 0, "lrm_blocks": 0},
    "gsm-only": {"lrm_blocks": 0},
    "full": {},
}


def _resolve_run_config(args, extra_flags):
    file_dict = cfg_mod.load_config_file(args.config) if args.config else None
    overrides = [cfg_mod.parse_override_flag(f) for f in extra_flags]
    if getattr(args, "epochs", None) is not None:
        overrides.append(("train", "epochs", str(args.epochs)))
    if getattr(args, "seed", None) is not None:
        overrides.append(("train", "seed", str(args.seed)))
        overrides.append(("data", "seed", str(args.seed)))
        overrides.append(("model", "seed", str(args.seed)))
    if getattr(args, "ablation", None):
        for key, value in ABLATION_PRESETS[args.ablation].items():
            overrides.append(("model", key, str(value)))
    cfg = cfg_mod.resolve_config(file_dict, overrides)
    return cfg


def _out_dir(args, cfg) -> str:
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return env
    if getattr(args, "out", None):
        return args.out
    if cfg.run.out_dir:
        return cfg.run.out_dir
    return "runs/default"


def cmd_train(args, extra_flags) -> int:
    cfg = _resolve_run_config(args, extra_flags)
    out_dir = _out_dir(args, cfg)
    os.makedirs(out_dir, exist_ok=True)
    cfg_mod.write_snapshot(os.path.join(out_dir, "config.resolved.toml"), cfg)
    result = pl.train(cfg.model, cfg.data, cfg.train, out_dir=out_dir,
                      resume=args.resume, log_fn=print)
    print(f"done: epochs={result.epochs_run} loss={result.final_loss:.6f} "
          f"pck={result.final_pck:.4f} wall={result.wall_seconds:.1f}s")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args, extra_flags) -> int:
    if extra_flags:
        raise ConfigurationError(f"unknown flags for eval: {extra_flags}")
    model, header = pl.model_from_checkpoint(args.checkpoint)
    mc = model.cfg
    data_cfg = pl.DataConfig(
        n_clips=args.n_clips, keypoints=mc.keypoints, grid=mc.grid,
        span=(mc.frames - 1) // 2, occlusion=not args.no_occlusion,
        in_channels=mc.in_channels, seed=args.dataset_seed)
    dataset = data_cfg.build()
    mean, per_kp, heatmaps = pl.evaluate_model(model, dataset, tau=args.tau)
    print(f"checkpoint epoch {header['epoch']}, {len(dataset)} clips, tau={args.tau}")
    for k, v in enumerate(per_kp):
        print(f"  keypoint {k}: PCK {v:.4f}")
    print(f"mean PCK: {mean:.4f}")
    if args.dump_heatmaps:
        from PIL import Image
        os.makedirs(args.dump_heatmaps, exist_ok=True)
        for i, hm in enumerate(heatmaps):
            for k in range(hm.shape[0]):
                m = hm[k]
                lo, hi = float(m.min()), float(m.max())
                img = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
                Image.fromarray((img * 255).astype(np.uint8), mode="L").save(
                    os.path.join(args.dump_heatmaps, f"sample{i:03d}_k{k}.png"))
        print(f"heatmaps written to {args.dump_heatmaps}")
    return 0


def cmd_gradcheck(args, extra_flags) -> int:
    if extra_flags:
        raise ConfigurationError(f"unknown flags for gradcheck: {extra_flags}")
    scopes = ["op", "block", "model"] if args.scope == "all" else [args.scope]
    failures = 0
    for scope in scopes:
        for r in gc.run_suite(scope, seed=args.seed):
            status = "PASS" if r.ok else "FAIL"
            print(f"[{status}] {r.scope:5s} {r.name:34s} "
                  f"max_rel_err={r.max_rel_err:.3e} tol={r.tol:g}")
            failures += 0 if r.ok else 1
    if failures:
        print(f"{failures} gradient check(s) failed")
        return 4
    print("all gradient checks passed")
    return 0


def cmd_bench(args, extra_flags) -> int:
    if extra_flags:
        raise ConfigurationError(f"unknown flags for bench: {extra_flags}")
    tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
    rows, scan_exp, attn_exp = bench_mod.run_bench(
        tokens, d_model=args.dim, n_state=args.state, reps=args.reps,
        mem_cap_mb=args.mem_cap_mb, seed=args.seed)
    lines = ["L,scan_ms,attn_ms"] + [r.csv() for r in rows]
    csv_text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w") as fp:
            fp.write(csv_text)
        print(f"wrote {args.csv}")
    print(csv_text, end="")
    print(f"scan growth exponent: {scan_exp:.3f}")
    print(f"attention growth exponent: {attn_exp:.3f}")
    return 0


def cmd_routes_dump(args, extra_flags) -> int:
    if extra_flags:
        raise ConfigurationError(f"unknown flags for routes-dump: {extra_flags}")
    t, h, w = (int(v) for v in args.grid.split(","))
    os.makedirs(args.out, exist_ok=True)
    for k, route_id in enumerate(rt.ROUTE_IDS, start=1):
        layout = rt.build_route_layout((t, h, w), route_id, args.stack, args.td_order)
        path = os.path.join(args.out, f"route_k{k}_{route_id}.csv")
        with open(path, "w") as fp:
            fp.write("token_index,t,y,x\n")
            for row in layout.csv_rows():
                fp.write(",".join(str(v) for v in row) + "\n")
    print(f"wrote 6 route CSVs for grid ({t},{h},{w}) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stmamba",
        description="Spatiotemporal selective-scan toy pose pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train on the synthetic dataset")
    tr.add_argument("--config", help="TOML config file")
    tr.add_argument("--epochs", type=int, help="override train.epochs")
    tr.add_argument("--seed", type=int, help="override model/data/train seeds")
    tr.add_argument("--out", help="output directory")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--ablation", choices=sorted(ABLATION_PRESETS),
                    help="component ablation preset")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset-seed", type=int, default=1)
    ev.add_argument("--n-clips", type=int, default=16)
    ev.add_argument("--tau", type=float, default=0.2)
    ev.add_argument("--no-occlusion", action="store_true")
    ev.add_argument("--dump-heatmaps", metavar="DIR")

    gcp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gcp.add_argument("--scope", choices=["op", "block", "model", "all"], default="all")
    gcp.add_argument("--seed", type=int, default=0)

    bn = sub.add_parser("bench", help="scan vs attention scaling benchmark")
    bn.add_argument("--tokens", default="1024,2048,4096,8192,15360,16384")
    bn.add_argument("--dim", type=int, default=32)
    bn.add_argument("--state", type=int, default=16)
    bn.add_argument("--reps", type=int, default=5)
    bn.add_argument("--mem-cap-mb", type=int, default=1024)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--csv", help="write the table to this CSV path")

    rd = sub.add_parser("routes-dump", help="dump scan-route layouts as CSV")
    rd.add_argument("--grid", required=True, help="T,H,W")
    rd.add_argument("--out", required=True)
    rd.add_argument("--stack", choices=["vertical", "horizontal"], default="vertical")
    rd.add_argument("--td-order", choices=["yx", "xy"], default="yx")

    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "routes-dump": cmd_routes_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra)
    except (ConfigurationError, ContractError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
