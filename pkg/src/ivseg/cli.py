"""Command-line entry points: data generation, training, evaluation,
terminal-driven interactive refinement, and the session server.

Errors print a single machine-parsable line to stderr (``error: <kind>:
<detail>``) and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("shape must be DxHxW, e.g. 32x32x16")
    d, h, w = (int(p) for p in parts)
    return (d, h, w)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivseg",
        description="Interactive volumetric segmentation refinement engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get("IVSEG_OUT_DIR", "runs")

    p = sub.add_parser("gen-data", help="generate synthetic labeled volumes")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--eval-count", type=int, default=0,
                   help="additional held-out samples written with a separate manifest")
    p.add_argument("--shape", type=_parse_shape, default=(32, 32, 16), metavar="DxHxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=default_out)

    p = sub.add_parser("train", help="train segmentation and confidence networks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest")
    p.add_argument("--out-dir", default=default_out)
    p.add_argument("--config", help="JSON config file (print-config emits the schema)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--labeled-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--advantage-mode", choices=["per_voxel", "mean_reward"])
    p.add_argument("--workers", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=default_out)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("interact", help="terminal-driven refinement session")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True, help="volume file pair (.json/.raw)")
    p.add_argument("--label", help="optional ground-truth mask for live metrics")
    p.add_argument("--steps", type=int, default=0, help="stop after N steps (0 = until quit)")

    p = sub.add_parser("serve", help="run the HTTP session server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8642)
    p.add_argument("--static-dir", help="directory with the built UI bundle")

    sub.add_parser("print-config", help="dump the full default train config as JSON")
    return parser


def cmd_gen_data(args) -> int:
    from .synth import write_dataset

    out = Path(args.out_dir)
    manifest = write_dataset(out, args.count, args.shape, args.seed)
    print(manifest)
    if args.eval_count > 0:
        eval_manifest = write_dataset(out, args.eval_count, args.shape, args.seed,
                                      manifest_name="eval_manifest.json",
                                      start_index=args.count)
        print(eval_manifest)
    return 0


def _load_config(args) -> "TrainConfig":
    from .trainer import TrainConfig

    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = TrainConfig()
    overrides = {
        "epochs": args.epochs,
        "labeled_fraction": args.labeled_fraction,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "checkpoint_every": args.checkpoint_every,
        "advantage_mode": args.advantage_mode,
        "workers": args.workers,
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    if fields:
        d = cfg.to_dict()
        d.update(fields)
        cfg = TrainConfig.from_dict(d)
    return cfg


def cmd_train(args) -> int:
    from .synth import load_manifest
    from .trainer import train

    cfg = _load_config(args)
    eval_samples = load_manifest(args.eval_manifest) if args.eval_manifest else None
    result = train(args.manifest, cfg, args.out_dir, eval_samples=eval_samples,
                   resume=args.resume)
    print(result.checkpoint)
    return 0


def cmd_eval(args) -> int:
    from .synth import load_manifest
    from .trainer import evaluate, load_training_checkpoint

    seg_params, conf_params, _, _, cfg, _ = load_training_checkpoint(args.ckpt)
    samples = load_manifest(args.manifest)
    out = Path(args.out_dir)
    _, rows = evaluate(seg_params, cfg.seg_spec(), conf_params, cfg.conf_spec(),
                       samples, cfg, args.seed, out_dir=out, workers=args.workers)
    for row in rows:
        print(json.dumps(row))
    return 0


def cmd_print_config(_args) -> int:
    from .trainer import TrainConfig

    print(json.dumps(TrainConfig().to_dict(), indent=2))
    return 0


def cmd_interact(args) -> int:
    from .session import InteractiveSession

    session = InteractiveSession.open(args.ckpt, args.volume, args.label)
    print(f"volume {session.shape}; probability initialized to 0.5")
    print("commands: z,y,x to queue a hint; empty line to step; q to quit")
    steps_done = 0
    while args.steps <= 0 or steps_done < args.steps:
        _print_suggestions(session.suggestions)
        try:
            line = input("> ").strip()
        except EOFError:
            break
        if line == "q":
            break
        if line:
            try:
                z, y, x = (int(v) for v in line.replace(" ", "").split(","))
                session.add_hints([(z, y, x)])
                print(f"queued hint ({z},{y},{x}); {len(session.pending_hints)} pending")
            except (ValueError, IndexError) as e:
                print(f"bad input: {e}")
            continue
        report = session.step()
        steps_done += 1
        dice = f"{report.dice:.4f}" if report.dice is not None else "n/a"
        assd = f"{report.assd:.3f}" if report.assd is not None else "n/a"
        print(f"step {report.step}: dice={dice} assd={assd}")
    return 0


def _print_suggestions(suggestions) -> None:
    if not suggestions:
        return
    print("suggested regions (lowest action confidence first):")
    for item in suggestions:
        z0, y0, x0, z1, y1, x1 = item["bbox"]
        print(f"  region {item['label']}: mean_conf={item['mean_conf']:.3f} "
              f"voxels={item['voxel_count']} bbox=[{z0}:{z1},{y0}:{y1},{x0}:{x1}]")


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    app = create_app(static_dir=args.static_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "interact": cmd_interact,
    "serve": cmd_serve,
    "print-config": cmd_print_config,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: invalid-input: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
