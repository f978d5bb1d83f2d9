"""Command-line entry point: gen-data, train, eval, predict, compare, decompose, serve."""
import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from vpgo import __version__
from vpgo.action_hierarchy import decompose_semantic, decompose_to_movements, net_displacement
from vpgo.config import DATA_ROOT, DEVICE, configure_logging, load_run_config, validate_section, with_overrides
from vpgo.errors import ConfigError, VPGOError
from vpgo.schemas import ProtocolConfig, RunManifest, SemanticGrasp

log = logging.getLogger("vpgo.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so run() controls the exit code."""

    def error(self, message: str):
        raise _UsageError(f"{self.prog}: error: {message}")


def _vector(text: str) -> Tuple[float, float, float]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z floats, got {text!r}")
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
    return values


def _labelled_path(text: str) -> Tuple[str, str]:
    label, sep, path = text.partition("=")
    if not sep or not label or not path:
        raise argparse.ArgumentTypeError(f"expected LABEL=PATH, got {text!r}")
    return label, path


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vpgo", description="Action-conditioned stochastic video prediction.")
    parser.add_argument("--registry-url", default=None, help="run registry database URL")
    parser.add_argument("--no-registry", action="store_true", help="do not record the run")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic grasp trajectories")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-traj", type=int, default=16)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--grasp-success-prob", type=float, default=None)
    p.add_argument("--config", default=None, help="YAML file with a scene section")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train or fine-tune a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data-dir", default=DATA_ROOT)
    p.add_argument("--init-checkpoint", default=None, help="donor checkpoint for fine-tuning")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="score a checkpoint with the sampling protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=DATA_ROOT)
    p.add_argument("--config", default=None, help="YAML file with a protocol section")
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report-out", required=True)
    p.add_argument("--stages", action="store_true", help="add per-stage rows")
    p.add_argument("--table-out", default=None, help="flat CSV of the report")
    p.add_argument("--timestep-out", default=None, help="CSV of score vs timestep")

    p = sub.add_parser("predict", help="sample futures of one trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--c", type=int, default=2)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--mode", choices=("prior", "posterior"), default="prior")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("decompose", help="print the action hierarchy of a semantic grasp")
    p.add_argument("--grasp", type=_vector, required=True)
    p.add_argument("--drop", type=_vector, required=True)
    p.add_argument("--top", type=float, required=True)
    p.add_argument("--start", type=_vector, default=None)
    p.add_argument("--max-step", type=float, default=0.05)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("compare", help="score-vs-timestep table across eval reports")
    p.add_argument("--report", type=_labelled_path, action="append", required=True,
                   metavar="LABEL=PATH", help="eval report; repeat for each run")
    p.add_argument("--timestep-out", required=True)

    p = sub.add_parser("serve", help="run the inspection API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


# ----- Run bookkeeping -----

class RunContext:
    """Manifest file plus optional registry record of one invocation."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.run_id: Optional[int] = None
        self._sessions = None
        if not args.no_registry and args.command != "serve":
            from vpgo.database import DATABASE_URL, make_session_factory
            self._sessions = make_session_factory(args.registry_url or DATABASE_URL)

    def start(self, config: Dict[str, Any], seed: Optional[int], out_dir: Optional[Path],
              outputs: Dict[str, str]) -> RunManifest:
        manifest = RunManifest(
            command=self.args.command,
            argv=self.argv,
            config=config,
            seed=seed,
            version=__version__,
            torch_version=torch.__version__,
            outputs=outputs,
            created_at=datetime.now(timezone.utc),
        )
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        if self._sessions is not None:
            from vpgo import crud
            with self._sessions() as db:
                self.run_id = crud.create_run(db, manifest, str(out_dir) if out_dir else None).id
        return manifest

    def record_report(self, report, checkpoint: str) -> None:
        if self._sessions is None or self.run_id is None:
            return
        from vpgo import crud
        with self._sessions() as db:
            crud.add_metric_report(db, self.run_id, report, checkpoint=checkpoint)

    def finish(self, error: Optional[str] = None) -> None:
        if self._sessions is None or self.run_id is None:
            return
        from vpgo import crud
        with self._sessions() as db:
            crud.finish_run(db, self.run_id, error=error)


# ----- Subcommands -----

def cmd_gen_data(args, ctx: RunContext) -> int:
    from vpgo.data import export_trajectory, generate_synthetic

    cfg = load_run_config(args.config)
    cfg = with_overrides(cfg, {"scene.grasp_success_prob": args.grasp_success_prob})
    out_dir = Path(args.out_dir)
    ctx.start({"scene": cfg.scene.model_dump(mode="json"), "n_traj": args.n_traj, "frames": args.frames},
              args.seed, out_dir, {"trajectories": str(out_dir)})
    trajectories = generate_synthetic(args.seed, args.n_traj, args.frames, cfg.scene)
    for i, traj in enumerate(trajectories):
        export_trajectory(traj, out_dir / f"traj_{i:04d}.h5")
    print(f"wrote {len(trajectories)} trajectories to {out_dir}")
    return EXIT_OK


def cmd_train(args, ctx: RunContext) -> int:
    from vpgo.data import load_directory
    from vpgo.model import build_model
    from vpgo.training import fit

    cfg = load_run_config(args.config)
    cfg = with_overrides(cfg, {"train.seed": args.seed, "train.steps": args.steps})
    out_dir = Path(args.out_dir)
    ctx.start(cfg.model_dump(mode="json"), cfg.train.seed, out_dir,
              {"checkpoint": str(out_dir / "final.pt")})

    dataset = load_directory(args.data_dir, frame_size=cfg.model.frame_size)
    model = build_model(cfg.model, seed=cfg.train.seed).to(DEVICE)
    ckpt = fit(model, dataset, cfg.train, out_dir=out_dir,
               init_checkpoint=args.init_checkpoint, resume=args.resume)
    history = ckpt.extra.get("history", [])
    if history:
        print(f"step {ckpt.step}: total={history[-1]['total']:.5f} recon={history[-1]['recon_l1']:.5f}")
    print(f"checkpoint written to {ckpt.path}")
    return EXIT_OK


def cmd_eval(args, ctx: RunContext) -> int:
    from vpgo.checkpoint import load_checkpoint
    from vpgo.data import load_directory
    from vpgo.eval_protocol import evaluate_protocol, write_report, write_table, write_timestep_table

    protocol = load_run_config(args.config).protocol
    overrides = {"n_samples": args.n_samples, "seed": args.seed}
    protocol = validate_section(
        ProtocolConfig, {**protocol.model_dump(), **{k: v for k, v in overrides.items() if v is not None}},
        "protocol",
    )
    report_out = Path(args.report_out)
    outputs = {"report": str(report_out)}
    if args.table_out:
        outputs["table"] = args.table_out
    if args.timestep_out:
        outputs["timesteps"] = args.timestep_out
    ctx.start({"protocol": protocol.model_dump(mode="json"), "checkpoint": args.checkpoint},
              protocol.seed, report_out.parent, outputs)

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build().to(DEVICE)
    testset = load_directory(args.data_dir, frame_size=ckpt.model_config.frame_size)
    report = evaluate_protocol(model, testset, protocol, stages=args.stages)
    write_report(report, report_out)
    if args.table_out:
        write_table(report, args.table_out)
    if args.timestep_out:
        write_timestep_table(report, args.timestep_out)
    ctx.record_report(report, args.checkpoint)
    m = report.metrics
    fvd = "n/a" if report.fvd is None else f"{report.fvd.mean:.3f}"
    print(f"PSNR best {m['psnr'].best.mean:.3f} avg {m['psnr'].average.mean:.3f} | "
          f"SSIM best {m['ssim'].best.mean:.4f} avg {m['ssim'].average.mean:.4f} | "
          f"LPIPS best {m['lpips'].best.mean:.4f} avg {m['lpips'].average.mean:.4f} | "
          f"FVD {fvd}")
    return EXIT_OK


def cmd_predict(args, ctx: RunContext) -> int:
    from vpgo.checkpoint import load_checkpoint
    from vpgo.data import Trajectory, export_trajectory, load_trajectory, sample_window
    from vpgo.model import rollout

    out_dir = Path(args.out_dir)
    ctx.start({"checkpoint": args.checkpoint, "trajectory": args.trajectory, "c": args.c,
               "horizon": args.horizon, "mode": args.mode, "n_samples": args.n_samples},
              args.seed, out_dir, {"samples": str(out_dir)})

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build().to(DEVICE).eval()
    traj = load_trajectory(args.trajectory, frame_size=ckpt.model_config.frame_size)
    window = sample_window(traj, args.c, args.horizon, offset=0)
    n_steps = args.c + args.horizon - 1
    samples = rollout(
        model, window.context, window.actions,
        states=window.states[:n_steps] if model.cfg.use_state and window.states is not None else None,
        mode=args.mode, n_samples=args.n_samples, seed=args.seed,
        targets=window.targets if args.mode == "posterior" else None,
    )
    end = args.c + args.horizon
    context_u8 = traj.frames[:args.c]
    for k, sample in enumerate(samples):
        frames = np.concatenate([context_u8, np.rint(np.clip(sample, 0.0, 1.0) * 255).astype(np.uint8)])
        export_trajectory(Trajectory(
            frames=frames,
            actions=traj.actions[:end - 1],
            states=None if traj.states is None else traj.states[:end],
            stage_labels=None if traj.stage_labels is None else traj.stage_labels[:end],
            meta=traj.meta,
        ), out_dir / f"sample_{k:03d}.h5")
    print(f"wrote {len(samples)} samples to {out_dir}")
    return EXIT_OK


def cmd_decompose(args, ctx: RunContext) -> int:
    grasp = SemanticGrasp(grasp_point=args.grasp, drop_point=args.drop, top_height=args.top)
    ctx.start({"grasp": grasp.model_dump(mode="json"), "max_step": args.max_step, "start": args.start},
              None, None, {})
    elements = decompose_semantic(grasp, start=args.start)
    movements = decompose_to_movements(grasp, args.max_step, start=args.start)
    if args.json:
        print(json.dumps({
            "elements": [e.model_dump(mode="json") for e in elements],
            "movements": [m.model_dump(mode="json") for m in movements],
            "net_displacement": net_displacement(movements).tolist(),
        }, indent=2))
        return EXIT_OK
    for e in elements:
        chunk = [m for m in movements if m.kind == e.kind]
        print(f"{e.kind.value:<16} {_fmt(e.start)} -> {_fmt(e.end)}  gripper={e.gripper_command.value}"
              f"  movements={len(chunk)}")
        for m in chunk:
            print(f"    delta={_fmt(m.delta)} gripper={m.gripper:.1f}")
    return EXIT_OK


def _fmt(v: Sequence[float]) -> str:
    return "(" + ", ".join(f"{x:+.4f}" for x in v) + ")"


def cmd_compare(args, ctx: RunContext) -> int:
    from vpgo.eval_protocol import read_report, write_timestep_table

    labels = [label for label, _ in args.report]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate report labels: {labels}", key="report")
    out = Path(args.timestep_out)
    ctx.start({"reports": dict(args.report)}, None, None, {"timesteps": str(out)})
    reports = {label: read_report(path) for label, path in args.report}
    write_timestep_table(reports, out)
    print(f"compared {len(reports)} reports in {out}")
    return EXIT_OK


def cmd_serve(args, ctx: RunContext) -> int:  # pragma: no cover
    import uvicorn

    uvicorn.run("vpgo.main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunContext], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "decompose": cmd_decompose,
    "compare": cmd_compare,
    "serve": cmd_serve,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse `argv` and dispatch the subcommand.

    Returns:
        0 on success, 2 on usage or configuration errors, 1 on any other
        typed error
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)

    configure_logging(args.log_level)
    ctx = None
    try:
        ctx = RunContext(args, argv)
        code = COMMANDS[args.command](args, ctx)
        ctx.finish()
        return code
    except ConfigError as e:
        log.error("configuration error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        if ctx is not None:
            ctx.finish(error=str(e))
        return EXIT_USAGE
    except (VPGOError, ValidationError, ValueError) as e:
        message = str(e).splitlines()[0]
        log.error("%s failed: %s", args.command, message)
        print(f"error: {message}", file=sys.stderr)
        if ctx is not None:
            ctx.finish(error=message)
        return EXIT_FAILURE
