"""Command line entry point: ``mtdqn {train,eval,ablate,baselines,simulate,gradcheck}``.

Exit status is 0 on success, 1 when an input fails validation (bad config,
corrupt checkpoint, unwritable output) and 2 when a check fails (gradient
suite failure or a non-finite training loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from mtdqn.environment import export_events, generate_world, simulate
from mtdqn.errors import MTDQNError, NonFiniteError, ValidationError
from mtdqn.fusion import AttentionTrace, FusionParams, export_attention, fusion_forward_batch
from mtdqn.harness.checkpoint import load_checkpoint, save_checkpoint
from mtdqn.harness.config import ExperimentConfig, config_hash, config_to_dict, load_config
from mtdqn.harness.evaluation import evaluate
from mtdqn.harness.experiments import ablate, run_baselines, run_one
from mtdqn.harness.gradsuite import gradcheck
from mtdqn.harness.model import RecommenderModel
from mtdqn.harness.results import RunResult, emit_results
from mtdqn.harness.training import reward_weights

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class CheckFailure(Exception):
    pass


def _config_text(config: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"


def _manifest(config: ExperimentConfig, command: str) -> dict:
    return {"command": command, "config_hash": config_hash(config), "seed": config.seed, "variant": config.variant}


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _attach_log(out: Path) -> logging.Handler:
    """Mirror the package log into ``out/train.log`` without timestamps, so reruns match byte for byte."""
    handler = logging.FileHandler(out / "train.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("mtdqn")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _detach_log(handler: logging.Handler) -> None:
    logging.getLogger("mtdqn").removeHandler(handler)
    handler.close()


def write_step_losses(path: Path, losses: Sequence[float]) -> None:
    lines = ["update,loss"] + [f"{i + 1},{x!r}" for i, x in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def attention_dump(model: RecommenderModel) -> str | None:
    """Encoder attention averaged over every video, or None when the variant has no encoder."""
    if model.content != "transformer":
        return None
    prefix = "fusion."
    fp = FusionParams(model.config.fusion, {k[len(prefix):]: v for k, v in model.params.items() if k.startswith(prefix)})
    _, trace = fusion_forward_batch(model.raw, fp)
    return export_attention(AttentionTrace(trace.weights.mean(axis=0, keepdims=True)))


def _print_results(results: Sequence[RunResult]) -> None:
    for r in results:
        m = r.metrics
        print(f"{r.variant:<13} seed {r.seed}: return {m.mean_return:.4f} ndcg@5 {m.ndcg5:.4f} "
              f"f1 {m.f1:.4f} hit@3 {m.hit_rate:.4f} ({r.wall_clock:.1f}s)")


# --- subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    config = load_config(args.config, args.preset)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.variant is not None:
        config = config.with_variant(args.variant)
    out = _out_dir(args.out)
    (out / "config.json").write_text(_config_text(config), encoding="utf-8")
    handler = _attach_log(out)
    try:
        run = run_one(config)
    finally:
        _detach_log(handler)
    save_checkpoint(out / "checkpoint.bin", run.checkpoint)
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        export_events(run.outcome.events, fh)
    write_step_losses(out / "step_losses.csv", run.outcome.losses)
    emit_results([run.result], out, _manifest(config, "train"), attention_dump(run.outcome.model))
    _print_results([run.result])
    losses = [x for x in run.result.epoch_losses if x is not None]
    if losses:
        print(f"epoch loss: first {losses[0]:.4f} last {losses[-1]:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    metrics, _ = evaluate(ckpt.config, ckpt.params)
    result = RunResult(ckpt.config.variant, ckpt.config.seed, ckpt.config_hash, metrics)
    emit_results([result], out, _manifest(ckpt.config, "eval"))
    _print_results([result])
    return EXIT_OK


def _grid(args, runner, command: str) -> int:
    config = load_config(args.config, args.preset)
    if args.seeds < 1:
        raise ValidationError("--seeds must be at least 1")
    out = _out_dir(args.out)
    (out / "config.json").write_text(_config_text(config), encoding="utf-8")
    handler = _attach_log(out)
    try:
        results = runner(config, args.seeds)
    finally:
        _detach_log(handler)
    emit_results(results, out, _manifest(config, command))
    _print_results(results)
    return EXIT_OK


def cmd_ablate(args) -> int:
    return _grid(args, ablate, "ablate")


def cmd_baselines(args) -> int:
    return _grid(args, run_baselines, "baselines")


def cmd_simulate(args) -> int:
    config = load_config(args.config, args.preset)
    if args.rounds < 1:
        raise ValidationError("--rounds must be at least 1")
    out = _out_dir(args.out)
    sim = simulate(generate_world(config.world), args.rounds, reward_weights(config))
    with open(out / "events.jsonl", "w", encoding="utf-8") as fh:
        n = export_events(sim.events, fh)
    (out / "config.json").write_text(_config_text(config), encoding="utf-8")
    print(f"{n} events from {len(sim.sessions)} sessions written to {out / 'events.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck(points=args.points, seed=args.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        names = ", ".join(f"{c.name} ({c.worst:.3e})" for c in report.failures)
        raise CheckFailure(f"gradient check failed: {names}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdqn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config file (defaults when omitted)")
        p.add_argument("--preset", choices=("desk", "paper"), help="base preset under the config file")
        return p

    p = with_config(sub.add_parser("train", help="train one variant and evaluate it"))
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out users")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("ablate", cmd_ablate, "component ablation grid"),
                             ("baselines", cmd_baselines, "baseline comparison grid")):
        p = with_config(sub.add_parser(name, help=text))
        p.add_argument("--seeds", type=int, default=1)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("simulate", help="write a logging-policy event log"))
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger("mtdqn").addHandler(handler)
        logging.getLogger("mtdqn").setLevel(logging.INFO)
    try:
        return args.func(args)
    except (CheckFailure, NonFiniteError) as exc:
        print(f"mtdqn: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (MTDQNError, OSError) as exc:
        print(f"mtdqn: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
