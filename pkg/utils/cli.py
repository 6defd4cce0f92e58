"""
Command-line entry points: dataset generation, training, evaluation, sidecar
pooling of teacher log-probability dumps, and the credit and gate analyses.

Payload goes to --out (or stdout) as one record per line; logs go to stderr.
Exit codes: 0 success, 2 configuration or input validation error, 3 runtime
error.
"""
import argparse
import contextlib
import dataclasses
import logging
import sys
from pathlib import Path

from utils.analysis import analyze_credit, analyze_gate
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import config_to_text, load_config, with_seed
from utils.data_loader import (IngestStats, PoolError, check_vocabulary, load_dataset,
                               load_pool_records, write_dataset)
from utils.errors import AVSDError, CheckpointError, ConfigError, RejectedInputError
from utils.init import STREAM_EVAL_SAMPLE, STREAM_TASK, setup_logging, spawn_rng
from utils.records import append_record, dumps_record, header_record, read_records
from utils.signal_core import pool_batch
from utils.task_synth import gen_instances
from utils.trainer import eval_avg_at_k, scale_views_experiment, train_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


@contextlib.contextmanager
def _output(path):
    """Yield a text handle on path, or stdout when path is None"""
    if path is None:
        yield sys.stdout
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        yield handle


def _config(args):
    return load_config(args.config, args.seed)


def _model_and_config(args):
    """Checkpoint weights plus the run config: --config if given, else the checkpoint's own"""
    params, ck_cfg, step, _ = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = _config(args)
    else:
        cfg = ck_cfg if args.seed is None else with_seed(ck_cfg, args.seed)
    return params, cfg, step


def _cmd_gen_data(args):
    cfg = _config(args)
    count = cfg.task.count if args.count is None else args.count
    instances = gen_instances(cfg.task, count, stream=STREAM_TASK)
    out = Path(args.out or "data/dataset.jsonl")
    write_dataset(out, instances, cfg.task)
    logger.info("wrote dataset", extra={"path": str(out), "instances": len(instances)})
    print(len(instances))
    return EXIT_OK


def _truncate_metrics(path, last_step):
    """Keep the header and the records up to last_step, dropping a partial tail"""
    kept = [r for r in read_records(path, skip_header=False)
            if r.get("header") is True or r.get("step", 0) <= last_step]
    with path.open("w", encoding="utf-8") as handle:
        for record in kept:
            append_record(handle, record)


def _cmd_train(args):
    cfg = _config(args)
    out_dir = Path(args.out or "runs/latest")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    params = opt_state = None
    start_step = 0
    if args.resume is not None:
        if not Path(args.resume).exists():
            raise CheckpointError(f"cannot resume: no checkpoint at {args.resume}")
        params, ck_cfg, start_step, opt_state = load_checkpoint(args.resume)
        if config_to_text(ck_cfg) != config_to_text(cfg):
            logger.warning("resuming with a config that differs from the checkpoint's",
                           extra={"checkpoint": str(args.resume)})
        if metrics_path.exists():
            _truncate_metrics(metrics_path, start_step)
        logger.info("resuming", extra={"checkpoint": str(args.resume), "step": start_step})

    mode = "a" if start_step and metrics_path.exists() else "w"
    with metrics_path.open(mode, encoding="utf-8") as metrics:
        if mode == "w":
            append_record(metrics, header_record(kind="metrics", method=cfg.method, seed=cfg.seed))

        def on_step(log):
            append_record(metrics, log.to_record(include_timing=args.timing))
            if log.eval_accuracy is not None or log.step % 100 == 0:
                logger.info("step", extra={"step": log.step, "loss": log.mean_loss,
                                           "gate_open_rate": log.gate_open_rate})

        def on_checkpoint(step, weights, state):
            path = save_checkpoint(out_dir / f"checkpoint-{step:06d}.bin", weights, cfg, step, state)
            logger.info("saved checkpoint", extra={"path": str(path), "step": step})

        params, opt_state, logs = train_run(cfg, params=params, opt_state=opt_state,
                                            start_step=start_step, on_step=on_step,
                                            on_checkpoint=on_checkpoint)

    final = save_checkpoint(out_dir / "checkpoint.bin", params, cfg, max(cfg.steps, start_step), opt_state)
    logger.info("training finished", extra={"checkpoint": str(final), "steps": len(logs)})
    return EXIT_OK


def _cmd_eval(args):
    params, cfg, step = _model_and_config(args)
    instances = load_dataset(args.dataset)
    check_vocabulary(instances, params.vocab_size)
    k = cfg.eval_k if args.k is None else args.k
    temperature = cfg.eval_temperature if args.temperature is None else args.temperature
    score = eval_avg_at_k(params, instances, k, temperature,
                          spawn_rng(cfg.seed, STREAM_EVAL_SAMPLE), cfg.max_len)
    with _output(args.out) as out:
        append_record(out, {"checkpoint_step": step, "instances": len(instances), "k": k,
                            "temperature": temperature, "avg_at_k": score})
    return EXIT_OK


def pool_output(entry, epsilon):
    """Output record for one parsed PoolRecord (or its error entry)"""
    if isinstance(entry, PoolError):
        return {"id": entry.id, "position": entry.position, "error": entry.error}
    signal = pool_batch(entry.student_logp, entry.view_logps, entry.weights, epsilon)
    return {
        "id": entry.id,
        "position": entry.position,
        "qstar": signal.qstar.logp,
        "a_hat": signal.a_hat,
        "lambda": signal.lam,
        "residual": signal.residual,
        "a_geo": signal.a_geo,
    }


def _cmd_pool(args):
    cfg = _config(args)
    epsilon = cfg.epsilon if args.epsilon is None else args.epsilon
    stats = IngestStats()
    with _output(args.out) as out:
        for entry in load_pool_records(args.input, stats):
            try:
                line = dumps_record(pool_output(entry, epsilon))
            except (AVSDError, ValueError, FloatingPointError) as e:
                stats.errors += 1
                logger.warning("pooling failed", extra={"id": entry.id, "error": str(e)})
                line = dumps_record({"id": entry.id, "position": entry.position, "error": str(e)})
            out.write(line + "\n")
            out.flush()
    logger.info("pooled records", extra=dataclasses.asdict(stats))
    return EXIT_OK


def _analysis_inputs(args):
    params, cfg, _ = _model_and_config(args)
    instances = load_dataset(args.dataset)
    check_vocabulary(instances, params.vocab_size)
    if args.limit is not None:
        instances = instances[:args.limit]
    return params, cfg, instances


def _cmd_analyze_credit(args):
    params, cfg, instances = _analysis_inputs(args)
    reports, summary = analyze_credit(params, instances, cfg, k=args.k, samples=args.samples)
    with _output(args.out) as out:
        for report in reports:
            append_record(out, report.to_record())
        aggregate = summary.astype(object).where(summary.notna(), None)
        append_record(out, {"aggregate": aggregate.to_dict(orient="records"),
                            "empty": not reports})
    if args.csv:
        summary.to_csv(args.csv, index=False)
    return EXIT_OK


def _cmd_analyze_gate(args):
    params, cfg, instances = _analysis_inputs(args)
    summary, histogram = analyze_gate(params, instances, cfg, tau=args.tau, samples=args.samples)
    with _output(args.out) as out:
        append_record(out, {**summary, "histogram": histogram.to_dict(orient="records")})
    if args.csv:
        histogram.to_csv(args.csv, index=False)
    return EXIT_OK


def _cmd_scale_views(args):
    cfg = _config(args)
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    table = scale_views_experiment(cfg, counts)
    if args.out is None:
        table.to_csv(sys.stdout, index=False)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key=value config file")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides AVSD_SEED)")
    common.add_argument("--out", type=Path, default=None, help="output path")
    common.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    common.add_argument("--timing", action="store_true", help="include wall time in metrics")
    common.add_argument("--log-file", type=Path, default=None, help="also write logs here")

    parser = argparse.ArgumentParser(description="Multi-view self-distillation bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", parents=[common], help="Generate a task dataset")
    p_gen.add_argument("--count", type=int, default=None)
    p_gen.set_defaults(func=_cmd_gen_data)

    p_train = sub.add_parser("train", parents=[common], help="Train and stream metrics")
    p_train.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="Avg@k of a checkpoint")
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--dataset", type=Path, required=True)
    p_eval.add_argument("--k", type=int, default=None)
    p_eval.add_argument("--temperature", type=float, default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_pool = sub.add_parser("pool", parents=[common], help="Pool teacher log-probability dumps")
    p_pool.add_argument("--input", type=Path, required=True)
    p_pool.add_argument("--epsilon", type=float, default=None)
    p_pool.set_defaults(func=_cmd_pool)

    for name, func, helptext in (("analyze-credit", _cmd_analyze_credit, "Credit sign on incorrect rollouts"),
                                 ("analyze-gate", _cmd_analyze_gate, "Gate-open rate and lambda histogram")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--dataset", type=Path, required=True)
        p.add_argument("--samples", type=int, default=1, help="rollouts per instance")
        p.add_argument("--limit", type=int, default=None, help="use the first N instances")
        p.add_argument("--csv", type=Path, default=None, help="also write the table as CSV")
        p.set_defaults(func=func)
    sub.choices["analyze-credit"].add_argument("--k", type=int, default=20)
    sub.choices["analyze-gate"].add_argument("--tau", type=float, default=None)

    p_scale = sub.add_parser("scale-views", parents=[common], help="Train once per view count")
    p_scale.add_argument("--counts", default="1,2,3,4")
    p_scale.set_defaults(func=_cmd_scale_views)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("WARNING" if args.quiet else "INFO", args.log_file)
    try:
        return int(args.func(args))
    except (ConfigError, RejectedInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (AVSDError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
