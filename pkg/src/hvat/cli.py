"""Command-line entry point: train, eval, gradcheck, count, trace.

Exit codes: 0 ok, 2 configuration/input, 3 divergence, 4 checkpoint, 5 gradcheck.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import BlockVariant, ConfigError, IOConfig, RunConfig, TrainConfig
from .model import BOS_ID, InputError, build, greedy_decode
from .training import DivergenceError, MetricsRow, evaluate, generate_task, task_data, train
from .verify import THRESHOLD, Dims, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5
SEED_ENV = "HVAT_SEED"

def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRow.HEADER)
    w.writerows(r.as_csv_fields() for r in rows)
    return buf.getvalue()


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def resolve_run_config(path, out: str | None = None, seed_override: int | None = None) -> RunConfig:
    """Config file, then HVAT_SEED, then command-line flags (last wins)."""
    raw = _read_json(path)
    cfg = RunConfig.from_dict(raw)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = cfg.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {env!r}") from None
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override)
    if out is not None:
        explicit = raw.get("io", {}).get("checkpoint_path") if isinstance(raw.get("io"), dict) else None
        cfg = RunConfig(cfg.model, cfg.train, IOConfig(out_dir=out, checkpoint_path=explicit))
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_run_config(args.config, args.out, args.seed_override)
    out = Path(cfg.io.out_dir)
    write_atomic(out / "effective-config.json", cfg.to_json())
    model = build(cfg.model)
    data = task_data(cfg.train, cfg.model.vocab_size)
    rows: list[MetricsRow] = []
    try:
        train(model, cfg.train, data, on_row=rows.append)
    except DivergenceError as exc:
        write_atomic(out / "metrics.csv", metrics_csv(rows))
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    write_atomic(out / "metrics.csv", metrics_csv(rows))
    save_checkpoint(model, cfg.io.checkpoint_path)
    last = rows[-1]
    print(f"epoch={last.epoch} step={last.step} val_loss={last.loss!r} token_accuracy={last.token_accuracy!r} ppl={last.ppl!r}")
    print(f"wrote {out / 'metrics.csv'} and {cfg.io.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg_path = args.config
    if cfg_path is None:
        sibling = Path(args.checkpoint).parent / "effective-config.json"
        cfg_path = sibling if sibling.exists() else None
    tc = RunConfig.from_dict(_read_json(cfg_path)).train if cfg_path is not None else TrainConfig()
    if tc.vocab_size not in (None, model.config.vocab_size):
        raise ConfigError(f"train.vocab_size {tc.vocab_size} does not match the checkpoint's {model.config.vocab_size}")
    task = args.task or tc.task
    seed = tc.val_seed if args.seed is None else args.seed
    count = tc.val_count if args.count is None else args.count
    if count < 1:
        raise ConfigError("count must be >= 1")
    tc = tc.replace(task=task, vocab_size=model.config.vocab_size)
    pairs = generate_task(task, seed, count, (tc.seq_len_min, tc.seq_len_max), model.config.vocab_size)
    row = evaluate(model, pairs, tc)
    print(f"loss={row.loss!r} token_accuracy={row.token_accuracy!r} ppl={row.ppl!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = Dims.parse(args.dims) if args.dims else Dims()
    variants = tuple(BlockVariant) if args.variant == "all" else (BlockVariant.parse(args.variant),)
    results = run_suite(variants, dims, args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r for r in results if not r.ok]
    if bad:
        names = ", ".join(r.name for r in bad)
        print(f"error: relative error >= {THRESHOLD:g} in: {names}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks below {THRESHOLD:g}")
    return EXIT_OK


def cmd_count(args) -> int:
    if args.checkpoint:
        model_or_cfg = load_checkpoint(args.checkpoint)
        mcfg = model_or_cfg.config
    else:
        raw = _read_json(args.config)
        mcfg = RunConfig.from_dict(raw).model if "model" in raw else RunConfig.from_dict({"model": raw}).model
        model_or_cfg = mcfg
    report = analysis.count_params(model_or_cfg)
    flops = [analysis.estimate_flops(mcfg, n) for n in args.n]
    text = "\n\n".join([report.text(), *(f.text() for f in flops)]) + "\n"
    table = analysis.report_csv(report, flops)
    if args.csv:
        write_atomic(args.csv, table)
    sys.stdout.write(table if args.format == "csv" else text)
    return EXIT_OK


def _ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"expected comma-separated token ids, got {text!r}") from None


def cmd_trace(args) -> int:
    model = load_checkpoint(args.checkpoint)
    src = _ids(args.src)
    if args.tgt is not None:
        tgt = _ids(args.tgt)
    else:
        # decoder input = BOS + greedy output
        tgt = [BOS_ID, *greedy_decode(model, src, model.config.max_len - 1)]
    what = tuple(args.what.split(",")) if args.what else None
    records = analysis.trace_attention(model, src, tgt, what)
    table = analysis.trace_csv(records)
    if args.out:
        write_atomic(args.out, table)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvat", description="Transformer with head-weighting and channel-gating attention blocks")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides io.out_dir)")
    t.add_argument("--seed-override", type=int, help=f"seed for model and data (beats ${SEED_ENV})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on freshly generated task data")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="run config for data settings (default: effective-config.json next to the checkpoint)")
    e.add_argument("--task", choices=("copy", "reverse", "sort"))
    e.add_argument("--seed", type=int, help="data seed (default: the config's val_seed)")
    e.add_argument("--count", type=int, help="number of pairs (default: the config's val_count)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and whole blocks")
    g.add_argument("--variant", default="all", choices=("all", *(v.value for v in BlockVariant)))
    g.add_argument("--dims", help="e.g. N=3,D=8,M=2,Da=2 (N<=8, D<=16)")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("count", help="parameter and FLOP report")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="run config (or bare model config) JSON")
    src.add_argument("--checkpoint")
    c.add_argument("--n", type=int, nargs="+", default=[16], help="sequence lengths for the FLOP estimate")
    c.add_argument("--format", choices=("text", "csv"), default="text")
    c.add_argument("--csv", help="also write the CSV report to this path")
    c.set_defaults(func=cmd_count)

    r = sub.add_parser("trace", help="dump alpha/beta per attention layer as CSV")
    r.add_argument("checkpoint")
    r.add_argument("--src", required=True, help="comma-separated source ids")
    r.add_argument("--tgt", help="decoder input ids starting with BOS (default: BOS + greedy output)")
    r.add_argument("--what", help="alpha, beta or alpha,beta (default: whatever the variant has)")
    r.add_argument("--out", help="CSV path (default stdout)")
    r.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT if getattr(args, "checkpoint", None) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
