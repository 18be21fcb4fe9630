"""Command-line front end.

Subcommands:

  gen-data      write a synthetic pair dataset to .npz
  train         run a schedule from a JSON config; metrics.csv + final.ckpt
  verify-grad   microbatched engine vs whole-batch reference backprop
  scale-batch   accuracy across batch sizes at a fixed examples-seen budget
  mem-report    per-core memory table across parallelism strategies
  bound-report  empirical generalization gap and its closed-form ceiling

Every command is deterministic given its arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import numerics as nm
from .config import TrainConfig
from .data import SyntheticPairSet, as_gap_source, gen_data
from .encoders import EncoderNet
from .errors import TwoTowerError
from .shardsim import STRATEGIES, peak_memory
from .theoryprobe import GapProbeConfig, gap_and_bound
from .training import (build_towers, scale_batch_experiment, train,
                       verify_gradients, write_scale_rows)


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twotower",
        description="Two-tower contrastive training testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz path")

    p = sub.add_parser("train", help="run a training schedule")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--data", default=None,
                   help=".npz dataset; generated from the config if omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--eval-size", type=int, default=256)

    p = sub.add_parser("verify-grad",
                       help="engine vs whole-batch gradient check")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--m-img", type=int, default=4)
    p.add_argument("--m-txt", type=int, default=8)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-10)

    p = sub.add_parser("scale-batch",
                       help="batch-size sweep at fixed examples budget")
    p.add_argument("--config", required=True)
    p.add_argument("--batches", type=_int_list, required=True,
                   help="comma-separated batch sizes")
    p.add_argument("--budget", type=int, required=True,
                   help="examples seen per run; must divide by every batch")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("mem-report", help="memory table across strategies")
    p.add_argument("--strategies", default="all",
                   help=f"comma list from {','.join(STRATEGIES)} or 'all'")
    p.add_argument("--batches", type=_int_list, required=True)
    p.add_argument("--m-img", type=int, default=None)
    p.add_argument("--m-txt", type=int, default=None)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--cores", type=int, default=1)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--with-variance", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path; stdout if omitted")

    p = sub.add_parser("bound-report",
                       help="measured gap vs closed-form generalization bound")
    p.add_argument("--m", type=int, default=1024, help="training-sample size")
    p.add_argument("--batch", type=int, default=32, help="reference-batch size")
    p.add_argument("--m-test", type=int, default=512)
    p.add_argument("--n-eval", type=int, default=512)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--c9-pairs", type=int, default=10_000)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=8)
    p.add_argument("--input-dim", type=int, default=8)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON path; stdout if omitted")
    return parser


def _cmd_gen_data(args) -> int:
    data = gen_data(args.classes, args.size, args.input_dim, args.noise,
                    args.seed)
    data.save(args.out)
    print(f"wrote {args.out}: {data.size} pairs, {data.num_classes} classes, "
          f"input dim {data.input_dim}")
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    if args.data is not None:
        data = SyntheticPairSet.load(args.data)
    else:
        d = cfg.data
        data = gen_data(d.classes, d.size, d.input_dim, d.noise, d.seed)
    result = train(cfg, data, eval_every=args.eval_every,
                   eval_size=args.eval_size, out_dir=args.out_dir)
    print(f"schedule {cfg.train.schedule}: {len(result.metrics)} steps, "
          f"final zero-shot accuracy {result.final_accuracy:.4f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_verify_grad(args) -> int:
    report = verify_gradients(depth=args.depth, width=args.width,
                              embed_dim=args.embed_dim, batch=args.batch,
                              m_img=args.m_img, m_txt=args.m_txt,
                              replicas=args.replicas, seed=args.seed,
                              tolerance=args.tolerance)
    print(f"loss engine={report['loss_engine']!r} "
          f"oracle={report['loss_oracle']!r}")
    for name in sorted(report["errors"]):
        print(f"  {name}: rel_l2={report['errors'][name]:.3e}")
    verdict = "PASS" if report["passed"] else "FAIL"
    print(f"{verdict}: worst rel_l2 {report['worst']:.3e} "
          f"(tolerance {report['tolerance']:.1e})")
    return 0 if report["passed"] else 1


def _cmd_scale_batch(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    rows = scale_batch_experiment(cfg, args.batches, args.budget,
                                  seeds=args.seeds)
    write_scale_rows(args.out, rows)
    for row in rows:
        print(f"batch {row['batch']:>5}  steps {row['steps']:>6}  "
              f"seed {row['seed']}  accuracy {row['accuracy']:.4f}")
    print(f"wrote {args.out}")
    return 0


def _mem_rows(args) -> list[dict]:
    if args.strategies == "all":
        strategies = list(STRATEGIES)
    else:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rng = nm.Rng(args.seed)

    class _Model:
        depth = args.depth
        width = args.width
        embed_dim = args.embed_dim

    f, g = build_towers(_Model, args.input_dim, rng.split("towers"))
    rows = []
    for strategy in strategies:
        for batch in args.batches:
            report = peak_memory(strategy, f, g, batch,
                                 m_img=args.m_img, m_txt=args.m_txt,
                                 replicas=args.replicas, cores=args.cores,
                                 with_variance=args.with_variance,
                                 seed=args.seed)
            rows.append({
                "strategy": report.strategy,
                "batch": report.batch,
                "m_img": report.m_img,
                "m_txt": report.m_txt,
                "replicas": report.replicas,
                "cores": report.cores,
                "static_elems": report.static_elems,
                "dynamic_peak": report.dynamic_peak,
                "analytic_peak": report.analytic_peak,
                "gather_elements": report.gather_elements,
                "peak_elements": report.peak_elements,
            })
    return rows


def _cmd_mem_report(args) -> int:
    rows = _mem_rows(args)
    header = ["strategy", "batch", "m_img", "m_txt", "replicas", "cores",
              "static_elems", "dynamic_peak", "analytic_peak",
              "gather_elements", "peak_elements"]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([row[k] for k in header])
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        print(",".join(header))
        for row in rows:
            print(",".join(str(row[k]) for k in header))
    return 0


def _cmd_bound_report(args) -> int:
    cfg = GapProbeConfig(m=args.m, batch=args.batch, m_test=args.m_test,
                         delta=args.delta, kappa=args.input_dim,
                         n_eval=args.n_eval, c9_pairs=args.c9_pairs)
    data = gen_data(args.classes, max(args.classes, 2), args.input_dim,
                    args.noise, args.seed)
    source = as_gap_source(data)
    rng = nm.Rng(args.seed)
    dims = [args.input_dim] + [args.width] * (args.depth - 1) + [args.embed_dim]
    norms = ["none"] * args.depth
    f = EncoderNet.build(rng.split("nets", "img"), dims, norms=norms, name="img")
    g = EncoderNet.build(rng.split("nets", "txt"), dims, norms=norms, name="txt")
    gap, stderr, report = gap_and_bound(f, g, cfg, source, rng.split("probe"))
    payload = {
        "gap": gap,
        "gap_stderr": stderr,
        "bound": report.to_dict(),
        "holds": bool(gap <= report.rhs),
        "note": ("c9 is a sampled lower estimate of a Lipschitz constant; "
                 "a violated bound within its slack implicates the estimate, "
                 "not the inequality"),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    print(f"gap {gap:.6f} (stderr {stderr:.6f})  rhs {report.rhs:.3e}  "
          f"holds={payload['holds']}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "verify-grad": _cmd_verify_grad,
    "scale-batch": _cmd_scale_batch,
    "mem-report": _cmd_mem_report,
    "bound-report": _cmd_bound_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TwoTowerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
