"""Command-line entry point: ``fedkge {partition,run,compare,ratio,fedepl-dim,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines.fede import fedepl_dimension
from .config import load_config
from .experiment import compare_runs, format_comparison, run_experiment, write_run
from .kg import load_triples, partition_by_relation, save_federation, split_federation, write_triples
from .ledger import theoretical_ratio
from .synthetic import SyntheticConfig, generate


def _cmd_partition(args):
    store = load_triples(args.triples)
    spec = split_federation(partition_by_relation(store, args.clients, args.seed), args.seed)
    save_federation(spec, args.out)
    for shard in spec.clients:
        print(f"client {shard.client_id}: {len(shard.train)}/{len(shard.valid)}/{len(shard.test)} triples, "
              f"{shard.num_entities} entities, {shard.num_shared} shared")
    return 0


def _cmd_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.strategy}-{cfg.kge_method}-seed{cfg.seed}"
    result = run_experiment(cfg)
    write_run(result, out)
    s = result.summary
    print(f"{cfg.strategy}: MRR@CG {s['MRR@CG']:.4f}  Hits@10@CG {s['Hits@10@CG']:.4f}  R@CG {s['R@CG']}  -> {out}")
    return 0


def _cmd_compare(args):
    report = compare_runs(args.run, args.baseline)
    if args.json:
        print(json.dumps({k: v for k, v in report.items() if k != "table"}, indent=2))
    else:
        print(format_comparison(report))
    return 0


def _cmd_ratio(args):
    print(f"{theoretical_ratio(args.p, args.s, args.D):.4f}")
    return 0


def _cmd_fedepl_dim(args):
    print(fedepl_dimension(args.p, args.s, args.D))
    return 0


def _cmd_synth(args):
    cfg = SyntheticConfig(entities=args.entities, relations=args.relations, triples=args.triples, seed=args.seed)
    store = generate(cfg)
    write_triples(args.out, store.triples)
    print(f"{len(store.triples)} triples, {len(store.entities)} entities, {len(store.relations)} relations -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedkge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split a TSV triple file into a federation directory")
    p.add_argument("triples")
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="run directory (default runs/<strategy>-<method>-seed<seed>)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="compare a run against a baseline run")
    p.add_argument("run", help="summary.json or run directory")
    p.add_argument("baseline", help="summary.json or run directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ratio", help="per-cycle traffic ratio of sparsified vs full exchange")
    p.add_argument("p", type=float)
    p.add_argument("s", type=int)
    p.add_argument("D", type=int)
    p.set_defaults(func=_cmd_ratio)

    p = sub.add_parser("fedepl-dim", help="embedding dimension matching sparsified per-cycle traffic")
    p.add_argument("p", type=float)
    p.add_argument("s", type=int)
    p.add_argument("D", type=int)
    p.set_defaults(func=_cmd_fedepl_dim)

    p = sub.add_parser("synth", help="write the synthetic toy KG as TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=SyntheticConfig.entities)
    p.add_argument("--relations", type=int, default=SyntheticConfig.relations)
    p.add_argument("--triples", type=int, default=SyntheticConfig.triples)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"fedkge {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
