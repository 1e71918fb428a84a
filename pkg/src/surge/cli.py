"""Command-line entry point: ``surge <verb> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, env_paths, load_kv, parse_overrides
from .data import DataError, LogFormat, build_instances, generate_synthetic, k_core_filter, parse_log
from .graph import dump_edges
from .metrics import evaluate, format_report, length_breakdown, write_report
from .train import (
    DivergenceError, ablate, format_table, grid_search, load_checkpoint, load_dataset,
    save_split_dir, score, scored, train,
)

logger = logging.getLogger("surge")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with RunConfig fields")
    group = p.add_argument_group("run config (override the config file)")
    for f in dataclasses.fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")


def _run_config(args) -> RunConfig:
    values = load_kv(args.config) if args.config else {}
    values.update(env_paths())
    raw = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    values.update(parse_overrides(raw))
    try:
        return RunConfig(**values).validate()
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _out(args, cfg: RunConfig | None = None) -> Path:
    target = args.out or (cfg.out_dir if cfg is not None else env_paths().get("out_dir"))
    if not target:
        raise ConfigError("no output directory: pass --out or set SURGE_OUT_DIR")
    out = Path(target)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> None:
    cols = [c.strip() for c in args.columns.split(",")]
    try:
        fmt = LogFormat(
            delimiter="\t" if args.delimiter == "tab" else args.delimiter,
            user_col=cols.index("user"), item_col=cols.index("item"), time_col=cols.index("time"),
            behavior_col=cols.index("behavior") if "behavior" in cols else None,
            has_header=args.header,
        )
    except ValueError:
        raise ConfigError("--columns must name user, item and time") from None
    events, bad = parse_log(args.log, fmt)
    if args.k_core > 1:
        events = k_core_filter(events, args.k_core)
    behaviors = None if args.behaviors == "all" else tuple(args.behaviors.split(","))
    ds = build_instances(events, args.max_len, (args.train_end, args.val_end), args.neg_ratio, args.seed, behaviors)
    save_split_dir(ds, _out(args))
    print(f"events={len(events)} malformed={bad} users={len(ds.user_index)} items={ds.item_vocab_size} "
          f"train={len(ds.train)} validation={len(ds.validation)} test={len(ds.test)}")


def cmd_synth(args) -> None:
    cfg = _run_config(args)
    ds = generate_synthetic(
        cfg.synth_users, cfg.synth_items, cfg.synth_clusters, cfg.synth_seq_len, cfg.synth_noise,
        seed=cfg.seed, neg_ratio=cfg.neg_ratio, train_targets=cfg.synth_train_targets, max_len=cfg.max_len,
    )
    save_split_dir(ds, _out(args, cfg))
    print(f"users={cfg.synth_users} items={cfg.synth_items} train={len(ds.train)} "
          f"validation={len(ds.validation)} test={len(ds.test)} digest={ds.digest()[:16]}")


def dump_debug(model, inst, out: Path, count: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sub = inst.subset(slice(0, count))
    with torch.no_grad():
        res = model(torch.from_numpy(sub.item_seq), torch.from_numpy(sub.target))
    for b in range(len(sub)):
        if res.graph is not None:
            (out / f"{b}.edges.txt").write_text(dump_edges(res.graph, b), encoding="utf-8")
        if res.nodes.coef is not None:
            coef = res.nodes.coef[b] if res.nodes.coef.dim() == 3 else res.nodes.coef[b, 0]
            np.savetxt(out / f"{b}.coef.txt", coef.double().numpy(), fmt="%.6f")
        if res.pooled is not None:
            np.savetxt(out / f"{b}.assign.txt", res.pooled.assign[b].double().numpy(), fmt="%.6f")


def cmd_train(args) -> None:
    cfg = _run_config(args)
    out = _out(args, cfg)
    result = train(cfg, out_dir=out)
    if args.dump_debug:
        dump_debug(result.model, load_dataset(result.config).test, out / "debug", args.dump_debug)
    print(result.report.to_json(), end="")


def cmd_evaluate(args) -> None:
    model, cfg = load_checkpoint(args.checkpoint)
    if args.data:
        cfg = cfg.replace(data_dir=args.data)
    inst = load_dataset(cfg).split(args.split)
    s = scored(inst, score(model, inst, cfg.eval_batch_size))
    metrics = evaluate(s)
    print(format_report(metrics), end="")
    rows = length_breakdown(s.user, s.valid_len, s.score, s.label, args.groups)
    for r in rows:
        g = "n/a" if r["gauc"] is None else f"{r['gauc']:.4f}"
        print(f"length_bucket={r['bucket']} users={r['users']} len=[{r['min_len']}, {r['max_len']}] gauc={g}")
    if args.out:
        out = _out(args)
        write_report(metrics, out / f"{args.split}_metrics.txt", out / f"{args.split}_metrics.json")
        (out / f"{args.split}_length_breakdown.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")


def _parse_grid(specs: list[str]) -> dict[str, list]:
    grids = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid spec {spec!r} must look like key=v1,v2")
        key, values = spec.split("=", 1)
        parsed = [parse_overrides({key: v})[key.replace("-", "_")] for v in values.split(",") if v]
        grids[key.replace("-", "_")] = parsed
    return grids


def cmd_grid(args) -> None:
    cfg = _run_config(args)
    grids = _parse_grid(args.grid) if args.grid else None
    out = _out(args, cfg)
    best, results = grid_search(cfg, grids)
    lines = []
    for run_cfg, rep in results:
        lines.append({"config_hash": rep.config_hash, "l2": run_cfg.l2, "reg_m": run_cfg.reg_m,
                      "reg_a": run_cfg.reg_a, "reg_p": run_cfg.reg_p, "pooled_len": run_cfg.pooled_len,
                      "validation_gauc": rep.validation["gauc"], "test": rep.test})
    (out / "grid.json").write_text(json.dumps({"best": best.to_dict(), "runs": lines}, indent=2) + "\n",
                                   encoding="utf-8")
    print(f"runs={len(results)} best_config_hash={best.hash()}")


def cmd_ablate(args) -> None:
    cfg = _run_config(args)
    out = _out(args, cfg)
    rows = ablate(cfg)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(table, end="")


def cmd_report(args) -> None:
    for path in args.reports:
        try:
            rep = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read report {path}: {e}") from None
        print(f"# {path}")
        print(f"config_hash={rep['config_hash']} best_epoch={rep['best_epoch']} params={rep['param_count']}")
        for split in ("validation", "test"):
            print(format_report({f"{split}.{k}": v for k, v in rep[split].items()}), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prepare", help="ingest an interaction log and write time-based splits")
    p.add_argument("--log", required=True)
    p.add_argument("--out", help="output directory (default: out_dir / SURGE_OUT_DIR)")
    p.add_argument("--delimiter", default=",", help="field delimiter, or 'tab'")
    p.add_argument("--columns", default="user,item,time,behavior")
    p.add_argument("--header", action="store_true")
    p.add_argument("--k-core", type=int, default=10)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--train-end", type=int, required=True)
    p.add_argument("--val-end", type=int, required=True)
    p.add_argument("--neg-ratio", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--behaviors", default="click", help="comma list, or 'all'")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write a synthetic cluster-structured dataset")
    p.add_argument("--out", help="output directory (default: out_dir / SURGE_OUT_DIR)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--out", help="output directory (default: out_dir / SURGE_OUT_DIR)")
    p.add_argument("--dump-debug", type=int, default=0, metavar="N",
                   help="write graph/attention/assignment dumps for N test instances")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="split directory (defaults to the checkpoint's)")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="grid search, best by validation GAUC")
    p.add_argument("--out", help="output directory (default: out_dir / SURGE_OUT_DIR)")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="repeatable; default: config grids")
    _add_config_flags(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("ablate", help="fusion/extraction/evolution ablation table")
    p.add_argument("--out", help="output directory (default: out_dir / SURGE_OUT_DIR)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise report.json files")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except DivergenceError as e:
        logger.error("training diverged: %s", e)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
