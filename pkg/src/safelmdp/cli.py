"""Command line entry point: ``run``, ``compare`` and ``validate``.

Exit codes: 0 success, 2 configuration error, 3 invariant failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .env import InvalidModelError, load_spec, validate_spec
from .harness import ConfigError, RunConfig, compare, frozen_lake_report, run

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _parse_seeds(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc


def _parser():
    p = argparse.ArgumentParser(prog="safelmdp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--agent")
    r.add_argument("--seeds")
    r.add_argument("--out")
    r.add_argument("--K", type=int)

    c = sub.add_parser("compare", help="run several configurations on the same environments")
    c.add_argument("--configs", required=True, help="comma-separated config paths")
    c.add_argument("--seeds")
    c.add_argument("--out")
    c.add_argument("--K", type=int)

    v = sub.add_parser("validate", help="check a serialized model against its invariants")
    v.add_argument("--spec", required=True)
    return p


def _load(path, args):
    overrides = {"K": getattr(args, "K", None)}
    if getattr(args, "agent", None):
        overrides["agent"] = args.agent
    if args.seeds:
        overrides["seeds"] = _parse_seeds(args.seeds)
    return RunConfig.load(path, **overrides)


def _summary(res):
    t = res.table
    out = {
        "agent": res.config.name,
        "runs": len(t.run_ids),
        "final_mean_reward_ma100": float(t.mean("episode_reward_ma100")[-1]),
        "total_violations": int(t["cumulative_violations"][:, -1].sum()),
        "final_mean_regret": float(t.mean("cumulative_regret")[-1]),
        "wall_clock_seconds": res.manifest["wall_clock_seconds"],
    }
    if res.config.experiment == "gridworld":
        rep = frozen_lake_report(res.records)
        out["success_rate"] = [round(float(x), 3) for x in rep["success_rate"]]
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            try:
                spec = load_spec(args.spec)
            except (OSError, KeyError, ValueError) as exc:
                print(f"error: cannot load spec: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            problems = validate_spec(spec)
            for msg in problems:
                print(msg)
            print("ok" if not problems else f"{len(problems)} invariant failure(s)")
            return EXIT_INVARIANT if problems else EXIT_OK

        if args.command == "run":
            config = _load(args.config, args)
            if args.out:
                config.output_dir = args.out
            res = run(config)
            print(json.dumps(_summary(res), indent=2))
            for f in res.manifest["invariant_failures"]:
                print(f"invariant failure: {f}", file=sys.stderr)
            return EXIT_INVARIANT if res.manifest["invariant_failures"] else EXIT_OK

        configs = []
        for i, path in enumerate(p for p in args.configs.split(",") if p):
            cfg = _load(path, args)
            if args.out:
                cfg.output_dir = str(Path(args.out) / f"{i}_{cfg.name}")
            configs.append(cfg)
        rows = compare(configs, write_dir=args.out)
        last = {}
        for row in rows:
            last[row["agent"]] = row
        for name, row in last.items():
            print(f"{name}: reward {row['mean_reward']:.4f} +- {row['std_reward']:.4f}, "
                  f"cumulative violations {row['mean_cum_violations']:.1f}")
        return EXIT_OK
    except (ConfigError, InvalidModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
