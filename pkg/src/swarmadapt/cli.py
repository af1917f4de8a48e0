"""Command-line entry point: ``swarmadapt {run,ablate,replay,score}``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, load_config, preset
from .harness import ReplayError, final_quarter_mean, replay, rescore_frames, run_ablation, run_scenario
from .moderator import ENV_API_KEY, ENV_ENDPOINT
from .provenance import StoreError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _scenario(name: str, seed: int | None):
    if name.lower().endswith(".json"):
        cfg = load_config(name)
        return replace(cfg, seed=seed) if seed is not None else cfg
    return preset(name, **({"seed": seed} if seed is not None else {}))


def _with_moderator(cfg, kind: str | None):
    if kind is None:
        return cfg
    mod = replace(cfg.moderator, kind=kind)
    if kind == "external":
        endpoint = mod.endpoint or os.environ.get(ENV_ENDPOINT)
        headers = dict(mod.headers)
        if os.environ.get(ENV_API_KEY):
            headers.setdefault("Authorization", f"Bearer {os.environ[ENV_API_KEY]}")
        mod = replace(mod, endpoint=endpoint, headers=headers)
    cfg = replace(cfg, moderator=mod)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _with_moderator(_scenario(args.scenario, args.seed), args.moderator)
    cfg = replace(cfg, adapt=replace(cfg.adapt, enabled=args.adapt == "on"))
    if args.workers is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, workers=args.workers))
    out = Path(args.out)
    prov = out / "provenance.jsonl"
    if prov.exists():  # a fresh run starts a fresh store
        prov.unlink()
    report = run_scenario(cfg, out)
    s = report.summary
    print(f"{cfg.scenario_id} seed={cfg.seed} adapt={args.adapt}: "
          f"final s_overall {s['final_s_overall']:.1f}, last-quarter mean "
          f"{s['mean_s_overall_last_quarter']:.1f}, radius deviation "
          f"{s['radius_deviation_pct']:.2f}%, adaptations {s['n_adaptations']}/{s['n_episodes']}, "
          f"consensus {'yes' if s['consensus_reached'] else 'no'}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _scenario(args.scenario, None)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    run_ablation(base, args.rounds, seeds, args.out, workers=args.workers)
    print((Path(args.out) / "ablation.csv").read_text("utf-8"), end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    rep = replay(args.store, args.id)
    print(json.dumps(rep.to_json(), indent=2))
    return EXIT_OK if rep.agrees is not False else EXIT_RUNTIME


def cmd_score(args) -> int:
    cfg = _scenario(args.scenario, None)
    scores = rescore_frames(args.frames, cfg.target, cfg.scoring)
    if not scores:
        raise ValueError(f"{args.frames}: no frames")
    last = scores[-1]
    live = [s for s in scores if s.frame > 0]
    print(json.dumps({
        "frames": len(live),
        "final_s_overall": last.s_overall,
        "mean_s_overall_last_quarter": final_quarter_mean(live or scores),
        "e_radius": last.e_radius,
        "sigma_height": last.sigma_height,
    }, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarmadapt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", default="e1", help="e1, e2, e3 or a scenario JSON file")
    r.add_argument("--adapt", choices=("on", "off"), default="on")
    r.add_argument("--moderator", choices=("scripted", "external"), default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--workers", type=int, default=None, help="parallel shadow validations")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="multi-round ablation of expert knowledge / provenance")
    a.add_argument("--rounds", type=int, default=3)
    a.add_argument("--scenario", default="e2")
    a.add_argument("--seeds", default=None, help="comma-separated seeds (default: scenario seed)")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    p = sub.add_parser("replay", help="rebuild and re-validate a provenance record")
    p.add_argument("--store", required=True)
    p.add_argument("--id", type=int, required=True)
    p.set_defaults(func=cmd_replay)

    s = sub.add_parser("score", help="rescore a frames.csv offline")
    s.add_argument("--frames", required=True)
    s.add_argument("--scenario", default="e1", help="scenario whose target and scoring apply")
    s.set_defaults(func=cmd_score)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReplayError, StoreError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
