#!/usr/bin/env python3
"""Run the desk-scale experiments and write one JSON summary per experiment.

Usage: python scripts/run_experiments.py [expert|gail|fig4a|fig4b|posterior|blackout|vae|all] [--out DIR]
"""
import argparse
import json
import time
from pathlib import Path

from adail import experiments as ex

NEEDS = {"gail": "cartpole", "fig4a": "cartpole", "fig4b": "puck", "posterior": "puck",
         "blackout": "puck", "vae": "puck_friction"}
RUNNERS = {"gail": ex.gail_sanity, "fig4a": ex.fig4a, "fig4b": ex.fig4b, "posterior": ex.posterior_quality,
           "blackout": ex.blackout, "vae": ex.vae_experiment}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("name", choices=["expert", *RUNNERS, "all"])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ["expert", *RUNNERS] if args.name == "all" else [args.name]
    setups = {}
    for name in names:
        t0 = time.time()
        if name == "expert":
            result = ex.expert_check()
        else:
            family = NEEDS[name]
            if family not in setups:
                setups[family] = ex.prepare(family)
            result = RUNNERS[name](setups[family])
        result["wall_seconds"] = time.time() - t0
        (out / f"{name}.json").write_text(json.dumps(result, indent=2, default=float))
        verdict = "PASS" if all(result["checks"].values()) else "FAIL"
        print(f"{name}: {verdict} {result['checks']}", flush=True)


if __name__ == "__main__":
    main()
