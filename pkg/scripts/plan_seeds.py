"""Plan on the bundled arch phantom for several seeds and replay each plan.

    python scripts/plan_seeds.py --seeds 0-9 --out seeds.csv
"""

import argparse
import csv
import sys
import time

import numpy as np

from endonav.config import load_config
from endonav.harness import replay_plan
from endonav.planner import build_rrt, extract_plan


def seed_range(text):
    lo, _, hi = text.partition("-")
    return range(int(lo), int(hi or lo) + 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run configuration (default: bundled)")
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-9"))
    ap.add_argument("--budget", type=int)
    ap.add_argument("--out", help="CSV summary path (default: stdout)")
    args = ap.parse_args()

    cfg = load_config(args.config, {"budget": args.budget})
    mesh = cfg.load_mesh()
    target = np.asarray(cfg.regions.target.center)
    rows = []
    for seed in args.seeds:
        params = type(cfg.planner)(**{**cfg.planner.__dict__, "seed": seed})
        t0 = time.perf_counter()
        graph = build_rrt(cfg.start, mesh, cfg.tools, params, cfg.gravity, cfg.solver)
        success, steps = False, ""
        if graph.goal_index is not None:
            plan = extract_plan(graph)
            steps = len(plan)
            success = replay_plan(plan, mesh, cfg.tools, cfg.regions, cfg.gravity, cfg.solver).success
        best = float(np.min(np.linalg.norm(graph.tips() - target, axis=1)))
        rows.append({
            "seed": seed,
            "goal_found": graph.goal_index is not None,
            "replay_success": success,
            "expansions": graph.attempts,
            "vertices": len(graph.vertices),
            "plan_steps": steps,
            "best_tip_distance_mm": round(best * 1e3, 3),
            "seconds": round(time.perf_counter() - t0, 1),
        })
        print(rows[-1], file=sys.stderr, flush=True)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(out, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    wins = sum(r["replay_success"] for r in rows)
    print(f"{wins}/{len(rows)} seeds succeeded", file=sys.stderr)


if __name__ == "__main__":
    main()
