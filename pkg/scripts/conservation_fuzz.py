"""Randomised conservation check: reserved <= capacity everywhere, zero at the end,
and every admission verdict agreeing with a from-scratch ledger replay."""

import argparse
import time

from cnqf.harness.fuzz import FuzzConfig, run_fuzz


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--runs", type=int, default=500)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--max-sessions", type=int, default=50)
    ap.add_argument("--max-elements", type=int, default=10)
    args = ap.parse_args()

    cfg = FuzzConfig(max_elements=args.max_elements, max_sessions=args.max_sessions)
    start = time.perf_counter()
    failed, checked, sessions = [], 0, 0
    for seed in range(args.first_seed, args.first_seed + args.runs):
        outcome = run_fuzz(seed, cfg)
        checked += outcome.replay.checked
        sessions += len(outcome.result.sessions)
        if not outcome.ok:
            failed.append(outcome)
    elapsed = time.perf_counter() - start

    print(f"{args.runs} runs, {sessions} sessions, {checked} verdicts replayed, {elapsed:.1f} s")
    for o in failed:
        problems = (o.invariant_violations + o.replay.disagreements + o.replay.violations
                    + o.causality + o.states + o.ordering)
        print(f"seed {o.seed}: final_zero={o.final_zero} final_match={o.replay.final_match}")
        for p in problems[:5]:
            print(f"  {p}")
    print("OK" if not failed else f"{len(failed)} failing seeds")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
