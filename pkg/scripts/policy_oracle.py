"""Compare the PDP with a brute-force winner on random policy sets."""

import argparse
import random
import time

from cnqf.harness.audit import brute_force_winner
from cnqf.policy import FactBase, evaluate, parse_policy_set

FIELDS = ("a", "b", "c", "d")
OPS = ("==", "!=", "<", "<=", ">", ">=")


def random_condition(rng: random.Random, depth: int = 0) -> str:
    roll = rng.random()
    if depth < 2 and roll < 0.25:
        joiner = rng.choice((" and ", " or "))
        return "(" + random_condition(rng, depth + 1) + joiner + random_condition(rng, depth + 1) + ")"
    if depth < 2 and roll < 0.35:
        return "not " + random_condition(rng, depth + 1)
    return f"request({rng.choice(FIELDS)}) {rng.choice(OPS)} {rng.randint(0, 4)}"


def random_case(rng: random.Random, max_policies: int):
    ids = rng.sample([f"p{i:02d}" for i in range(80)], rng.randint(0, max_policies))
    lines = ["default reject"]
    for pid in ids:
        lines.append(f"policy {pid} priority {rng.randint(0, 5)} when {random_condition(rng)} then admit")
    request = {f: rng.randint(0, 4) for f in FIELDS if rng.random() < 0.8}
    return "\n".join(lines) + "\n", FactBase(request=request)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cases", type=int, default=1000)
    ap.add_argument("--max-policies", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    start = time.perf_counter()
    agree = 0
    for n in range(args.cases):
        text, facts = random_case(rng, args.max_policies)
        policies = parse_policy_set(text)
        got = evaluate(policies, facts).matched_policy
        want = brute_force_winner(policies, facts)
        if got == want:
            agree += 1
        else:
            print(f"case {n}: pdp {got}, oracle {want}\n{text}{facts.request}")
    print(f"{agree}/{args.cases} agree in {time.perf_counter() - start:.2f} s")
    raise SystemExit(0 if agree == args.cases else 1)


if __name__ == "__main__":
    main()
