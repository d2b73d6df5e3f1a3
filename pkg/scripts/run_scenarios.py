"""Run the named scenarios and print a one-line summary of each trace."""

import argparse
import collections
import hashlib
import time
from pathlib import Path

from cnqf.harness.audit import configure_causality_rate
from cnqf.harness.scenario import NAMED_SCENARIOS, run_scenario
from cnqf.harness.trace import write_trace


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("names", nargs="*", default=sorted(NAMED_SCENARIOS))
    ap.add_argument("--out", type=Path, help="directory for trace files")
    args = ap.parse_args()

    for name in args.names:
        spec = NAMED_SCENARIOS[name]()
        start = time.perf_counter()
        result = run_scenario(spec)
        elapsed = time.perf_counter() - start
        text = result.text()
        kinds = collections.Counter(r.kind for r in result.trace)
        ok, total = configure_causality_rate(result.trace)
        print(f"{name}: {len(result.trace)} records in {elapsed * 1000:.1f} ms, "
              f"sha256 {hashlib.sha256(text.encode()).hexdigest()[:16]}, "
              f"CONFIGURE traced {ok}/{total}")
        for s in result.sessions.values():
            print(f"  {s.id}: {s.state.value} codec={s.current_codec} kbps={s.current_bandwidth_kbps}")
        print("  " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            write_trace(args.out / f"{name}.trace", result.trace, spec.seed)


if __name__ == "__main__":
    main()
