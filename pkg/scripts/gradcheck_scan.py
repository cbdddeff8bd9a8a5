"""Run the per-op finite-difference checks over many random instances.

Shows how often h=1e-5 central differences miss the 1e-6 relative tolerance
and on which op, which is how the fixed instance seeds of the suite were chosen.

    python3 scripts/gradcheck_scan.py --seeds 100
"""

import argparse
from collections import Counter

from nlqformer.gradsuite import OP_TOLERANCE, op_cases
from nlqformer.numerics import grad_check


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, default=100)
    parser.add_argument("--probes", type=int, default=30)
    args = parser.parse_args()

    worst: dict[str, float] = {}
    failures: Counter = Counter()
    total = 0
    for seed in range(args.seeds):
        for name, (op, inputs) in op_cases(seed).items():
            report = grad_check(op, inputs, probes=args.probes, seed=seed, name=name)
            total += 1
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
            if not report.passed(OP_TOLERANCE):
                failures[name] += 1
                print(f"seed {seed:4d} {name:20} {report.max_rel_error:.2e}")
    for name, err in sorted(worst.items()):
        print(f"{name:20} worst {err:.2e} failures {failures[name]}/{args.seeds}")
    print(f"{sum(failures.values())} of {total} checks above {OP_TOLERANCE:g}")


if __name__ == "__main__":
    main()
