"""Smoke test for the w2sg extension module.

Build it first with `pip install --no-build-isolation ./crates/python`.
"""

import math
import sys
import tempfile

import w2sg

TINY = """
pretrain_tasks = 2
pretrain_samples = 150
finetune_tasks = 4
finetune_samples = 150
weak_label_samples = 150
eval_samples = 300
seed = 3
"""


def check(label, ok):
    print(("ok   " if ok else "FAIL ") + label)
    return ok


def main():
    results = []
    results.append(check("kl of identical vectors is zero", w2sg.kl([0.5, 0.5], [0.5, 0.5]) == 0.0))
    q = (1 - math.sqrt(3) / 2) / 2
    results.append(check("kl against a skewed pair is ln 2", abs(w2sg.kl([0.5, 0.5], [q, 1 - q]) - math.log(2)) < 1e-12))
    results.append(check("tv is half the l1 distance", abs(w2sg.tv([0.7, 0.3], [0.4, 0.6]) - 0.3) < 1e-15))
    results.append(check("normalized outputs sum to one", abs(sum(w2sg.normalize_outputs([1.0, 2.0, 5.0])) - 1) < 1e-12))
    results.append(check("calibration gap bound at ln 2", abs(w2sg.calibration_gap_bound(math.log(2)) - math.sqrt(2)) < 1e-12))
    results.append(check("c1 at a tenth", abs(w2sg.c1("classification-kl", 0.1) - 32.56347067030294) < 1e-9))

    try:
        w2sg.validate_config("finetune_taks = 3")
        results.append(check("unknown key rejected", False))
    except ValueError as e:
        results.append(check("unknown key rejected", "finetune_taks" in str(e)))
    results.append(check("resolved config round trips", "finetune_tasks = 4" in w2sg.validate_config(TINY)))

    with tempfile.TemporaryDirectory() as out:
        run = w2sg.run(TINY, out)
        results.append(check("run completes every task", run["tasks"] == 4 and run["failed_tasks"] == 0))
        results.append(check("no asserted bound failures", run["asserted_failures"] == 0))
        with open(f"{out}/scatter.csv") as f:
            results.append(check("scatter has a row per task", len(f.read().splitlines()) == 5))

    suites = w2sg.run_selftest(0)
    results.append(check(f"{len(suites)} selftest suites pass", all(passed for _, passed, _ in suites)))
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
