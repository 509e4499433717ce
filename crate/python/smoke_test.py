"""Smoke test for the mad_py extension.

Build and install it first:

    pip install --no-build-isolation -e crates/py
"""

import json
import sys
import tempfile
from pathlib import Path

import mad_py


def check_buddy():
    b = mad_py.BuddyAllocator(8, 3)
    phi = b.alloc(0)
    assert phi == (0, 0), phi
    b.free(phi)
    assert b.free_blocks(3) == [(0, 3)]
    blocks = [b.alloc(0) for _ in range(8)]
    assert sorted(n for n, _ in blocks) == list(range(8))
    try:
        b.alloc(0)
    except MemoryError:
        pass
    else:
        raise AssertionError("ninth allocation should fail")
    for blk in blocks:
        b.free(blk)
    b.check_invariants()


def check_mad():
    mad = mad_py.Mad(seed=3, verify=True)
    pool = set(mad.alloc_cache(0))
    phi = mad.alloc(0)
    mad.free(phi)
    again = mad.alloc(0)
    assert again in pool, again
    assert mad.counters()["backend_refills"] == 0
    (lo, hi), _ = mad.bounds(0)
    assert 8 <= lo <= 16 and 32 <= hi <= 64
    mad.free(again)
    assert mad.held_count == 0
    mad.check_invariants()
    assert mad.alarms() == []


def check_experiments():
    buddy = mad_py.sparse_run("buddy", 200_000, seed=1)
    mad = mad_py.sparse_run("mad", 200_000, seed=1)
    assert buddy["attrition_rate"] > 3 * mad["attrition_rate"]
    outcome = mad_py.worst_case_run(64, 128, seed=1)
    assert outcome["required_allocs"] is not None
    with tempfile.TemporaryDirectory() as out:
        report = mad_py.run_experiment("exhaustive-detect", out, repetitions=2, total_blocks=4096)
        assert all(c["passed"] for c in report["checks"]), report
        manifest = json.loads((Path(out) / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1]
        try:
            mad_py.run_experiment("worst-case", out)
        except ValueError:
            pass
        else:
            raise AssertionError("worst-case without bounds should be rejected")


def main():
    check_buddy()
    check_mad()
    check_experiments()
    print("mad_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
