"""Run the acceptance suite and print its PASS/FAIL lines.

    python3 scripts/run_acceptance.py            # all criteria (~20 min)
    python3 scripts/run_acceptance.py --quick    # skip the training trend
"""

import argparse
import sys
from pathlib import Path

import pytest


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--quick", action="store_true", help="skip the multi-seed training trend")
    args = ap.parse_args()
    target = str(Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py")
    extra = ["-k", "not desk_trend"] if args.quick else []
    return pytest.main([target, "-q", "-rxX", *extra])


if __name__ == "__main__":
    sys.exit(main())
