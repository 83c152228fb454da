"""Run the acceptance criteria and print one PASS/FAIL line each.

    python3 scripts/acceptance.py          # criteria 1-8
    python3 scripts/acceptance.py 1 3 5    # a subset
"""
import runpy
import sys
from pathlib import Path

if __name__ == "__main__":
    tests = Path(__file__).resolve().parents[1] / "tests"
    sys.path.insert(0, str(tests))
    runpy.run_path(str(tests / "test_acceptance.py"), run_name="__main__")
