#!/usr/bin/env python3
"""Run the default convergence study and its homogeneous control.

Equivalent to `hclab study run configs/default_study.json` followed by the
control config; prints the gap table and writes reports under out/.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from hclab.lab import main  # noqa: E402

HERE = pathlib.Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    rc = main(["study", "run", str(HERE / "configs" / "default_study.json")])
    rc |= main(["study", "run", str(HERE / "configs" / "control_study.json")])
    sys.exit(rc)
