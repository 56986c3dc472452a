"""Regenerate filters.json and adam.json from the oracles in tests/oracles.py.

Run from the repository root: python3 tests/golden/make_golden.py
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from oracles import butter_lowpass_cascade, rbj_notch, scalar_adam  # noqa: E402

HERE = Path(__file__).resolve().parent


def main():
    filters = {}
    for name, (b, a) in {
        "butter_lp_3_20_500": butter_lowpass_cascade(3, 20.0, 500.0),
        "butter_lp_3_20_100": butter_lowpass_cascade(3, 20.0, 100.0),
        "butter_lp_4_40_1000": butter_lowpass_cascade(4, 40.0, 1000.0),
        "notch_0.01_0.707_500": rbj_notch(0.01, 0.707, 500.0),
        "notch_50_30_500": rbj_notch(50.0, 30.0, 500.0),
    }.items():
        filters[name] = {"b": [float(v) for v in b], "a": [float(v) for v in a]}
    (HERE / "filters.json").write_text(json.dumps(filters, indent=1) + "\n")
    path = scalar_adam(lambda t: 2.0 * (t - 3.0), 0.0, 0.1, 100)
    (HERE / "adam.json").write_text(json.dumps({"target": 3.0, "lr": 0.1, "theta0": 0.0,
                                                "trajectory": path}, indent=1) + "\n")


if __name__ == "__main__":
    main()
