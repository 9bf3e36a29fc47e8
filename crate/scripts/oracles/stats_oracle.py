"""Reference paired t-tests and standard errors from scipy.

Writes crates/core/tests/fixtures/stats_reference.json.
"""
import json
from pathlib import Path

import numpy as np
from scipy import stats

CASES = {
    "five_seeds": ([0.712, 0.698, 0.731, 0.705, 0.719], [0.655, 0.671, 0.660, 0.649, 0.668]),
    "small_gain": ([0.51, 0.53, 0.49, 0.52, 0.50, 0.54], [0.50, 0.52, 0.50, 0.50, 0.49, 0.52]),
    "negative": ([0.40, 0.42, 0.39], [0.45, 0.44, 0.47]),
    "two_pairs": ([0.9, 0.7], [0.6, 0.65]),
}

OUT = Path(__file__).resolve().parents[2] / "crates/core/tests/fixtures/stats_reference.json"

rows = []
for name, (a, b) in CASES.items():
    r = stats.ttest_rel(a, b)
    rows.append({
        "name": name, "a": a, "b": b,
        "t": float(r.statistic), "p": float(r.pvalue), "df": len(a) - 1,
        "sem_a": float(stats.sem(a)), "mean_a": float(np.mean(a)),
    })
OUT.write_text(json.dumps(rows, indent=1) + "\n")
