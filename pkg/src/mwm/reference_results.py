"""Previously reported robustness tables, bundled as metric-oracle fixtures.

`verify-metrics` pushes these raw per-suite / per-shift success rates through
the same nPAUC and OOD-SR/Retain code used for our own sweeps and checks that
the reported summary values come back out.  That pins the metric definitions
to an external ground truth instead of to this codebase's own behavior.

Summary values are published at fixed precision (3 decimals for nPAUC, one
decimal for percentages, two for Retain), so comparisons round the computed
value to the published precision first; the ±0.002 gate then catches real
formula errors rather than display rounding.
"""

from __future__ import annotations

import numpy as np

PRUNE_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
SUITES = ("spatial", "object", "goal", "long")

# Unpruned success rates per suite (the r = 0 baselines of the profiles below).
BASELINE_SR = {
    "mwm": np.array([0.988, 1.000, 0.982, 0.960]),
    "ge-act": np.array([0.982, 0.976, 0.958, 0.944]),
}

# Success-rate profiles under random visual token pruning; rows are suites in
# SUITES order, columns follow PRUNE_RATIOS.
PRUNE_PROFILES = {
    "mwm": np.array([
        [0.98, 0.97, 0.96, 0.95, 0.90, 0.85, 0.50, 0.05, 0.00],
        [1.00, 1.00, 0.99, 0.97, 0.94, 0.80, 0.49, 0.10, 0.00],
        [0.98, 0.97, 0.94, 0.89, 0.84, 0.65, 0.40, 0.07, 0.00],
        [0.96, 0.96, 0.95, 0.79, 0.69, 0.37, 0.03, 0.00, 0.00],
    ]),
    "ge-act": np.array([
        [0.96, 0.96, 0.96, 0.96, 0.90, 0.83, 0.51, 0.11, 0.00],
        [0.99, 0.98, 0.97, 0.96, 0.85, 0.47, 0.09, 0.00, 0.00],
        [0.95, 0.94, 0.94, 0.89, 0.84, 0.67, 0.42, 0.21, 0.00],
        [0.94, 0.95, 0.86, 0.77, 0.59, 0.39, 0.03, 0.00, 0.00],
    ]),
}

REPORTED_NPAUC = {"mwm": 0.648, "ge-act": 0.629}

# Appearance-shift results: in-distribution SR and SR under each shift family,
# in percent, plus the reported summary metrics.
SHIFT_TABLES = {
    "mwm": {"sr_id": 67.5, "shifts": {"bg": 27.5, "light": 56.3, "color": 42.5}},
    "pi0": {"sr_id": 38.8, "shifts": {"bg": 13.8, "light": 17.5, "color": 26.3}},
    "ge-act": {"sr_id": 23.8, "shifts": {"bg": 3.8, "light": 18.8, "color": 15.0}},
}

REPORTED_OOD_SR = {"mwm": 42.1, "pi0": 19.2, "ge-act": 12.5}
REPORTED_RETAIN = {"mwm": 0.62, "pi0": 0.49, "ge-act": 0.53}
