"""Reference values for the Cox and Kaplan-Meier integration tests.

Run with numpy + statsmodels installed; the printed numbers are pasted into
tests/survival_oracles.rs.
"""
import numpy as np
from statsmodels.duration.hazard_regression import PHReg
from statsmodels.duration.survfunc import SurvfuncRight

# (time, event, group) with tied event times across and within groups.
DATA = [
    (2, 1, 0), (3, 1, 0), (3, 0, 0), (5, 1, 0), (8, 0, 0), (9, 1, 0), (12, 0, 0), (12, 1, 0), (15, 0, 0),
    (1, 1, 1), (2, 1, 1), (3, 1, 1), (3, 1, 1), (4, 0, 1), (5, 1, 1), (6, 1, 1), (7, 0, 1), (10, 1, 1),
]

t = np.array([d[0] for d in DATA], float)
e = np.array([d[1] for d in DATA], float)
g = np.array([d[2] for d in DATA], float)

for ties in ("efron", "breslow"):
    res = PHReg(t, g[:, None], status=e, ties=ties).fit()
    beta, se = res.params[0], res.bse[0]
    print(f"{ties}: beta={beta:.12f} se={se:.12f} z={beta / se:.12f} p={res.pvalues[0]:.12e} ll={res.llf:.12f}")

sf = SurvfuncRight(t[g == 0], e[g == 0])
print("km reference times", list(sf.surv_times), "surv", [f"{v:.15f}" for v in sf.surv_prob])
