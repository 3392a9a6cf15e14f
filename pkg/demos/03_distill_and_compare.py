"""
Distil a few-step student and compare it with the solver
========================================================

Runs the whole pipeline with default settings into ``runs/demo`` and prints
the accuracy table and the residual curves.
"""

import json

from cdeq import harness
from cdeq.config import RunConfig

out = "runs/demo"
cfg = RunConfig(seed=0)
reports = harness.run_all(cfg, out)

print("teacher:", reports["train-teacher"]["metrics"]["val_accuracy"])
for row in reports["eval"]["metrics"]["rows"]:
    print(f"NFE {row['nfe']:2d}  student {row['student_accuracy']:.3f}  AA {row['aa_accuracy']:.3f}  "
          f"picard {row['picard_accuracy']:.3f}")

###############################################################################
# Relative residual of the teacher map after each step. The student wins at
# step 1 but stays at a few percent, while Anderson keeps contracting.

res = reports["residuals"]["metrics"]
for s in res["step"]:
    print(f"step {s:2d}  picard {res['baseline_picard'][s]:.2e}  AA {res['baseline_aa'][s]:.2e}  "
          f"student {res['student'][s]:.2e}")

print(json.dumps(reports["distill"]["metrics"]["final"], indent=2))
