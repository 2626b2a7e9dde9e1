"""
What the learned trigger looks like, and how ownership is checked
==================================================================

Reads a finished run (``honeypot full-run`` output) and prints the trigger
patch, the BLO history and the verification numbers for both substitutes.

Run with ``python3 demos/inspect_trigger.py runs/default``.
"""
import json
import sys
from pathlib import Path

import numpy as np

from honeypot import pipeline as P
from honeypot.evaluation import verify_ownership
from honeypot.victim import load_checkpoint

run = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/default")
trig = P.load_protected_model(run).trigger
size, row, col = trig.patch
print(f"target class {trig.target_class}, {size}x{size} patch at ({row}, {col}), "
      f"eps {trig.epsilon}, alpha {trig.alpha}")

#############################################################################
# The patch values after clipping, as the attacker's pool would carry them.
# Sign steps of size (1 - alpha) * eps settle near -eps or +eps, and the clip
# to [0, 1] keeps only the positive side: the trigger ends up a dark square.
# The shading below is stretched to [0, eps] so the texture is visible.
patch = np.clip(trig.delta[0, row:row + size, col:col + size], 0, 1)
shades = " .:-=+*#%@"
for line in patch:
    cells = "".join(shades[min(int(v / trig.epsilon * len(shades)), len(shades) - 1)] * 2
                    for v in line)
    print("   " + cells, " ".join(f"{v:.2f}" for v in line))

#############################################################################
# How the bi-level loop went.
history = json.loads((run / "protected" / "history.json").read_text())
print("\niteration  shadow-success  head-clean-acc")
for h in history:
    print(f"{h['iteration']:9d}  {h['trigger_success_on_shadow']:14.3f}  {h['honeypot_clean_acc']:14.3f}")

#############################################################################
# The defender stamps the trigger on held-out inputs and asks a suspect model
# how often it answers the target class.
test = P.load_data(run)["victim_test"]
for name in ("substitute.hpnt", "substitute_undefended.hpnt"):
    v = verify_ownership(load_checkpoint(run / name), trig, test, tau=0.10)
    print(f"\n{name}: Acc_v {v.acc_v:.3f} vs tau {v.tau} (chance {v.chance_rate:.2f}) "
          f"-> {'stolen' if v.decision else 'not ours'}")
