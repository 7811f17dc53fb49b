# ## Correcting the model state with observations
#
# With releases hidden, the model drifts below the reservoir. Two ways to
# pull it back using yesterday's observations:
#
# * an ensemble Kalman filter on the hidden state of the gated model
# * the coupling head, whose readout can be inverted so that an observed
#   temperature maps straight back to a memory state
#
# Both are causal: the prediction for day t only uses observations before t.

# +
import os

from hrgn.experiments import ExperimentConfig, assimilation_ordering, fraction_sweep, update_period_sweep

quick = os.environ.get("QUICK") == "1"
cfg = ExperimentConfig(epochs=5 if quick else 300)
# -

res = assimilation_ordering(seed=0, cfg=cfg)
for v in ("hrgn", "hrgn-kf", "hrgn-adj"):
    print(f"{v:>9}: {res[v].overall:.3f} C   below reservoir {res[v].x:.3f} C")

# ### How often to adjust
#
# Adjusting every k days instead of daily lets the state drift in between.
# Each k gets its own second training stage with the same schedule, starting
# from the shared first stage.

sweep = update_period_sweep(0, cfg, stage1=res["adj_stage1"], trained={1: res["adj_model"]})
for k, v in sweep.items():
    print(f"k={k:>2}: {v:.3f} C")

# ### How many observations are needed
#
# Thin the observations available for adjustment in the test years; the
# score is still taken on all of them.

for f, v in fraction_sweep(res["adj_model"], seed=0).items():
    print(f"{f:>4.0%}: {v:.3f} C")
