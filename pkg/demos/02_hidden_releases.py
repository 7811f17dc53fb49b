# ## What happens when release records are missing
#
# Reservoir operators do not always publish releases. Here one reservoir's
# releases are removed from the inputs and the model is retrained without
# them. The damage concentrates just below that reservoir.

# +
import os

from hrgn.experiments import ExperimentConfig, release_hiding

quick = os.environ.get("QUICK") == "1"
cfg = ExperimentConfig(epochs=5 if quick else 300)
# -

out = release_hiding(seed=0, cfg=cfg)
print("hidden reservoir:", out["hidden_reservoir"], " segment below:", out["segment_x"])

# +
for tag in ("all", "hidden"):
    m = out[tag]
    print(f"{tag:>7}: overall {m.overall:.3f} C   below reservoir {m.x:.3f} C")

a, h = out["all"], out["hidden"]
print(f"overall ratio {h.overall / a.overall:.2f}, below-reservoir ratio {h.x / a.x:.2f}")
# -
