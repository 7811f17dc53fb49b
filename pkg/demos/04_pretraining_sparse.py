# ## Pretraining on simulator output when observations are scarce
#
# The process simulator gives a temperature for every segment and day. A model
# pretrained to mimic it and then fine-tuned on a few real observations
# usually beats one trained from scratch on those observations alone. With
# plenty of data the advantage fades.

# +
import os

from hrgn.experiments import ExperimentConfig, pretraining_study

quick = os.environ.get("QUICK") == "1"
cfg = ExperimentConfig(epochs=5 if quick else 300, pretrain_epochs=5 if quick else 100)
# -

cache = {}
for fraction in (0.005, 0.02, 1.0):
    r = pretraining_study(seed=0, fraction=fraction, cfg=cfg, pretrained=cache)
    print(f"{fraction:>6.1%}: cold {r['hrgn']:.3f} C   pretrained {r['hrgn-ptr']:.3f} C")

# ### Adjusting a badly trained model
#
# With almost no data the coupling head has not learned a good inverse, so
# replacing its state from observations can make things worse. Pretraining
# gives it a usable inverse.

r = pretraining_study(seed=0, fraction=0.001, cfg=cfg, variants=("hrgn", "hrgn-adj", "hrgn-adj-ptr"), pretrained=cache)
for k, v in r.items():
    print(f"{k:>13}: {v:.3f} C")
