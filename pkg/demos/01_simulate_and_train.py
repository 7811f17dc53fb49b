# ## Simulating a river network and fitting a recurrent graph model
#
# Build a synthetic stream-reservoir network, look at what the simulator
# produces, train the gated model and score it on the held-out years.
#
# Set QUICK=1 to run with a handful of epochs.

# +
import os

import numpy as np

from hrgn import SynthConfig, TrainConfig, bundle_from_synth, generate, predict, train
from hrgn.training import rmse

quick = os.environ.get("QUICK") == "1"
epochs = 5 if quick else 300
# -

# ### The network
#
# Segments are linked upstream to downstream; reservoirs take inflow from
# the segments above them and release into the segment below.

ds = generate(SynthConfig(seed=0))
print("segments:", len(ds.segments), " reservoirs:", ds.reservoirs)
print("segment below each reservoir:", dict(zip(ds.reservoirs, ds.below_reservoir)))
print("days:", ds.truth.shape[0])

# Water temperature follows air temperature with lag, and cold hypolimnetic
# releases pull the segments below a reservoir down in summer.

below = ds.segments.index(ds.below_reservoir[0])
summer = slice(180, 240)
print(f"mean summer temperature below {ds.reservoirs[0]}: {ds.truth[summer, below].mean():.2f} C")
print(f"network mean in the same days:     {ds.truth[summer].mean():.2f} C")

# ### Training
#
# The bundle holds drivers, lagged releases, graph weights and observations.
# Training runs over 365-day windows with early stopping on the last tenth
# of the training span.

# +
bundle = bundle_from_synth(ds)
print("training days:", bundle.train_end, " test days:", bundle.n_days - bundle.train_end)
model, log = train(bundle, TrainConfig(epochs=epochs, seed=0, patience=30))
print("epochs run:", len(log.rows), " final val rmse:", round(log.rows[-1][4], 3))
# -

# ### Test error

pred = predict(model, bundle)
te = bundle.train_end
print(f"test rmse: {rmse(pred[te:], bundle.obs[te:]):.3f} C")
per = {s: rmse(pred[te:, i], bundle.obs[te:, i]) for i, s in enumerate(bundle.segments)}
worst = max(per, key=per.get)
print(f"worst segment: {worst} ({per[worst]:.3f} C)")
