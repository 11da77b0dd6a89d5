# %% [markdown]
# # Training a small model and comparing it with LI
#
# A scaled-down version of the desk experiment: 32x32 images, two stages,
# a few epochs.  It runs in a couple of minutes on one core and shows the
# pieces the CLI wires together: dataset generation, `fit`, per-stage traces
# and grouped metrics.

# %%
import numpy as np

from findnet import ctsim, metrics
from findnet.model import FindNetConfig, findnet_forward, init_findnet
from findnet.training import FitConfig, OptimizerState, ScheduleConfig, fit

cfg = ctsim.SampleConfig(
    phantom=ctsim.PhantomConfig(32, 32, 4, ctsim.MetalConfig(1, (1.0, 2.5), 2.5)),
    geometry=ctsim.Geometry(48, 48),
    corruption=ctsim.Corruption(0.3, 1.0))
train = [ctsim.make_sample(s, cfg) for s in range(120)]
val = [ctsim.make_sample(1000 + s, cfg) for s in range(5)]
test = [ctsim.make_sample(2000 + s, cfg) for s in range(12)]

# %% [markdown]
# The proximal networks start as exact identities (their last convolution is
# zero), so the untrained model only applies the data-consistency steps.

# %%
model = init_findnet(FindNetConfig(stages=2, n_kernels=8, kernel_size=7, width=12, blocks=1), 0)
print("parameters:", model.n_parameters())
epochs = 8
fc = FitConfig(epochs=epochs, patience=epochs,
               optimizer=OptimizerState(lr=2e-3),
               schedule=ScheduleConfig(60, epochs * len(train), 0.0))
result = fit(train, val, model, fc)
for row in result.history:
    print(f"epoch {row.epoch}: train {row.train_loss:.3f}  val {row.val_loss:.3f}  lr {row.lr:.2e}")

# %% [markdown]
# Per-stage masked MAE on held-out samples: stage 0 is the LI input.

# %%
best = result.best
per_stage = np.array([[metrics.mae(findnet_forward(s, best, "infer").image(k), s.X_gt, s.I)
                       for k in range(3)] for s in test])
for k, v in enumerate(per_stage.mean(axis=0)):
    print(f"stage {k}: MAE {v:.4f}")

# %%
li = metrics.evaluate(lambda s: s.X0, test, name="li")
net = metrics.evaluate(lambda s: findnet_forward(s, best, "infer").image(), test,
                       baseline=li, name="model")
print(net.summary_csv())
