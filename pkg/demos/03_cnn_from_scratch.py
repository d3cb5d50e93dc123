"""The error-regression CNN: shapes, a gradient check and a short training run."""
import numpy as np

from cirtoa import estimators as est
from cirtoa.cir import ChannelParams, preprocess_record, synth_dataset
from cirtoa.evalkit import conventional_toa, error_dataset
from cirtoa.neuralnet import CnnModel, TrainConfig, check_gradients, forward, train

model = CnnModel.build(seed=0)
print("sequence lengths through the conv stack:", model.lengths)
print("dense inputs:", model.architecture()["dense_inputs"])
print("parameters:", model.get_flat().size)

# finite differences on a smaller copy of the architecture
small = CnnModel.build(input_length=48, channels=4, seed=1)
rng = np.random.default_rng(1)
x = rng.random((3, 48))
res = check_gradients(small, x, rng.uniform(0, 48, 3), rng.normal(size=3))
print(f"gradient check: max rel. error {res.max_rel_error:.2e} over {res.n_checked} parameters"
      f" ({res.n_kinked} next to a ReLU kink skipped)")

rng = np.random.default_rng(0)
recs = [preprocess_record(r, rng) for r in synth_dataset(ChannelParams(), 1200, 3)]
train_set, val_set = recs[:900], recs[900:]
p = est.optimize_params(train_set, "IFP")
toa_tr, toa_va = conventional_toa(train_set, "IFP", p), conventional_toa(val_set, "IFP", p)
data_tr, data_va = error_dataset(train_set, toa_tr), error_dataset(val_set, toa_va)
print(f"IFP error spread on validation: std {data_va.target.std():.2f} samples")

model, hist = train(model, data_tr, data_va, TrainConfig(max_epochs=30, patience=10))
print("validation MSE per epoch:", np.round(hist.val_loss, 2))
eps = forward(model, data_va.cirs, data_va.toa)
print(f"after mitigation: std {np.std(data_va.target - eps):.2f} samples (best epoch {hist.best_epoch})")
