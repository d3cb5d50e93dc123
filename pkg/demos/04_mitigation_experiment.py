"""A small cross-environment experiment: X, X+CnstAvg and X+CNN.

With 1,500 records and 40 epochs the CNN rows are a quick look only; the
acceptance suite runs the same comparison on 5,000 training records.
"""
import time

from cirtoa.cir import ChannelParams, synth_dataset
from cirtoa.evalkit import SplitPolicy, method_names, run_experiment
from cirtoa.neuralnet import TrainConfig

records = synth_dataset(ChannelParams(environment="room_a"), 1500, 1)
records += synth_dataset(ChannelParams(environment="room_b", los_probability=0.4), 500, 2)
policy = SplitPolicy("room_a", "room_b", n_repeats=1, seed=0)

t0 = time.time()
report = run_experiment(records, policy, method_names(), train_config=TrainConfig(max_epochs=40))
print(report.table())
print(f"took {time.time() - t0:.0f} s")
print("fitted constant biases (samples):", {k: round(v, 3) for k, v in report.biases[0].items()})
