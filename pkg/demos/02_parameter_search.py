"""Exhaustive grid search for the threshold factor and LDE windows."""
import numpy as np

from cirtoa import estimators as est
from cirtoa.cir import ChannelParams, preprocess_record, synth_dataset

rng = np.random.default_rng(0)
records = [preprocess_record(r, rng) for r in synth_dataset(ChannelParams(), 400, 1)]
print(f"{len(records)} preprocessed records of {len(records[0].cir)} samples")

# mean absolute ToA error (samples) over alpha for Peak and IFP
for method in ("Peak", "IFP"):
    costs = est.search_costs(records, method, {"alpha": [0.05, 0.1, 0.2, 0.3, 0.4, 0.6]})
    print(method)
    for p, c in costs:
        print(f"  alpha {p.alpha:.2f}: {c:6.3f}")

best = est.optimize_params(records, "LDE")
print("LDE optimum on the default grid:")
print(" ", best)
costs = sorted(est.search_costs(records, "LDE"), key=lambda pc: pc[1])
print("five best LDE points:")
for p, c in costs[:5]:
    print(f"  {c:6.3f}  alpha={p.alpha} avg={p.avg_window} small={p.lde_small_window} large={p.lde_large_window} factor={p.lde_factor}")
