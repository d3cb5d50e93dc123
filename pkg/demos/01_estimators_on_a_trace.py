"""Peak, IFP and LDE on single synthetic CIRs, one LOS and one NLOS."""
import numpy as np

from cirtoa import estimators as est
from cirtoa.cir import ChannelParams, synth_record

spacer = "_" * 60
params = est.EstimatorParams(alpha=0.2, avg_window=2, lde_small_window=2, lde_large_window=12, lde_factor=1.0)

for name, los in [("LOS", 1.0), ("NLOS", 0.0)]:
    rec = synth_record(ChannelParams(los_probability=los), 21)
    s = rec.cir.samples
    print(spacer)
    print(f"{name} trace: {s.size} samples, true ToA at index {rec.toa_true:.2f}")
    print("strongest sample at", int(np.argmax(s)))
    print("samples around the arrival:")
    lo = int(rec.toa_true) - 3
    print(np.round(s[lo : lo + 12], 3))
    for method in est.METHODS:
        try:
            i = est.estimate(rec.cir, method, params).index
            print(f"  {method:<5} -> {i:5.0f}   error {i - rec.toa_true:+.2f} samples")
        except est.NoArrivalError:
            print(f"  {method:<5} -> no arrival")

print(spacer)
print("The threshold is relative, so scaling a trace changes nothing:")
rec = synth_record(ChannelParams(), 4)
for gain in (1.0, 8.0, 1 / 64):
    idx = [int(est.estimate_indices(rec.cir.samples * gain, m, params)[0]) for m in est.METHODS]
    print(f"  gain {gain:<8} Peak/IFP/LDE = {idx}")
