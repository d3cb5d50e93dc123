"""Per-trace latency of the estimators and the CNN forward pass."""
import numpy as np

from cirtoa.evalkit import bench_latency
from cirtoa.neuralnet import CnnModel

rng = np.random.default_rng(0)
print(f"{'length':>8}" + "".join(f"{m:>10}" for m in ("Peak", "IFP", "LDE", "+CNN")) + "   (ms per trace)")
for n in (187, 374, 2**14, 2**15):
    traces = [rng.random(n) for _ in range(5)]
    t = bench_latency(["Peak", "IFP", "LDE", "CNN"], traces, 10, model=CnnModel.build(input_length=n))
    print(f"{n:>8}" + "".join(f"{t[m]:>10.4f}" for m in ("Peak", "IFP", "LDE", "CNN")))
