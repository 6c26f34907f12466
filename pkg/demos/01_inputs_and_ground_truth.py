"""What the boundary network sees.

Generates one synthetic scene and prints summary statistics for each input
channel, the ground-truth boundary mask and the flow-gradient baseline.
Writes the frames, flows and masks to ./demo_inputs for inspection.

    python3 demos/01_inputs_and_ground_truth.py
"""

from pathlib import Path

import numpy as np

from mobonet import evaluation as ev
from mobonet import flowio
from mobonet.flowdata import SynthConfig, flow_gradient_magnitude, synth_sample

out = Path("demo_inputs")
out.mkdir(exist_ok=True)

s = synth_sample(3, SynthConfig(width=64, height=64, flow_noise=0.5))

for name, arr in [
    ("frame1", s.frame1),
    ("forward flow", s.fwd_flow),
    ("forward warp error", s.fwd_warp_error),
    ("backward warp error", s.bwd_warp_error),
]:
    print(f"{name:22s} shape={arr.shape} min={arr.min():+.3f} max={arr.max():+.3f}")

epe0 = ev.epe_stats([s.fwd_flow], [s.gt_flow])
print(f"initial flow EPE against ground truth: {epe0:.3f} px")
print(f"boundary pixels: {int(s.gt_boundary.sum())} of {s.gt_boundary.size}")

# the cheapest possible detector: large spatial flow gradient means boundary
grad = flow_gradient_magnitude(s.fwd_flow)
baseline = 1.0 - np.exp(-grad)
print(f"flow-gradient baseline AP: {ev.dataset_ap([baseline], [s.gt_boundary]):.3f}")

flowio.write_image(out / "frame1.png", s.frame1)
flowio.write_image(out / "frame2.png", s.frame2)
flowio.write_image(out / "boundary.pgm", s.gt_boundary.astype(float))
flowio.write_image(out / "baseline.pgm", baseline, maxval=65535)
flowio.save_flo(out / "fwd.flo", s.fwd_flow)
flowio.save_flo(out / "gt.flo", s.gt_flow)
print(f"wrote files to {out}/")
