"""Train both networks on a tiny dataset and measure what each one buys.

Small enough to finish in under a minute on one core, so the numbers are
only indicative; the acceptance suite runs the larger experiment.

    python3 demos/02_train_and_refine.py
"""

import time

import numpy as np

from mobonet import evaluation as ev
from mobonet import nets
from mobonet.flowdata import synth_dataset
from mobonet.training import TrainConfig, predict_boundaries, refine_flows, train_boundary, train_fusion

train = synth_dataset(48, 32, 32, seed=0, flow_noise=0.5)
test = synth_dataset(12, 32, 32, seed=5000, flow_noise=0.5)

t0 = time.time()
bnet = nets.build_refinenet(nets.RefineNetConfig(32, 32, width_multiplier=0.125), seed=0)
hist = train_boundary(bnet, train, TrainConfig(iterations=600, batch_size=8, base_lr=5e-3, divisor=1.0))
print(f"boundary net: mean loss {np.mean(hist[:20]):.1f} -> {np.mean(hist[-20:]):.1f} in {time.time() - t0:.0f}s")

probs = predict_boundaries(bnet, test)
print(f"test AP: {ev.dataset_ap(probs, [s.gt_boundary for s in test]):.3f}")
print(ev.format_pr_table(ev.pr_curve(probs, [s.gt_boundary for s in test])).splitlines()[-1])

# the fusion net is trained on the boundary net's own predictions
t0 = time.time()
fnet = nets.build_fusion_net(nets.FusionNetConfig(layer_count=4, feature_maps=16), seed=0)
hist = train_fusion(fnet, train, predict_boundaries(bnet, train), TrainConfig(iterations=300, batch_size=4, divisor=1.0))
print(f"fusion net: mean loss {np.mean(hist[:20]):.1f} -> {np.mean(hist[-20:]):.1f} in {time.time() - t0:.0f}s")

refined = refine_flows(fnet, [s.fwd_flow for s in test], probs)
gts = [s.gt_flow for s in test]
before = ev.epe_stats([s.fwd_flow for s in test], gts)
after = ev.epe_stats(refined, gts)
print(f"EPE {before:.3f} -> {after:.3f} px")
