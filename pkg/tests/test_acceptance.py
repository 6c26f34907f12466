"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``. The two training
experiments (criteria 4 and 5) dominate the runtime, roughly 15 minutes
together on one core.
"""

import time

import numpy as np
import pytest

from mobonet import checkpoint as ckpt
from mobonet import evaluation as ev
from mobonet import flowio, gradcheck, losses, nets
from mobonet.flowdata import flow_gradient_magnitude, synth_dataset
from mobonet.tensor import Tensor
from mobonet.training import TrainConfig, predict_boundaries, refine_flows, train_boundary, train_fusion
from oracles import ap_oracle, bce_oracle, bpl_oracle, epe_oracle, optimal_matching

# tolerances and budgets
OP_GRAD_TOL = 1e-4
OP_GRAD_INSTANCES = 20
NET_GRAD_TOL = 1e-3
GRAD_SUITE_SECONDS = 120
LOSS_ORACLE_TOL = 1e-12
LOSS_ORACLE_INSTANCES = 50
BOUNDARY_AP_TARGET = 0.85
BOUNDARY_SECONDS = 15 * 60
EPE_RATIO_TARGET = 0.8
FUSION_SECONDS = 10 * 60

# desk-scale experiment setup
EXTENT = 64
TRAIN_COUNT, TEST_COUNT = 200, 50
TRAIN_SEED, TEST_SEED = 0, 10_000
FLOW_NOISE = 0.5
BOUNDARY_RUN = TrainConfig(iterations=2000, batch_size=8, base_lr=5e-3, divisor=1.0, seed=0, augment_prob=0.5)
FUSION_RUN = TrainConfig(iterations=1000, batch_size=2, base_lr=None, divisor=1.0, seed=0)

# expected layer outputs at full width, 320x448 input: name -> (height, width, channels)
LAYER_TABLE = {
    "conv1,2": (320, 448, 64),
    "pool1": (160, 224, 64),
    "conv3,4": (160, 224, 128),
    "pool2": (80, 112, 128),
    "conv5,6": (80, 112, 256),
    "pool3": (40, 56, 256),
    "conv7,8": (40, 56, 512),
    "pool4": (20, 28, 512),
    "deconv5": (40, 56, 256),
    "refine-1": (40, 56, 256),
    "deconv4": (80, 112, 128),
    "refine-2": (80, 112, 128),
    "deconv3": (160, 224, 64),
    "refine-3": (160, 224, 64),
    "deconv2": (320, 448, 32),
    "refine-4": (320, 448, 32),
}


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# --- 1. gradients -------------------------------------------------------------------------


def _network_gradient_error(seed=0, entries=3):
    """Finite differences on sampled parameter entries of a width-1/8 network, 32x32 input."""
    rng = np.random.default_rng(seed)
    net = nets.build_refinenet(nets.RefineNetConfig(32, 32, 9, 0.125), seed=seed)
    # a random head so gradient reaches every layer, and random biases: with zero
    # biases a dead input region puts pre-activations exactly on the ReLU kink
    net.params["head.weight"] = Tensor(rng.normal(0, 0.5, net.params["head.weight"].shape), requires_grad=True)
    for name, p in net.params.items():
        if name.endswith(".bias"):
            net.params[name] = Tensor(rng.normal(0, 0.1, p.shape), requires_grad=True)
    x = Tensor(rng.random((1, 9, 32, 32)))
    gt = (rng.random((1, 1, 32, 32)) < 0.1).astype(np.float64)

    def loss():
        return losses.class_balanced_bce(net.forward(x), gt)

    return gradcheck.check_gradients(loss, net.parameters(), max_entries=entries, rng=rng)


def test_criterion_1_gradient_suite(record):
    start = time.perf_counter()
    checks = gradcheck.default_op_checks(instances=OP_GRAD_INSTANCES, seed=0)
    worst_op = max(checks, key=lambda c: c.max_rel_error)
    net_err = _network_gradient_error()
    elapsed = time.perf_counter() - start
    ok = (
        worst_op.max_rel_error <= OP_GRAD_TOL
        and all(c.instances >= OP_GRAD_INSTANCES for c in checks)
        and net_err <= NET_GRAD_TOL
        and elapsed <= GRAD_SUITE_SECONDS
    )
    record(1, ok, f"{len(checks)} ops, worst {worst_op.name} {worst_op.max_rel_error:.2e}; network {net_err:.2e}; {elapsed:.1f}s")
    assert ok


# --- 2. shapes -----------------------------------------------------------------------------


def test_criterion_2_table_shapes(record):
    net = nets.build_refinenet(nets.RefineNetConfig(), seed=0, dtype=np.float32)
    trace = {}
    y = net.forward(Tensor(np.zeros((1, 9, 320, 448), np.float32)), trace)
    bad = [n for n, (h, w, c) in LAYER_TABLE.items() if trace[n].shape != (1, c, h, w)]
    ok = not bad and y.shape == (1, 1, 320, 448)
    record(2, ok, f"{len(LAYER_TABLE) - len(bad)}/{len(LAYER_TABLE)} table cells match" + (f"; mismatched {bad}" if bad else ""))
    assert ok


# --- 3. loss oracles ---------------------------------------------------------------------


def test_criterion_3_loss_oracles(record):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(LOSS_ORACLE_INSTANCES):
        h, w = rng.integers(2, 9, 2)
        p = rng.uniform(1e-3, 1 - 1e-3, (h, w))
        y = (rng.random((h, w)) < rng.uniform(0.05, 0.6)).astype(int)
        worst = max(worst, _rel(losses.class_balanced_bce(Tensor(p), y).item(), bce_oracle(p, y)))
        f, g = rng.normal(0, 2, (1, 2, h, w)), rng.normal(0, 2, (1, 2, h, w))
        worst = max(worst, _rel(losses.flow_loss(Tensor(f), g).item(), epe_oracle(f, g) + bpl_oracle(f, g)))
    hand = losses.class_balanced_bce(Tensor(np.full((2, 2), 0.5)), np.array([[1, 0], [0, 0]])).item()
    ok = worst <= LOSS_ORACLE_TOL and f"{hand:.6g}" == "1.03972"
    record(3, ok, f"{LOSS_ORACLE_INSTANCES} instances, worst relative {worst:.1e}; hand case {hand:.6g}")
    assert ok


# --- 4 and 5. desk-scale experiments --------------------------------------------------------


@pytest.fixture(scope="module")
def desk_data():
    train = synth_dataset(TRAIN_COUNT, EXTENT, EXTENT, seed=TRAIN_SEED, flow_noise=FLOW_NOISE)
    test = synth_dataset(TEST_COUNT, EXTENT, EXTENT, seed=TEST_SEED, flow_noise=FLOW_NOISE)
    return train, test


@pytest.fixture(scope="module")
def boundary_run(desk_data):
    train, test = desk_data
    start = time.perf_counter()
    net = nets.build_refinenet(nets.RefineNetConfig(EXTENT, EXTENT, 9, 0.125), seed=0, dtype=np.float32)
    train_boundary(net, train, BOUNDARY_RUN)
    probs = predict_boundaries(net, test)
    ap = ev.dataset_ap(probs, [s.gt_boundary for s in test])
    return net, ap, time.perf_counter() - start


def gradient_baseline_maps(samples):
    """Flow-gradient magnitude of the noisy forward flow, squashed monotonically into [0, 1)."""
    return [1.0 - np.exp(-flow_gradient_magnitude(s.fwd_flow)) for s in samples]


def test_criterion_4_boundary_experiment(record, desk_data, boundary_run):
    _, test = desk_data
    _, ap, elapsed = boundary_run
    baseline = ev.dataset_ap(gradient_baseline_maps(test), [s.gt_boundary for s in test])
    ok = ap >= BOUNDARY_AP_TARGET and ap > baseline and elapsed <= BOUNDARY_SECONDS
    record(4, ok, f"test AP {ap:.4f} (target >= {BOUNDARY_AP_TARGET}), gradient baseline {baseline:.4f}, {elapsed:.0f}s")
    assert ok


def test_criterion_5_fusion_experiment(record, desk_data, boundary_run):
    train, test = desk_data
    bnet = boundary_run[0]
    start = time.perf_counter()
    fnet = nets.build_fusion_net(nets.FusionNetConfig(), seed=0, dtype=np.float32)
    train_fusion(fnet, train, predict_boundaries(bnet, train), FUSION_RUN)
    refined = refine_flows(fnet, [s.fwd_flow for s in test], predict_boundaries(bnet, test))
    elapsed = time.perf_counter() - start
    gt = [s.gt_flow for s in test]
    before = ev.epe_stats([s.fwd_flow for s in test], gt)
    after = ev.epe_stats(refined, gt)
    ok = after <= EPE_RATIO_TARGET * before and elapsed <= FUSION_SECONDS
    record(5, ok, f"EPE {before:.4f} -> {after:.4f} (ratio {after / before:.3f}, target <= {EPE_RATIO_TARGET}), {elapsed:.0f}s")
    assert ok


# --- 6. identity ------------------------------------------------------------------------------


def test_criterion_6_zero_head_identity(record, tmp_path):
    fnet = nets.build_fusion_net(nets.FusionNetConfig(), seed=5, dtype=np.float32)
    samples = synth_dataset(3, 32, 32, seed=20)
    paths = []
    for i, s in enumerate(samples):
        flowio.save_flo(tmp_path / f"in{i}.flo", s.fwd_flow)
        paths.append(tmp_path / f"in{i}.flo")
    flows = [flowio.load_flo(p) for p in paths]
    maps = [np.random.default_rng(i).random((32, 32)) for i in range(3)]
    same = True
    for i, f in enumerate(refine_flows(fnet, flows, maps)):
        flowio.save_flo(tmp_path / f"out{i}.flo", f.astype(np.float32))
        same &= (tmp_path / f"out{i}.flo").read_bytes() == paths[i].read_bytes()
    record(6, same, "refined .flo files bit-identical to inputs" if same else "refined .flo differs from input")
    assert same


# --- 7. evaluation oracles -------------------------------------------------------------------


def test_criterion_7_evaluation_oracles(record):
    rng = np.random.default_rng(7)
    ap_equal = 0
    for _ in range(10):
        prob = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], (8, 8))
        gt = np.zeros((8, 8), bool)
        gt.flat[rng.choice(64, int(rng.integers(1, 10)), replace=False)] = True
        tol = float(rng.choice([0.68, 1.0, 1.5]))
        cfg = ev.EvalConfig(nms=False, tol_frac=tol / np.hypot(8, 8))
        got = ev.average_precision(ev.pr_curve([prob], [gt], cfg))
        ap_equal += got == ap_oracle(prob, gt, cfg.thresholds, ev.image_tolerance((8, 8), cfg.tol_frac))
    match_equal = total = 0
    for _ in range(300):
        pred = np.zeros((7, 7), bool)
        gt = np.zeros((7, 7), bool)
        pred.flat[rng.choice(49, int(rng.integers(0, 11)), replace=False)] = True
        gt.flat[rng.choice(49, int(rng.integers(0, 11)), replace=False)] = True
        tol = float(rng.choice([0.68, 1.0, 1.5, 2.0, 3.0]))
        match_equal += ev.match_boundaries(pred, gt, tol) == optimal_matching(pred, gt, tol)
        total += 1
    ok = ap_equal == 10 and match_equal == total
    record(7, ok, f"AP exact on {ap_equal}/10; matching optimal on {match_equal}/{total}")
    assert ok


# --- 8. round-trips ----------------------------------------------------------------------------


def _pr_table_run(seed):
    data = synth_dataset(3, 32, 32, seed=seed)
    net = nets.build_refinenet(nets.RefineNetConfig(32, 32, 9, 0.125), seed=seed, dtype=np.float32)
    train_boundary(net, data, TrainConfig(iterations=5, batch_size=2, base_lr=5e-3, seed=seed))
    probs = predict_boundaries(net, data)
    return ev.format_pr_table(ev.pr_curve(probs, [s.gt_boundary for s in data]))


def test_criterion_8_round_trips(record, tmp_path):
    flow = np.random.default_rng(8).standard_normal((24, 40, 2)).astype(np.float32)
    flo_ok = flowio.read_flo(flowio.write_flo(flow)).tobytes() == flow.tobytes()
    raw = flowio.write_flo(flow)
    flo_ok &= flowio.write_flo(flowio.read_flo(raw)) == raw

    net = nets.build_refinenet(nets.RefineNetConfig(32, 32, 9, 0.125), seed=8, dtype=np.float32)
    ckpt.save_checkpoint(tmp_path / "a.ckpt", net)
    back, _ = ckpt.load_checkpoint(tmp_path / "a.ckpt", np.float32)
    ckpt.save_checkpoint(tmp_path / "b.ckpt", back)
    ck_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ck_ok &= all(back.params[k].data.tobytes() == v.data.tobytes() for k, v in net.params.items())

    table_ok = _pr_table_run(8) == _pr_table_run(8)
    ok = flo_ok and ck_ok and table_ok
    record(8, ok, f".flo {'ok' if flo_ok else 'FAIL'}, checkpoint {'ok' if ck_ok else 'FAIL'}, PR table {'stable' if table_ok else 'UNSTABLE'}")
    assert ok

