"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The end-to-end criteria train real models; expect the module to take
tens of minutes on CPU. Heavy artifacts (the jointly trained model, the
individual-only baseline, their evaluations) are built once per session
and shared.
"""

import math
import time

import numpy as np
import pytest

from coopbev.autodiff import Tensor, mul, sub, sum_all
from coopbev.boxes import DetectionBox
from coopbev.comms import ChannelModel, LossyChannel, decode_message, encode_message
from coopbev.config import default_config, config_hash
from coopbev.detection import train_joint, snapshot
from coopbev.errors import CorruptPayload, MalformedMessage, Truncated
from coopbev.experiments import build_samples, base_grid, evaluate_model, run_ablate
from coopbev.fusion import (
    compute_weight_map,
    forward_dual,
    fuse_maxout,
    init_fusion_params,
    reduce_to_single_channel,
)
from coopbev.geometry import (
    BEVFeatureMap,
    GridSpec,
    OverlapMask,
    Pose2D,
    invert_affine,
    relative_transform,
    warp_tensor,
)
from coopbev.gradchecks import SCENARIOS, run_check
from coopbev.metrics import average_precision

from test_boxes_metrics import ap_oracle, far_apart_gts, mc_iou, random_box
from test_geometry import warp_oracle


def report(criterion: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {criterion}" + (f" :: {detail}" if detail else ""))
    assert ok, f"{criterion}: {detail}"


# -- 1. parameter count ----------------------------------------------------------

def test_criterion_1_parameter_count():
    t0 = time.time()
    params = init_fusion_params(256, np.random.default_rng(0))
    n = params.n_params()
    elapsed = time.time() - t0
    report("1 parameter-count (C=256 fusion net in [125k, 140k])",
           125_000 <= n <= 140_000 and elapsed < 1.0,
           f"n={n}, {elapsed:.2f}s")


# -- 2. gradient suite -----------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.time()
    seeds = list(range(20))
    failures = []
    worst = {}
    for name in SCENARIOS:
        res = run_check(name, seeds)
        worst[name] = res.max_rel_err
        if not res.ok:
            failures.append(f"{name}={res.max_rel_err:.2e}")
    elapsed = time.time() - t0
    top = max(worst, key=worst.get)
    report("2 gradient suite (every op < 1e-4, end-to-end < 1e-3, 20 seeds)",
           not failures and elapsed < 120.0,
           f"worst {top}={worst[top]:.2e}, {elapsed:.1f}s" +
           (f", failures: {failures}" if failures else ""))


# -- 3. fusion invariants --------------------------------------------------------

def test_criterion_3_fusion_invariants():
    t0 = time.time()
    ok = True
    detail = ""
    for seed in range(50):
        rng = np.random.default_rng([21, seed])
        c = int(rng.integers(2, 6))
        h = int(rng.integers(6, 14))
        w = int(rng.integers(6, 14))
        grid = GridSpec(h, w, 1.0)
        ego = BEVFeatureMap(Tensor(rng.normal(size=(c, h, w))), Pose2D(), grid)
        warped = BEVFeatureMap(Tensor(rng.normal(size=(c, h, w))), Pose2D(), grid)
        params = init_fusion_params(
            c, rng,
            reduce_mode=str(rng.choice(["conv", "mean", "max"])),
            layers=int(rng.choice([1, 2, 3])),
            kernel=int(rng.choice([1, 3, 5])))
        params.set_mode("eval")
        mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
        overlap = OverlapMask(mask)

        # individual-mode bypass is bit-identical
        out = forward_dual(ego, None, None, params)
        if out is not ego.data:
            ok, detail = False, f"seed {seed}: bypass returned a copy"
            break

        coop = forward_dual(ego, warped, overlap, params)
        off = ~mask
        if not np.array_equal(coop.data[:, off], ego.data.data[:, off]):
            ok, detail = False, f"seed {seed}: off-overlap cells differ from individual mode"
            break

        phi = reduce_to_single_channel(ego, warped, params)
        wm = compute_weight_map(phi, overlap, params)
        m = wm.normalized.data[0]
        if not np.all(m[off] == 0.0):
            ok, detail = False, f"seed {seed}: weight map nonzero off-overlap"
            break
        on = m[mask]
        if on.size and (on.min() < 0.0 or on.max() > 1.0):
            ok, detail = False, f"seed {seed}: weights outside [0,1]"
            break
        if on.size and not np.all(on + (1.0 - on) == 1.0):
            ok, detail = False, f"seed {seed}: complementary weights do not sum to 1"
            break
    elapsed = time.time() - t0
    report("3 fusion invariants (complementarity, masking, bypass; 50 seeds)",
           ok and elapsed < 60.0, detail or f"{elapsed:.1f}s")


# -- 4. gradient preservation ----------------------------------------------------

def test_criterion_4_gradient_preservation():
    t0 = time.time()
    c, h, w = 2, 10, 12
    grid = GridSpec(h, w, 1.0)
    ego = BEVFeatureMap(Tensor(np.full((c, h, w), 5.0)), Pose2D(), grid)
    step = np.zeros((c, h, w))
    step[0, :, w // 2:] = 1.0
    overlap = OverlapMask(np.ones((h, w), dtype=bool))

    maxout_in = Tensor(step.copy(), requires_grad=True)
    out = fuse_maxout(ego, BEVFeatureMap(maxout_in, Pose2D(), grid), overlap)
    sum_all(out).backward()
    maxout_zero = np.all(maxout_in.grad == 0.0)

    params = init_fusion_params(c, np.random.default_rng(4))
    params.set_mode("eval")
    warped = BEVFeatureMap(Tensor(step.copy()), Pose2D(), grid)
    wm = compute_weight_map(reduce_to_single_channel(ego, warped, params), overlap, params)
    m = wm.normalized.data[0]
    blend_in = Tensor(step.copy(), requires_grad=True)
    blend2 = mul(blend_in, sub(Tensor(np.ones((1, h, w))), wm.normalized.detach()))
    sum_all(blend2).backward()
    comp_ok = all(np.allclose(blend_in.grad[ch], 1.0 - m, atol=1e-12) for ch in range(c))
    alive = np.all((1.0 - m)[m < 1.0] > 0.0) and np.any(m < 1.0)
    elapsed = time.time() - t0
    report("4 gradient preservation (maxout dead, complementary 1-m alive)",
           maxout_zero and comp_ok and alive and elapsed < 10.0,
           f"{elapsed:.1f}s")


# -- 5. geometry oracles ---------------------------------------------------------

def test_criterion_5_geometry_oracles():
    t0 = time.time()
    ok = True
    detail = ""

    for seed in range(6):
        rng = np.random.default_rng([5, seed])
        src = rng.normal(size=(2, 7, 6))
        ang = rng.uniform(-0.9, 0.9)
        ca, sa = math.cos(ang), math.sin(ang)
        a = np.array([[ca, -sa, rng.uniform(-2, 2)], [sa, ca, rng.uniform(-2, 2)]])
        out, mask = warp_tensor(Tensor(src), a)
        exp_out, exp_mask = warp_oracle(src, a, (7, 6))
        if np.abs(out.data - exp_out).max() >= 1e-6 or not np.array_equal(mask, exp_mask):
            ok, detail = False, f"warp oracle mismatch at seed {seed}"
            break

    if ok:
        src = np.random.default_rng(0).normal(size=(1, 5, 5))
        ident, imask = warp_tensor(Tensor(src), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        trans, tmask = warp_tensor(Tensor(src), np.array([[1.0, 0, 0], [0, 1.0, 1.0]]))
        grid = GridSpec(16, 8, 1.0)
        rot = relative_transform(Pose2D(0, 0, math.pi / 2), Pose2D(), grid)[:, :2]
        ok = (np.array_equal(ident.data, src) and imask.all()
              and np.allclose(trans.data[:, :, 1:], src[:, :, :-1], atol=1e-12)
              and not tmask[:, 0].any()
              and np.allclose(rot, [[0, -1], [1, 0]], atol=1e-12)
              and abs(abs(np.linalg.det(rot)) - 1.0) < 1e-12)
        detail = "" if ok else "identity/translation/rotation case failed"

    if ok:
        h, w = 32, 16
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        smooth = 0.5 + 0.4 * np.sin(2 * np.pi * ii / h) * np.cos(2 * np.pi * jj / w)
        ca, sa = math.cos(0.25), math.sin(0.25)
        a = np.array([[ca, -sa, 1.3], [sa, ca, -0.7]])
        fwd, _ = warp_tensor(Tensor(smooth[None]), a)
        back, mask2 = warp_tensor(fwd, invert_affine(a))
        interior = np.zeros((h, w), dtype=bool)
        interior[6:-6, 6:-6] = True
        sel = interior & mask2
        err = np.abs(back.data[0][sel] - smooth[sel]).max()
        ok = err < 0.1
        detail = f"roundtrip interior err {err:.3f}"
    elapsed = time.time() - t0
    report("5 geometry oracles (warp vs brute force, cases, roundtrip)",
           ok and elapsed < 60.0, detail + f", {elapsed:.1f}s")


# -- 6. metric oracles -----------------------------------------------------------

def test_criterion_6_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(6)
    worst_iou_gap = 0.0
    from coopbev.boxes import rotated_iou
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        gap = abs(rotated_iou(a, b) - mc_iou(a, b, rng, n=100_000))
        worst_iou_gap = max(worst_iou_gap, gap)
    iou_ok = worst_iou_gap < 0.01

    ap_ok = True
    from test_boxes_metrics import TestAveragePrecision
    case_maker = TestAveragePrecision()
    for seed in range(100):
        case_rng = np.random.default_rng([6, seed])
        preds, gts = case_maker._random_case(case_rng)
        for thr in (0.5, 0.7):
            got = average_precision(preds, gts, thr)
            want = ap_oracle(preds, gts, thr)
            if abs(got - want) > 1e-12:
                ap_ok = False
                break

    gts = far_apart_gts(2)
    preds = [DetectionBox(gts[0].x, 0, 2, 4, gts[0].theta, score=0.9),
             DetectionBox(12.0, 10.0, 2, 4, 0.0, score=0.8),
             DetectionBox(gts[1].x, 0, 2, 4, gts[1].theta, score=0.7)]
    worked = abs(average_precision([preds], [gts], 0.5) - 5.0 / 6.0) < 1e-12
    elapsed = time.time() - t0
    report("6 metric oracles (IoU vs Monte-Carlo, AP vs enumeration, 5/6 example)",
           iou_ok and ap_ok and worked and elapsed < 120.0,
           f"worst IoU gap {worst_iou_gap:.4f}, {elapsed:.1f}s")


# -- 7. wire format --------------------------------------------------------------

def test_criterion_7_wire_format():
    t0 = time.time()
    rng = np.random.default_rng(7)
    pose = Pose2D(3.0, -1.0, 0.4)
    grid = GridSpec(6, 4, 0.5, pose)
    fmap = BEVFeatureMap(Tensor(rng.normal(size=(3, 6, 4)).astype(np.float32)), pose, grid)
    blob = encode_message(fmap, sender_id=9, timestamp_us=777)
    msg = decode_message(blob)
    roundtrip = (msg.sender_id == 9 and msg.timestamp_us == 777 and msg.pose == pose
                 and msg.payload.tobytes() == fmap.data.data.tobytes())

    agnostic = encode_message(fmap, 9, 777) == encode_message(fmap, 9, 777)

    corrupt = truncated = malformed = False
    flipped = bytearray(blob)
    flipped[-10] ^= 0x04
    try:
        decode_message(bytes(flipped))
    except CorruptPayload:
        corrupt = True
    try:
        decode_message(blob[:10])
    except Truncated:
        truncated = True
    try:
        decode_message(b"XICP" + blob[4:])
    except MalformedMessage:
        malformed = True

    chan = LossyChannel(ChannelModel(drop_prob=0.3, base_latency_ms=5.0,
                                     jitter_ms=2.0, seed=42))
    n = 10_000
    for i in range(n):
        chan.send(b"p", float(i), 1)
    frac = len(chan.step(float(n) + 100.0)) / n
    frac_ok = abs(frac - 0.7) < 0.02
    elapsed = time.time() - t0
    report("7 wire format (roundtrip, error taxonomy, agnostic bytes, drop rate)",
           roundtrip and agnostic and corrupt and truncated and malformed
           and frac_ok and elapsed < 30.0,
           f"delivered {frac:.3f} vs 0.7, {elapsed:.1f}s")


# -- 8. desk-scale end-to-end ----------------------------------------------------

@pytest.fixture(scope="session")
def desk_runs():
    cfg = default_config()
    t0 = time.time()
    samples, _ = build_samples(cfg, cfg.scene, "train", cfg.train.n_scenes)
    joint_model, _, _ = train_joint(samples, base_grid(cfg), cfg.model, cfg.train,
                                    cfg.master_seed)
    joint_time = time.time() - t0

    ind_cfg = default_config()
    ind_cfg.train.loss_balance = 1.0
    ind_model, _, _ = train_joint(samples, base_grid(ind_cfg), ind_cfg.model,
                                  ind_cfg.train, ind_cfg.master_seed)

    results = evaluate_model(cfg, joint_model)
    ind_only = evaluate_model(ind_cfg, ind_model, modes=("individual",))
    return {"cfg": cfg, "results": results, "ind_only": ind_only["individual"],
            "joint_time_s": joint_time}


def test_criterion_8_end_to_end(desk_runs):
    r = desk_runs["results"]
    ap = {m: 100.0 * res.ap_50 for m, res in r.items()}
    ap_ind_only = 100.0 * desk_runs["ind_only"].ap_50
    t = desk_runs["joint_time_s"]

    a = ap["cooperative"] >= ap["individual"] + 5.0
    b = ap["cooperative"] >= ap["maxout_fusion"]
    c = abs(ap["individual"] - ap_ind_only) <= 3.0
    d = ap["cooperative"] >= ap["late_fusion"] - 2.0
    detail = (f"coop={ap['cooperative']:.1f} ind={ap['individual']:.1f} "
              f"maxout={ap['maxout_fusion']:.1f} late={ap['late_fusion']:.1f} "
              f"ind-only={ap_ind_only:.1f} train={t/60:.1f}min")
    report("8a cooperative beats individual by >= 5 AP points", a, detail)
    report("8b complementary >= maxout fusion", b, detail)
    report("8c joint individual within 3 points of individual-only", c, detail)
    report("8d cooperative >= late fusion - 2 points", d, detail)
    report("8 training wall time under 15 min", t < 900.0, f"{t/60:.1f} min")


# -- 9. ablation harness ---------------------------------------------------------

def test_criterion_9_ablation_harness(tmp_path):
    t0 = time.time()
    cfg = default_config()
    rows = run_ablate(cfg, tmp_path / "ablate", axis="all")
    by_axis = {}
    for row in rows:
        by_axis.setdefault(row["axis"], []).append(row)
    cardinalities = {ax: len(v) for ax, v in by_axis.items()}
    expected = {"cw": 2, "reduce": 3, "layers": 3, "kernel": 3}
    complete = all("ap_50" in row and row["config_hash"] for row in rows)
    unique_hashes = len({row["config_hash"] for row in rows}) == len(rows)
    elapsed = time.time() - t0
    # numeric orderings are reported, not asserted
    for ax, cells in by_axis.items():
        ranked = sorted(cells, key=lambda r: -r["ap_50"])
        print(f"    ablation {ax}: " +
              ", ".join(f"{c['value']}={c['ap_50']:.3f}" for c in ranked))
    report("9 ablation harness (cardinalities 2/3/3/3, complete cells)",
           cardinalities == expected and complete and unique_hashes
           and elapsed < 2700.0,
           f"{cardinalities}, {elapsed/60:.1f} min")


# -- 10. determinism -------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg = default_config()
    cfg.train.n_scenes = 40
    cfg.train.epochs = 1
    cfg.eval.n_scenes = 10
    samples, _ = build_samples(cfg, cfg.scene, "train", cfg.train.n_scenes)

    def run():
        model, adam, _ = train_joint(samples, base_grid(cfg), cfg.model, cfg.train,
                                     cfg.master_seed)
        ck = snapshot(model, adam, config_hash(cfg), cfg.master_seed)
        results = evaluate_model(cfg, model)
        return ck, {m: r.result_hash() for m, r in results.items()}

    ck1, h1 = run()
    ck2, h2 = run()
    bits_equal = ck1.blobs.keys() == ck2.blobs.keys() and all(
        np.array_equal(ck1.blobs[k], ck2.blobs[k]) for k in ck1.blobs)
    report("10 determinism (bit-identical checkpoints, identical result hashes)",
           bits_equal and h1 == h2,
           f"eval hashes {sorted(h1.values())[:2]}...")
