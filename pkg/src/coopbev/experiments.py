"""Experiment runner: train / eval / ablate / gradcheck / simulate.

Evaluation compares four modes on the same held-out scenes:

  - individual: ego features only (no message consumed)
  - cooperative: complementary fusion with the FCFS-selected message
  - maxout_fusion: same message, elementwise-max fusion baseline
  - late_fusion: NMS over the union of both vehicles' box outputs

Every artifact is a line-delimited JSON record stamped with the config
hash and scene seeds, plus a human-readable summary table.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import DetectionBox
from .comms import ChannelModel, Deadline, LossyChannel, encode_message, select_partner_fcfs
from .config import ExperimentConfig, config_hash, save_config
from .detection import (
    DetectionModel,
    TrainSample,
    extract_features,
    infer,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    snapshot,
    train_joint,
)
from .errors import ConfigError, NumericalError
from .geometry import BEVFeatureMap, GridSpec, Pose2D, relative_pose
from .gradchecks import CheckResult, run_all
from .metrics import EvalResult, evaluate_detections, late_fusion_baseline
from .scene import SyntheticScene, generate_scene, rasterize_bev, raycast_visible_points

EVAL_MODES = ("individual", "cooperative", "late_fusion", "maxout_fusion")
FRAME_PERIOD_MS = 100.0
_SPLIT_CODES = {"train": 0, "eval": 1, "ablate_train": 2, "ablate_eval": 3, "sim": 4}

ABLATION_AXES: dict[str, tuple[str, list]] = {
    "cw": ("complementary", [True, False]),
    "reduce": ("reduce", ["conv", "mean", "max"]),
    "layers": ("layers", [1, 2, 3]),
    "kernel": ("kernel", [1, 3, 5]),
}


def scene_seed(master: int, split: str, idx: int) -> int:
    ss = np.random.SeedSequence([int(master), _SPLIT_CODES[split], int(idx)])
    return int(ss.generate_state(1)[0])


def base_grid(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(cfg.grid.h, cfg.grid.w, cfg.grid.resolution)


def build_samples(cfg: ExperimentConfig, scene_cfg, split: str, n: int,
                  ) -> tuple[list[TrainSample], list[SyntheticScene]]:
    grid = base_grid(cfg)
    samples: list[TrainSample] = []
    scenes: list[SyntheticScene] = []
    for idx in range(n):
        seed = scene_seed(cfg.master_seed, split, idx)
        scene = generate_scene(scene_cfg, seed)
        ego_pts = raycast_visible_points(scene, scene.ego_pose,
                                         scene_cfg.n_rays, grid.diagonal)
        send_pts = raycast_visible_points(scene, scene.sender_pose,
                                          scene_cfg.n_rays, grid.diagonal)
        samples.append(TrainSample(ego_points=ego_pts, sender_points=send_pts,
                                   sender_pose=scene.sender_pose,
                                   gts=scene.ground_truth(), seed=seed))
        scenes.append(scene)
    return samples, scenes


# -- evaluation -------------------------------------------------------------------

def evaluate_model(cfg: ExperimentConfig, model: DetectionModel,
                   split: str = "eval", n_scenes: int | None = None,
                   modes: tuple[str, ...] = EVAL_MODES) -> dict[str, EvalResult]:
    """Run the four perception modes over held-out scenes."""
    grid = base_grid(cfg)
    dtype = cfg.model.np_dtype
    n = n_scenes if n_scenes is not None else cfg.eval.n_scenes
    chan = LossyChannel(ChannelModel(
        drop_prob=cfg.channel.drop_prob,
        base_latency_ms=cfg.channel.base_latency_ms,
        jitter_ms=cfg.channel.jitter_ms,
        seed=cfg.master_seed))
    deadline = Deadline(cfg.channel.deadline_ms)
    ego_pose = Pose2D(0.0, 0.0, 0.0)
    cfg_hash = config_hash(cfg)

    preds: dict[str, list[list[DetectionBox]]] = {m: [] for m in modes}
    gts: list[list[DetectionBox]] = []
    seeds: list[int] = []
    model.eval()

    for idx in range(n):
        seed = scene_seed(cfg.master_seed, split, idx)
        scene = generate_scene(cfg.eval_scene, seed)
        seeds.append(seed)
        gts.append(scene.ground_truth())

        ego_grid = grid.with_origin(ego_pose)
        sender_grid = grid.with_origin(scene.sender_pose)
        ego_raster = rasterize_bev(
            raycast_visible_points(scene, scene.ego_pose, cfg.eval_scene.n_rays,
                                   grid.diagonal), ego_grid, dtype=dtype)
        sender_raster = rasterize_bev(
            raycast_visible_points(scene, scene.sender_pose, cfg.eval_scene.n_rays,
                                   grid.diagonal), sender_grid, dtype=dtype)

        frame_ms = idx * FRAME_PERIOD_MS
        f_send = extract_features(sender_raster, model, sender_grid,
                                  scene.sender_pose, source_id=1)
        blob = encode_message(f_send, sender_id=1,
                              timestamp_us=int(frame_ms * 1000))
        chan.send(blob, frame_ms, sender_id=1)
        delivered = chan.step(frame_ms + deadline.budget_ms)
        msg = select_partner_fcfs(delivered, deadline, frame_ms, ego_pose,
                                  cfg.channel.comm_range)

        individual = infer(ego_raster, None, model, grid, ego_pose)
        if "individual" in preds:
            preds["individual"].append(individual)
        if "cooperative" in preds:
            preds["cooperative"].append(infer(ego_raster, msg, model, grid, ego_pose))
        if "maxout_fusion" in preds:
            preds["maxout_fusion"].append(
                infer(ego_raster, msg, model, grid, ego_pose, fusion_method="maxout"))
        if "late_fusion" in preds:
            sender_preds = infer(sender_raster, None, model, grid, scene.sender_pose)
            fused = late_fusion_baseline(individual, sender_preds,
                                         relative_pose(scene.sender_pose, ego_pose),
                                         cfg.model.nms_iou)
            fused = [b for b in fused
                     if abs(b.x) <= grid.x_extent and abs(b.y) <= grid.y_extent]
            preds["late_fusion"].append(fused)

    return {m: evaluate_detections(m, preds[m], gts, config_hash=cfg_hash, seeds=seeds)
            for m in modes}


# -- artifact helpers ----------------------------------------------------------------

def _write_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _summary_table(rows: list[dict], columns: list[str]) -> str:
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _prepare_out(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return out


# -- run modes -----------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = _prepare_out(cfg, out_dir)
    cfg_hash = config_hash(cfg)
    samples, _ = build_samples(cfg, cfg.scene, "train", cfg.train.n_scenes)
    t0 = time.time()
    curve: list[dict] = []

    def on_epoch(rec):
        row = rec.to_dict() | {"config_hash": cfg_hash, "seed": cfg.master_seed,
                               "wall_s": round(time.time() - t0, 2)}
        curve.append(row)

    model, adam, _ = train_joint(samples, base_grid(cfg), cfg.model, cfg.train,
                                 cfg.master_seed, on_epoch=on_epoch)
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, snapshot(model, adam, cfg_hash, cfg.master_seed))
    _write_jsonl(out / "loss_curve.jsonl", curve)
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"config_hash: {cfg_hash}\nseed: {cfg.master_seed}\n")
        fh.write(_summary_table(curve, ["epoch", "loss_total", "loss_individual",
                                        "loss_cooperative", "wall_s"]))
    return ckpt_path


def run_eval(cfg: ExperimentConfig, checkpoint: str | Path,
             out_dir: str | Path) -> dict[str, EvalResult]:
    out = _prepare_out(cfg, out_dir)
    model = restore_model(load_checkpoint(checkpoint), cfg)
    results = evaluate_model(cfg, model)
    rows = []
    for mode, res in results.items():
        rows.append(res.to_dict() | {"result_hash": res.result_hash()})
    _write_jsonl(out / "results.jsonl", rows)
    brief = [{"mode": m, "ap_50": f"{r.ap_50:.4f}", "ap_70": f"{r.ap_70:.4f}",
              "hash": r.result_hash()} for m, r in results.items()]
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"config_hash: {config_hash(cfg)}\n")
        fh.write(_summary_table(brief, ["mode", "ap_50", "ap_70", "hash"]))
    return results


def _ablation_cell_config(cfg: ExperimentConfig, knob: str, value) -> ExperimentConfig:
    cell = copy.deepcopy(cfg)
    setattr(cell.model.fusion, knob, value)
    cell.train.n_scenes = cfg.ablate.n_scenes
    cell.train.epochs = cfg.ablate.epochs
    cell.eval.n_scenes = cfg.ablate.n_eval_scenes
    cell.validate()
    return cell


def run_ablate(cfg: ExperimentConfig, out_dir: str | Path,
               axis: str = "all") -> list[dict]:
    """One-knob-at-a-time sweeps; each cell trains and evaluates fresh."""
    if axis != "all" and axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"expected one of {list(ABLATION_AXES)} or 'all'")
    out = _prepare_out(cfg, out_dir)
    axes = list(ABLATION_AXES) if axis == "all" else [axis]
    rows: list[dict] = []
    for ax in axes:
        knob, values = ABLATION_AXES[ax]
        for value in values:
            cell_cfg = _ablation_cell_config(cfg, knob, value)
            cell_hash = config_hash(cell_cfg)
            samples, _ = build_samples(cell_cfg, cell_cfg.scene, "ablate_train",
                                       cell_cfg.train.n_scenes)
            model, _, _ = train_joint(samples, base_grid(cell_cfg), cell_cfg.model,
                                      cell_cfg.train, cell_cfg.master_seed)
            results = evaluate_model(cell_cfg, model, split="ablate_eval",
                                     n_scenes=cell_cfg.eval.n_scenes,
                                     modes=("cooperative",))
            res = results["cooperative"]
            rows.append({
                "axis": ax, "knob": knob, "value": value,
                "config_hash": cell_hash, "ap_50": res.ap_50, "ap_70": res.ap_70,
                "result_hash": res.result_hash(), "seeds": res.seeds,
            })
    _write_jsonl(out / "ablation.jsonl", rows)
    brief = [{"axis": r["axis"], "value": r["value"],
              "ap_50": f"{r['ap_50']:.4f}", "ap_70": f"{r['ap_70']:.4f}",
              "hash": r["config_hash"]} for r in rows]
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"base config_hash: {config_hash(cfg)}\n")
        fh.write(_summary_table(brief, ["axis", "value", "ap_50", "ap_70", "hash"]))
    return rows


def run_gradcheck(cfg: ExperimentConfig, out_dir: str | Path,
                  n_seeds: int = 3) -> list[CheckResult]:
    out = _prepare_out(cfg, out_dir)
    results = run_all(seeds=list(range(n_seeds)))
    _write_jsonl(out / "gradcheck.jsonl", [r.to_dict() for r in results])
    brief = [{"name": r.name, "max_rel_err": f"{r.max_rel_err:.3e}",
              "tolerance": f"{r.tolerance:.0e}", "ok": r.ok} for r in results]
    with open(out / "summary.txt", "w") as fh:
        fh.write(_summary_table(brief, ["name", "max_rel_err", "tolerance", "ok"]))
    if not all(r.ok for r in results):
        bad = [r.name for r in results if not r.ok]
        raise NumericalError(f"gradient checks failed: {bad}")
    return results


def run_simulate(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Scenes plus channel delivery traces, no model involved.

    Messages carry the raw sender raster so traces can be produced
    without a checkpoint.
    """
    out = _prepare_out(cfg, out_dir)
    grid = base_grid(cfg)
    chan = LossyChannel(ChannelModel(
        drop_prob=cfg.channel.drop_prob, base_latency_ms=cfg.channel.base_latency_ms,
        jitter_ms=cfg.channel.jitter_ms, seed=cfg.master_seed))
    deadline = Deadline(cfg.channel.deadline_ms)
    scene_rows: list[dict] = []
    fusion_rows: list[dict] = []
    for idx in range(cfg.eval.n_scenes):
        seed = scene_seed(cfg.master_seed, "sim", idx)
        scene = generate_scene(cfg.scene, seed)
        scene_rows.append(scene.to_record())
        sender_grid = grid.with_origin(scene.sender_pose)
        raster = rasterize_bev(
            raycast_visible_points(scene, scene.sender_pose, cfg.scene.n_rays,
                                   grid.diagonal), sender_grid, dtype=np.float32)
        fmap = BEVFeatureMap(raster, scene.sender_pose, sender_grid, source_id=1)
        frame_ms = idx * FRAME_PERIOD_MS
        chan.send(encode_message(fmap, 1, int(frame_ms * 1000)), frame_ms, 1)
        delivered = chan.step(frame_ms + deadline.budget_ms)
        msg = select_partner_fcfs(delivered, deadline, frame_ms, scene.ego_pose,
                                  cfg.channel.comm_range)
        fusion_rows.append({"frame": idx, "scene_seed": seed,
                            "partner": None if msg is None else msg.sender_id})
    scenes_path = out / "scenes.jsonl"
    trace_path = out / "trace.jsonl"
    _write_jsonl(scenes_path, scene_rows)
    _write_jsonl(trace_path, [r | {"config_hash": config_hash(cfg)} for r in chan.trace])
    _write_jsonl(out / "partners.jsonl", fusion_rows)
    n_drop = sum(1 for r in chan.trace if r["event"] == "drop")
    with open(out / "summary.txt", "w") as fh:
        fh.write(f"config_hash: {config_hash(cfg)}\n"
                 f"scenes: {len(scene_rows)}\n"
                 f"messages sent: {len(chan.trace)}\ndropped: {n_drop}\n")
    return scenes_path, trace_path


def run_experiment(cfg: ExperimentConfig, mode: str, out_dir: str | Path,
                   checkpoint: str | Path | None = None, axis: str = "all",
                   gradcheck_seeds: int = 3):
    """Dispatch a run mode; see the individual run_* functions."""
    if mode == "train":
        return run_train(cfg, out_dir)
    if mode == "eval":
        if checkpoint is None:
            raise ConfigError("eval mode requires a checkpoint path")
        return run_eval(cfg, checkpoint, out_dir)
    if mode == "ablate":
        return run_ablate(cfg, out_dir, axis=axis)
    if mode == "gradcheck":
        return run_gradcheck(cfg, out_dir, n_seeds=gradcheck_seeds)
    if mode == "simulate":
        return run_simulate(cfg, out_dir)
    raise ConfigError(f"unknown mode {mode!r}")
