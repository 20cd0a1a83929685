"""Two-stage training: pixel-branch pretraining, then the full objective.

All randomness is derived from (seed, stage, epoch, step, slot) counters, so a
resumed run replays the exact step sequence of an uninterrupted one and no RNG
state needs checkpointing. Stage 1 runs only the backbone and pixel branch;
lesion and patient parameters stay untouched at their initialization.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import augment
from .config import ExperimentConfig, deterministic_mode
from .dataset import liver_crop, read_split
from .labels import derive_patient_labels
from .losses import (
    LossBreakdown,
    NonFiniteLossError,
    loss_consistency,
    loss_lesion,
    loss_patient,
    loss_pixel,
    total_loss,
)
from .matching import match_queries
from .model import LesionPatientNet, mode_channels, stack_to_tensor
from .phantom import CaseRecord
from .pointsample import sample_points, verify_foreground_guarantee
from .volume import EmptyRegionError, LesionInstance

LOG_NAME = "train_log.jsonl"
LAST_CKPT = "last.pt"
BEST_CKPT = "best.pt"


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer counters."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint32)[0])


def set_determinism(seed: int, num_threads: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, num_threads))
    if deterministic:
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainSample:
    x: torch.Tensor  # (C, X, Y, Z) normalized input
    semantic: torch.Tensor  # (X, Y, Z) uint8 labels
    targets: list[LesionInstance]
    patient_labels: np.ndarray
    shape: tuple[int, int, int]


def prepare_sample(
    rec: CaseRecord, cfg: ExperimentConfig, mode: str, seed: int, train: bool = True
) -> TrainSample:
    """Liver-crop a case and (for training) augment and patch it."""
    cropped, _ = liver_crop(rec, cfg.train.crop_margin_mm)
    if train:
        cropped = augment(cropped, seed, cfg.train.augment_policy())
    targets = [
        inst
        for inst in cropped.instances
        if inst.type_id != 0 and inst.voxel_count >= cfg.train.min_target_voxels
    ]
    return TrainSample(
        x=stack_to_tensor(cropped, mode, cfg.model),
        semantic=torch.from_numpy(np.ascontiguousarray(cropped.semantic.data)),
        targets=targets,
        patient_labels=derive_patient_labels(targets),
        shape=cropped.semantic.shape,
    )


@dataclass
class StepStats:
    breakdown: LossBreakdown
    n_anchor_queries: int = 0
    fes_targets_checked: int = 0


def case_losses(
    net: LesionPatientNet,
    sample: TrainSample,
    cfg: ExperimentConfig,
    stage1: bool,
    seed: int,
) -> tuple[dict, StepStats]:
    """Forward one sample and compute every active loss component."""
    obj = cfg.objective
    out = net.forward_case(sample.x, stage1=stage1, use_anchors=obj.anchor_queries)
    components = {"l_pixel": loss_pixel(out.pixel_logits, sample.semantic)}
    stats = StepStats(breakdown=LossBreakdown())
    if stage1:
        return components, stats
    stats.n_anchor_queries = len(out.anchors)
    fg_points = obj.fg_points if obj.fes else 0
    shape = out.padded_shape  # targets live on the unpadded grid, contained in it
    match_pts = sample_points(
        out.mask_logits, sample.targets, shape, obj.num_points, fg_points,
        derive_seed(seed, 1), obj.importance_oversample, obj.importance_beta,
    )
    match = match_queries(
        out.class_logits, out.mask_logits, sample.targets, match_pts, obj, shape
    )
    matched_targets = [sample.targets[t] for t in match.target_indices]
    loss_pts = sample_points(
        out.mask_logits[match.query_indices] if match.num_pairs else None,
        matched_targets, shape, obj.num_points, fg_points,
        derive_seed(seed, 2), obj.importance_oversample, obj.importance_beta,
    )
    stats.fes_targets_checked = verify_foreground_guarantee(
        loss_pts, matched_targets, shape, fg_points
    )
    l_class, l_mask = loss_lesion(
        out.class_logits, out.mask_logits, match, loss_pts, sample.targets, shape,
        obj.no_object_weight,
    )
    components["l_lesion_class"] = l_class
    components["l_lesion_mask"] = l_mask
    components["l_patient"] = loss_patient(out.patient_logits, sample.patient_labels)
    if obj.consistency:
        components["l_consist"] = loss_consistency(out.class_logits, out.patient_logits)
    return components, stats


def _mean_components(per_case: list[dict]) -> dict:
    keys = set()
    for comp in per_case:
        keys.update(comp)
    return {k: sum(c[k] for c in per_case if k in c) / sum(1 for c in per_case if k in c)
            for k in keys}


def lesion_patient_grad_norm(net: LesionPatientNet) -> float:
    """Gradient norm over every parameter outside the backbone/pixel path."""
    backbone = {"encoder", "decoder", "pixel_fuse", "pixel_head"}
    total = 0.0
    for name, p in net.named_parameters():
        if name.split(".")[0] in backbone:
            continue
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


@dataclass
class TrainResult:
    run_dir: Path
    last_checkpoint: Path
    best_checkpoint: Path
    history: list[dict] = field(default_factory=list)
    fes_targets_checked: int = 0
    fes_violations: int = 0


def save_checkpoint(path: Path, net, optimizer, cfg: ExperimentConfig, mode: str,
                    stage: int, epoch: int, best_val: float) -> None:
    torch.save(
        {
            "format": "planseg-checkpoint-v1",
            "tool_version": __version__,
            "config_text": cfg.raw_text,
            "config_dict": cfg.to_dict(),
            "mode": mode,
            "stage": stage,
            "epoch": epoch,
            "best_val": best_val,
            "model_state": net.state_dict(),
            "optimizer_state": optimizer.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "planseg-checkpoint-v1":
        raise ValueError(f"{path} is not a recognized checkpoint")
    return payload


def build_model_from_checkpoint(path) -> tuple[LesionPatientNet, ExperimentConfig, str]:
    from .config import config_from_dict

    payload = load_checkpoint(path)
    cfg = config_from_dict(
        _strip_defaults(payload["config_dict"]), raw_text=payload.get("config_text", "")
    )
    net = LesionPatientNet(cfg.model, mode_channels(payload["mode"]))
    net.load_state_dict(payload["model_state"])
    net.eval()
    return net, cfg, payload["mode"]


def _strip_defaults(config_dict: dict) -> dict:
    # config_dict was produced by ExperimentConfig.to_dict(); every key is known
    return {k: v for k, v in config_dict.items() if k in
            ("data", "model", "objective", "train", "infer", "eval")}


def run_training(
    cfg: ExperimentConfig,
    data_dir,
    run_dir,
    mode: str = "DCE",
    stage: str = "both",
    resume: bool = False,
) -> TrainResult:
    """Train on the manifest's train split; returns checkpoint paths and history.

    ``stage`` is "1", "2", or "both". Stage 2 alone requires a checkpoint to
    resume from (normally the stage-1 result in the same run directory).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    tcfg = cfg.train
    set_determinism(tcfg.seed, tcfg.num_threads, deterministic_mode(cfg))

    train_cases = read_split(data_dir, "train")
    val_cases = read_split(data_dir, "val")
    if not train_cases:
        raise ValueError(f"no training cases found under {data_dir}")

    net = LesionPatientNet(cfg.model, mode_channels(mode))
    optimizer = torch.optim.RAdam(net.parameters(), lr=tcfg.learning_rate)

    start_stage, start_epoch, best_val = 1, 0, math.inf
    last_path = run_dir / "checkpoints" / LAST_CKPT
    best_path = run_dir / "checkpoints" / BEST_CKPT
    if resume:
        payload = load_checkpoint(last_path)
        if payload["mode"] != mode:
            raise ValueError(
                f"checkpoint was trained in mode {payload['mode']}, requested {mode}"
            )
        net.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_stage = payload["stage"]
        start_epoch = payload["epoch"]
        best_val = payload["best_val"]

    if stage == "1":
        plan = [(1, tcfg.epochs_stage1)]
    elif stage == "2":
        plan = [(2, tcfg.epochs_stage2)]
        if not resume and start_stage == 1:
            raise ValueError("stage 2 requires --resume from a stage-1 checkpoint")
        if start_stage == 1:
            start_stage, start_epoch, best_val = 2, 0, math.inf
    elif stage == "both":
        plan = [(1, tcfg.epochs_stage1), (2, tcfg.epochs_stage2)]
    else:
        raise ValueError(f"stage must be '1', '2', or 'both', got {stage!r}")

    result = TrainResult(run_dir=run_dir, last_checkpoint=last_path, best_checkpoint=best_path)
    log_path = run_dir / LOG_NAME
    log_fh = open(log_path, "a")
    n = len(train_cases)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    try:
        for stage_num, n_epochs in plan:
            if stage_num < start_stage:
                continue
            first_epoch = start_epoch if stage_num == start_stage else 0
            if stage_num != start_stage:
                best_val = math.inf
            stage1 = stage_num == 1
            for epoch in range(first_epoch, n_epochs):
                perm = np.random.default_rng(
                    derive_seed(tcfg.seed, stage_num, epoch)
                ).permutation(n)
                epoch_stats: list[StepStats] = []
                epoch_breakdowns: list[LossBreakdown] = []
                for step in range(steps_per_epoch):
                    batch_idx = perm[step * tcfg.batch_size : (step + 1) * tcfg.batch_size]
                    optimizer.zero_grad(set_to_none=True)
                    per_case = []
                    for slot, case_i in enumerate(batch_idx):
                        seed = derive_seed(tcfg.seed, stage_num, epoch, step, slot)
                        sample = prepare_sample(train_cases[case_i], cfg, mode, seed)
                        components, stats = case_losses(net, sample, cfg, stage1, seed)
                        per_case.append(components)
                        epoch_stats.append(stats)
                        result.fes_targets_checked += stats.fes_targets_checked
                    total, breakdown = total_loss(
                        _mean_components(per_case), cfg.objective, stage1=stage1
                    )
                    total.backward()
                    optimizer.step()
                    epoch_breakdowns.append(breakdown)
                record = _epoch_record(stage_num, epoch, tcfg, epoch_breakdowns, epoch_stats)
                if stage1:
                    record["lesion_patient_grad_norm"] = lesion_patient_grad_norm(net)
                is_last = epoch == n_epochs - 1
                if (epoch + 1) % tcfg.val_every == 0 or is_last:
                    val_total = _validate(net, val_cases, cfg, mode, stage1)
                    record["val_total"] = val_total
                    if val_total <= best_val:
                        best_val = val_total
                        save_checkpoint(best_path, net, optimizer, cfg, mode,
                                        stage_num, epoch + 1, best_val)
                result.history.append(record)
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
                save_checkpoint(last_path, net, optimizer, cfg, mode,
                                stage_num, epoch + 1, best_val)
            start_epoch = 0
    except NonFiniteLossError as exc:
        log_fh.write(json.dumps({"aborted": str(exc)}) + "\n")
        log_fh.close()
        raise TrainingAborted(
            f"training aborted ({exc}); last good checkpoint: {last_path}"
        ) from exc
    except Exception:
        log_fh.close()
        raise
    log_fh.close()
    if not best_path.exists():
        save_checkpoint(best_path, net, optimizer, cfg, mode, plan[-1][0],
                        plan[-1][1], best_val)
    return result


def _epoch_record(stage_num, epoch, tcfg, breakdowns, stats) -> dict:
    mean = LossBreakdown(
        **{
            f.name: float(np.mean([getattr(b, f.name) for b in breakdowns]))
            for f in dataclasses.fields(LossBreakdown)
        }
    )
    record = {"stage": stage_num, "epoch": epoch, "lr": tcfg.learning_rate}
    record.update(mean.as_dict())
    record["n_anchor_queries_mean"] = float(np.mean([s.n_anchor_queries for s in stats]))
    record["fes_targets_checked"] = int(sum(s.fes_targets_checked for s in stats))
    record["fes_violations"] = 0  # a violation raises and aborts the run
    return record


def _validate(net, val_cases, cfg, mode, stage1) -> float:
    if not val_cases:
        return math.nan
    totals = []
    net.eval()
    with torch.no_grad():
        for i, rec in enumerate(val_cases):
            try:
                sample = prepare_sample(rec, cfg, mode, derive_seed(cfg.train.seed, 99, i),
                                        train=False)
            except EmptyRegionError:
                continue
            components, _ = case_losses(net, sample, cfg, stage1, derive_seed(99, i))
            total, _ = total_loss(components, cfg.objective, stage1=stage1)
            totals.append(float(total))
    net.train()
    return float(np.mean(totals)) if totals else math.nan
