"""Request-model execution shared by the HTTP endpoints and the local CLI."""

from __future__ import annotations

import dataclasses

import numpy as np

from ..datamodel import CLASS_NAMES, NUM_CLASSES, load_record, save_record
from ..losses import LossConfig
from ..metrics import frame_metrics
from ..phantom import generate_dataset
from ..postprocess import clean, verify_topology
from ..segnet import load_segnet
from ..trainer import (
    TrainConfig,
    ablation,
    evaluate,
    grid_search_lambda,
    train,
    train_critic_on_dataset,
)
from .schemas import (
    AblateRequest,
    EvaluateRequest,
    GenerateRequest,
    GridSearchRequest,
    SegmentRequest,
    SegmentResponse,
    TrainCriticRequest,
    TrainRequest,
)


def run_generate(req: GenerateRequest) -> dict:
    entries = generate_dataset(req.out_dir, req.count, seed=req.seed,
                               r_samples=req.r, a_lines=req.a,
                               noise_level=req.noise,
                               frames_per_patient=req.frames_per_patient)
    return {
        "out_dir": req.out_dir,
        "count": len(entries),
        "patients": len({pid for _, pid in entries}),
    }


def run_train_critic(req: TrainCriticRequest) -> dict:
    result = train_critic_on_dataset(
        req.data_dir, req.severity, req.out_path, steps=req.steps,
        batch_size=req.batch_size, lr=req.lr, gp_weight=req.gp_weight, seed=req.seed)
    result.pop("history", None)
    return result


def to_train_config(req: TrainRequest) -> TrainConfig:
    loss = LossConfig(
        lambda_wce=req.loss.lambda_wce, lambda_dice=req.loss.lambda_dice,
        lambda_bp=req.loss.lambda_bp, lambda_ap=req.loss.lambda_ap,
        lambda_bc=req.loss.lambda_bc, epsilon=req.loss.epsilon, b=req.loss.b,
        m=req.loss.m, sigma_kind=req.loss.sigma, gp_weight=req.loss.gp_weight)
    return TrainConfig(
        data_dir=req.data_dir, out_dir=req.out_dir, loss=loss,
        critic_checkpoint=req.critic_checkpoint, lr=req.lr,
        batch_size=req.batch_size, epochs=req.epochs, seed=req.seed,
        split_fractions=tuple(req.split_fractions), augment=req.augment,
        patience=req.patience)


def run_train(req: TrainRequest) -> dict:
    result = train(to_train_config(req))
    out = dataclasses.asdict(result)
    out["history"] = result.history[-5:]
    return out


def run_evaluate(req: EvaluateRequest) -> dict:
    result = evaluate(req.data_dir, req.checkpoint, split_file=req.split_file,
                      split=req.split, postprocess=req.postprocess,
                      out_dir=req.out_dir,
                      exclude_thickened_px=req.exclude_thickened_px)
    return {"aggregate": result["aggregate"], "n_frames": len(result["frames"])}


def run_grid_search(req: GridSearchRequest) -> dict:
    candidates = ({k: tuple(v) for k, v in req.candidates.items()}
                  if req.candidates else None)
    best, trials = grid_search_lambda(to_train_config(req.train),
                                      coords=tuple(req.coords),
                                      candidates=candidates)
    return {"best": dataclasses.asdict(best), "trials": trials}


def run_ablate(req: AblateRequest) -> dict:
    table = ablation(to_train_config(req.train), seeds=tuple(req.seeds),
                     postprocess=req.postprocess)
    return {"table": table}


def run_segment(req: SegmentRequest) -> SegmentResponse:
    image, gt_labels, patient_id = load_record(req.record_path)
    model = load_segnet(req.checkpoint)
    probs = model.predict(image)
    pred = clean(probs) if req.postprocess else probs.argmax_labels()
    counts = {CLASS_NAMES[c]: int(np.count_nonzero(pred.classes == c))
              for c in range(1, NUM_CLASSES + 1)}
    topo = verify_topology(pred).as_dict()
    metrics = None
    if gt_labels is not None:
        fm = frame_metrics(gt_labels, pred, image.pixel_pitch_um)
        metrics = {k: (None if isinstance(v, float) and np.isnan(v) else float(v))
                   for k, v in fm.items() if isinstance(v, (int, float, np.floating))}
    out_path = None
    if req.out_path:
        save_record(req.out_path, image, pred, patient_id=patient_id)
        out_path = req.out_path
    return SegmentResponse(shape=pred.shape, class_counts=counts,
                           topology=topo, metrics=metrics, out_path=out_path)
