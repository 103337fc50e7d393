"""Training orchestration: patient-level splits, the main training loop with
the combined loss, critic training on phantom data, evaluation reports, the
greedy lambda grid search, and the loss-term ablation harness."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .augment import AugmentConfig, apply_random
from .critic import (
    CriticNet,
    CriticTrainConfig,
    QualityPairBatch,
    ap_loss,
    load_critic,
    rank_auc,
    save_critic,
    score_batches,
    train_critic,
)
from .datamodel import (
    LabelMap,
    PolarImage,
    labels_to_annotation,
    load_record,
    read_manifest,
)
from .errors import MissingCritic, TooFewPatients
from .losses import LossConfig
from .metrics import aggregate_frames, dice_coef, frame_metrics
from .phantom import perturb_labels
from .postprocess import clean, verify_topology
from .segnet import SegNet, load_segnet, save_segnet

PARTITIONS = ("train", "val", "test")


@dataclass
class TrainConfig:
    data_dir: str
    out_dir: str
    loss: LossConfig = field(default_factory=LossConfig)
    critic_checkpoint: str | None = None
    lr: float = 1e-4
    rmsprop_alpha: float = 0.9
    batch_size: int = 20
    epochs: int = 30
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    patience: int = 10

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@dataclass
class Record:
    image: PolarImage
    labels: LabelMap
    patient_id: str
    name: str


@dataclass
class TrainResult:
    checkpoint: str
    log_csv: str
    split_file: str
    best_val_dice: float
    best_epoch: int
    epochs_run: int
    history: list[dict]


def split_by_patient(entries: list[tuple[str, str]],
                     fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 0) -> dict[str, str]:
    """Random patient-level partition into train/val/test.

    Counts per partition come from largest-remainder rounding of
    fraction * n_patients (so 57 patients at 80/10/10 gives 45/6/6), with
    every positive-fraction partition guaranteed at least one patient.
    """
    patients = sorted({pid for _, pid in entries})
    if len(patients) < 3:
        raise TooFewPatients(f"{len(patients)} patients; need at least 3")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    n = len(patients)
    quotas = [f * n for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for i in sorted(range(3), key=lambda i: -remainders[i])[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        while fractions[i] > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1

    assignment: dict[str, str] = {}
    start = 0
    for part, count in zip(PARTITIONS, counts):
        for pid in order[start:start + count]:
            assignment[pid] = part
        start += count
    return assignment


def load_dataset(data_dir: str | Path) -> list[Record]:
    data_dir = Path(data_dir)
    records = []
    for relpath, patient_id in read_manifest(data_dir):
        image, labels, header_pid = load_record(data_dir / relpath)
        if labels is None:
            raise ValueError(f"{relpath}: record has no labels")
        records.append(Record(image, labels, patient_id or header_pid, relpath))
    return records


def partition_records(records: list[Record], assignment: dict[str, str]) -> dict[str, list[Record]]:
    parts: dict[str, list[Record]] = {p: [] for p in PARTITIONS}
    for rec in records:
        parts[assignment[rec.patient_id]].append(rec)
    return parts


def channel_stats(records: list[Record]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.stack([r.image.channels for r in records])  # (N, 3, R, A)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def _batch_tensors(records: list[Record], labels_list: list[LabelMap] | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([r.image.channels for r in records]))
    labs = labels_list if labels_list is not None else [r.labels for r in records]
    onehot = torch.from_numpy(np.stack([lm.one_hot() for lm in labs]))
    return images, onehot


def validation_dice(model: SegNet, records: list[Record], batch_size: int = 8) -> float:
    """Mean over frames of the mean per-class Dice of the raw argmax."""
    values = []
    with torch.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            images, _ = _batch_tensors(chunk)
            probs = model(images).numpy()
            for rec, prob in zip(chunk, probs):
                pred = LabelMap(np.argmax(prob, axis=2).astype(np.uint8) + 1)
                mean, _ = dice_coef(rec.labels, pred)
                values.append(mean)
    return float(np.mean(values))


def _aug_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def train(config: TrainConfig) -> TrainResult:
    """Train the segmentation network with the combined loss.

    Logs every loss term per step, saves the checkpoint with the best
    validation mean Dice, and stops early after ``patience`` epochs without
    improvement. Fully reproducible for a fixed seed on one device
    configuration.
    """
    torch.manual_seed(config.seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = config.loss

    critic: CriticNet | None = None
    if loss_cfg.lambda_ap > 0:
        if not config.critic_checkpoint:
            raise MissingCritic("lambda_ap > 0 requires a critic checkpoint")
        critic = load_critic(config.critic_checkpoint)

    records = load_dataset(config.data_dir)
    entries = [(r.name, r.patient_id) for r in records]
    assignment = split_by_patient(entries, config.split_fractions, config.seed)
    parts = partition_records(records, assignment)
    split_file = out_dir / "split.json"
    split_file.write_text(json.dumps(assignment, indent=2, sort_keys=True))

    model = SegNet()
    mean, std = channel_stats(parts["train"])
    model.set_normalization(mean, std)
    opt = torch.optim.RMSprop(model.parameters(), lr=config.lr, alpha=config.rmsprop_alpha)

    rng = np.random.default_rng(config.seed)
    log_path = out_dir / "training_log.csv"
    ckpt_path = out_dir / "model.ckpt"
    history: list[dict] = []
    best_dice, best_epoch = -np.inf, -1
    step = 0
    with open(log_path, "w", newline="") as log_fh:
        writer = csv.writer(log_fh)
        writer.writerow(["step", "epoch", *L.TERM_NAMES, "combined"])
        for epoch in range(config.epochs):
            order = rng.permutation(len(parts["train"]))
            for lo in range(0, len(order), config.batch_size):
                batch_recs = [parts["train"][i] for i in order[lo:lo + config.batch_size]]
                labels_list = []
                aug_recs = []
                for k, rec in enumerate(batch_recs):
                    if config.augment:
                        img, lab = apply_random(rec.image, rec.labels,
                                                _aug_seed(config.seed, epoch, int(order[lo + k])),
                                                config.augment_config)
                    else:
                        img, lab = rec.image, rec.labels
                    aug_recs.append(Record(img, lab, rec.patient_id, rec.name))
                    labels_list.append(lab)
                images, y = _batch_tensors(aug_recs, labels_list)
                yhat = model(images)

                terms: dict[str, torch.Tensor] = {}
                if loss_cfg.lambda_wce > 0:
                    terms["wce"] = L.wce(y, yhat, loss_cfg)
                if loss_cfg.lambda_dice > 0:
                    terms["dice"] = L.dice_loss(y, yhat, loss_cfg)
                if loss_cfg.lambda_bp > 0:
                    beta = L.boundary_mask(np.stack([lm.classes for lm in labels_list]),
                                           loss_cfg.b)
                    terms["bp"] = L.bp_loss(y, yhat, beta, loss_cfg)
                if loss_cfg.lambda_ap > 0:
                    terms["ap"] = ap_loss(images, yhat, critic)
                if loss_cfg.lambda_bc > 0:
                    terms["bc"] = L.bc_loss(y, yhat, loss_cfg)
                combined = L.combine(terms, loss_cfg)
                if combined.requires_grad:
                    opt.zero_grad()
                    combined.backward()
                    opt.step()
                writer.writerow([step, epoch,
                                 *[f"{float(terms[n].detach()):.10g}" if n in terms else ""
                                   for n in L.TERM_NAMES],
                                 f"{float(combined.detach()):.10g}"])
                step += 1

            val_dice = validation_dice(model, parts["val"]) if parts["val"] else np.nan
            history.append({"epoch": epoch, "val_dice": val_dice})
            if np.isnan(val_dice) or val_dice > best_dice:
                best_dice = -np.inf if np.isnan(val_dice) else val_dice
                best_epoch = epoch
                save_segnet(ckpt_path, model)
            if epoch - best_epoch >= config.patience:
                break

    if best_epoch < 0:
        save_segnet(ckpt_path, model)
    (out_dir / "history.json").write_text(json.dumps(history, indent=2))
    return TrainResult(str(ckpt_path), str(log_path), str(split_file),
                       float(best_dice) if np.isfinite(best_dice) else float("nan"),
                       best_epoch, len(history), history)


# ---------------------------------------------------------------------------
# Critic training on phantom data
# ---------------------------------------------------------------------------

def quality_pair_stream(records: list[Record], severity: float, batch_size: int,
                        seed: int):
    """Endless stream of paired clean/perturbed label batches."""
    rng = np.random.default_rng(seed)
    counter = 0
    while True:
        idx = rng.choice(len(records), size=min(batch_size, len(records)), replace=False)
        chunk = [records[i] for i in idx]
        images, high = _batch_tensors(chunk)
        low_maps = [perturb_labels(rec.labels, severity, _aug_seed(seed, counter, int(i)))
                    for i, rec in zip(idx, chunk)]
        _, low = _batch_tensors(chunk, low_maps)
        counter += 1
        yield QualityPairBatch(images=images, high=high, low=low)


def train_critic_on_dataset(data_dir: str | Path, severity: float, out_path: str | Path,
                            steps: int = 300, batch_size: int = 8, lr: float = 1e-4,
                            gp_weight: float = 10.0, seed: int = 0,
                            holdout_fraction: float = 0.2,
                            holdout_pairs: int = 64) -> dict:
    """Train the critic on clean vs severity-perturbed phantom labels and
    report held-out separation (mean scores and rank AUC)."""
    records = load_dataset(data_dir)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_hold = max(1, int(len(records) * holdout_fraction))
    held = [records[i] for i in order[:n_hold]]
    train_recs = [records[i] for i in order[n_hold:]]

    stream = quality_pair_stream(train_recs, severity, batch_size, seed + 7)
    critic, history = train_critic(
        stream, CriticTrainConfig(steps=steps, lr=lr, gp_weight=gp_weight, seed=seed))
    save_critic(out_path, critic)

    high_scores, low_scores = [], []
    pair_seed = 0
    while len(high_scores) < holdout_pairs:
        for i, rec in enumerate(held):
            if len(high_scores) >= holdout_pairs:
                break
            images, high = _batch_tensors([rec])
            low_map = perturb_labels(rec.labels, severity, _aug_seed(seed + 13, pair_seed, i))
            _, low = _batch_tensors([rec], [low_map])
            high_scores.append(float(score_batches(critic, images, high)[0]))
            low_scores.append(float(score_batches(critic, images, low)[0]))
        pair_seed += 1
    auc = rank_auc(np.array(high_scores), np.array(low_scores))
    return {
        "checkpoint": str(out_path),
        "steps": len(history),
        "severity": severity,
        "holdout_auc": auc,
        "mean_score_high": float(np.mean(high_scores)),
        "mean_score_low": float(np.mean(low_scores)),
        "history": history,
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _thickened_mask(labels: LabelMap, threshold_px: float) -> np.ndarray:
    ann = labels_to_annotation(labels)
    thickness = ann.eel_contour - ann.lumen_contour
    return thickness > threshold_px


def evaluate(data_dir: str | Path, checkpoint: str | Path,
             split_file: str | Path | None = None, split: str = "test",
             postprocess: bool = True, out_dir: str | Path | None = None,
             exclude_thickened_px: float | None = None) -> dict:
    """Run the model over a dataset partition and aggregate all metrics.

    Writes report.json and a flat per-frame/per-interface CSV when out_dir
    is given. ``postprocess`` toggles topology cleanup before metrics.
    """
    model = load_segnet(checkpoint)
    records = load_dataset(data_dir)
    if split_file is not None:
        assignment = json.loads(Path(split_file).read_text())
        records = [r for r in records if assignment.get(r.patient_id) == split]
    frames = []
    per_frame: list[dict] = []
    topo_pass = 0
    for rec in records:
        probs = model.predict(rec.image)
        pred = clean(probs) if postprocess else probs.argmax_labels()
        exclude = (_thickened_mask(rec.labels, exclude_thickened_px)
                   if exclude_thickened_px is not None else None)
        fm = frame_metrics(rec.labels, pred, rec.image.pixel_pitch_um, exclude)
        report = verify_topology(pred)
        fm["topology_valid"] = float(report.all_valid)
        topo_pass += int(report.all_valid)
        frames.append(fm)
        row = {"frame": rec.name, "patient_id": rec.patient_id}
        row.update({k: v for k, v in fm.items()})
        per_frame.append(row)
    agg = aggregate_frames(frames)
    agg["postprocess"] = postprocess
    agg["split"] = split if split_file else "all"
    agg["topology_pass_rate"] = topo_pass / len(records) if records else np.nan
    result = {"aggregate": agg, "frames": per_frame}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(_jsonable(result), indent=2))
        _write_eval_csv(out_dir / "report.csv", per_frame)
    return result


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if np.isnan(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _write_eval_csv(path: Path, per_frame: list[dict]) -> None:
    interfaces = ("outer_lumen", "iel", "eel")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "patient_id", "interface", "ade_px", "ade_um",
                         "ade_rev_px", "ade2d_px", "mhd_px", "mhd_um",
                         "accuracy", "dice_mean"])
        for row in per_frame:
            for iface in interfaces:
                writer.writerow([
                    row["frame"], row["patient_id"], iface,
                    row.get(f"ade_{iface}_px"), row.get(f"ade_{iface}_um"),
                    row.get(f"ade_rev_{iface}_px"), row.get(f"ade2d_{iface}_px"),
                    row.get(f"mhd_{iface}_px"), row.get(f"mhd_{iface}_um"),
                    row.get("accuracy"), row.get("dice_mean"),
                ])


# ---------------------------------------------------------------------------
# Greedy lambda grid search and the ablation harness
# ---------------------------------------------------------------------------

DEFAULT_GRID = tuple(float(x) for x in np.logspace(-3, 3, 7))
GRID_ORDER = ("dice", "bp", "ap", "bc")


def grid_search_lambda(config: TrainConfig,
                       coords: tuple[str, ...] = GRID_ORDER,
                       candidates: dict[str, tuple[float, ...]] | None = None,
                       ) -> tuple[LossConfig, list[dict]]:
    """Coordinate-wise greedy search over log-spaced loss weights.

    lambda_wce stays fixed at 1 as the scale anchor. One coordinate at a
    time, every candidate is trained and scored on validation mean Dice
    (validation MHD breaks ties); the winner is fixed before moving on.
    Returns the best LossConfig and the full trial table.
    """
    best_loss = replace(config.loss, lambda_wce=1.0)
    trials: list[dict] = []
    for coord in coords:
        cand = (candidates or {}).get(coord, DEFAULT_GRID)
        best_key, best_value = None, None
        for value in cand:
            trial_loss = replace(best_loss, **{f"lambda_{coord}": float(value)})
            out = Path(config.out_dir) / f"grid_{coord}_{value:g}"
            trial_cfg = replace(config, loss=trial_loss, out_dir=str(out))
            result = train(trial_cfg)
            ev = evaluate(config.data_dir, result.checkpoint, result.split_file,
                          split="val", postprocess=False)
            dice = ev["aggregate"].get("dice_mean", np.nan)
            mhd_v = ev["aggregate"].get("mhd_px", np.nan)
            trials.append({"coord": coord, "value": float(value),
                           "val_dice": dice, "val_mhd_px": mhd_v})
            key = (dice if not np.isnan(dice) else -np.inf,
                   -(mhd_v if not np.isnan(mhd_v) else np.inf))
            if best_key is None or key > best_key:
                best_key, best_value = key, float(value)
        best_loss = replace(best_loss, **{f"lambda_{coord}": best_value})
    return best_loss, trials


ABLATION_ROWS = (
    ("wce", "dice", "bp", "ap", "bc"),
    ("wce", "dice", "bp", "ap"),
    ("wce", "dice", "bp"),
    ("wce", "dice"),
    ("wce",),
)


def ablation(config: TrainConfig, seeds: tuple[int, ...] = (0, 1, 2),
             rows: tuple[tuple[str, ...], ...] = ABLATION_ROWS,
             postprocess: bool = False) -> list[dict]:
    """Train one model per loss subset per seed and tabulate test metrics.

    Rows mirror the nested subsets of the published ablation (each row
    removes one more term). Metrics are averaged over seeds.
    """
    table = []
    for terms in rows:
        overrides = {f"lambda_{name}": (getattr(config.loss, f"lambda_{name}")
                                        if name in terms else 0.0)
                     for name in L.TERM_NAMES}
        metrics_per_seed = []
        for seed in seeds:
            out = Path(config.out_dir) / ("abl_" + "_".join(terms) + f"_s{seed}")
            trial_cfg = replace(config, seed=seed, out_dir=str(out),
                                loss=replace(config.loss, **overrides))
            result = train(trial_cfg)
            ev = evaluate(config.data_dir, result.checkpoint, result.split_file,
                          split="test", postprocess=postprocess)
            agg = ev["aggregate"]
            metrics_per_seed.append({
                "accuracy": agg.get("accuracy", np.nan),
                "dice": agg.get("dice_mean", np.nan),
                "mhd_px": agg.get("mhd_px", np.nan),
            })
        table.append({
            "terms": list(terms),
            "accuracy": float(np.nanmean([m["accuracy"] for m in metrics_per_seed])),
            "dice": float(np.nanmean([m["dice"] for m in metrics_per_seed])),
            "mhd_px": float(np.nanmean([m["mhd_px"] for m in metrics_per_seed])),
            "seeds": list(seeds),
        })
    return table
