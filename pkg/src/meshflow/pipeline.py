"""End-to-end orchestration: training, inference, evaluation, folds.

Training follows the protocol of batch size one with gradient
accumulation over five steps and an Adam update at learning rate 1e-5
by default; the objective is the configured data term plus 0.05 times
the identity term. Metrics are reported per frame: vertex Chamfer
(normalized units and mm) and the symmetric mean unsigned surface
distance in the original mm frame.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import gnn, image, losses
from . import mesh as meshmod
from .synthdata import DataError, _cross_section_segments
from .image import PlaneSpec


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class TrainConfig:
    feature_mode: str = "pooling"  # "pooling" | "global"
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    epochs: int = 100
    lr: float = 1e-5
    accumulation_steps: int = 5
    batch_size: int = 1
    fold_count: int = 10
    seed: int = 0
    map_count: int = 16
    conv_blocks: int = 3
    layer_count: int = 7
    hidden_width: int = 128
    heads: int = 2
    leaky_slope: float = 0.2
    max_steps: int = 0  # 0 = no cap; otherwise stop after this many samples

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = losses.LossConfig(**self.loss)
        if self.feature_mode not in ("pooling", "global"):
            raise ValueError(f"unknown feature_mode '{self.feature_mode}'")
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.fold_count < 2:
            raise ValueError("fold_count must be >= 2")

    def to_dict(self):
        return asdict(self)


class Model:
    """Feature extractor plus graph network, with (de)normalization."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        mode = "preserving" if cfg.feature_mode == "pooling" else "global"
        self.extractor = image.ConvExtractor(
            mode=mode, map_count=cfg.map_count, blocks=cfg.conv_blocks,
            leaky_slope=cfg.leaky_slope, rng=rng,
        )
        net_cfg = gnn.GraphNetConfig(
            layer_count=cfg.layer_count,
            hidden_width=cfg.hidden_width,
            heads=cfg.heads,
            leaky_slope=cfg.leaky_slope,
            input_width=3 + self.extractor.feature_width,
        )
        self.net = gnn.GraphNet(net_cfg, rng=rng)

    def parameters(self):
        params = dict(self.net.parameters())
        for name, p in self.extractor.params.items():
            params[f"extractor/{name}"] = p
        return params

    def vertex_features(self, ref_norm, img, transform):
        if self.cfg.feature_mode == "pooling":
            return image.pool_features(ref_norm.vertices, img, self.extractor, transform)
        latent = image.extract_global(img, self.extractor)
        return ad.broadcast_rows(latent, ref_norm.num_vertices)

    def predict(self, ref_norm, img, transform):
        """Predicted vertex tensor in the normalized frame."""
        feats = self.vertex_features(ref_norm, img, transform)
        return self.net.deform(ref_norm, feats)

    def save(self, path):
        gnn.save_graphnet(
            path, self.net, extra_params=self.extractor.params,
            extra_config={"train": self.cfg.to_dict()},
        )

    @staticmethod
    def load(path):
        net, extractor_params, config = gnn.load_graphnet(path)
        if "train" not in config:
            raise ValueError(f"{path}: checkpoint lacks the pipeline configuration")
        cfg = TrainConfig(**config["train"])
        model = Model(cfg)
        model.net = net
        for name, p in extractor_params.items():
            if name not in model.extractor.params:
                raise ValueError(f"{path}: unexpected extractor parameter '{name}'")
            if model.extractor.params[name].shape != p.shape:
                raise ValueError(f"{path}: extractor parameter '{name}' shape mismatch")
        model.extractor.params = extractor_params
        return model


def _normalized_subject(seq):
    """Normalize the subject by its reference transform; frames reuse it so
    vertex correspondence and the world-frame inverse stay consistent."""
    ref_norm, transform = meshmod.normalize(seq.reference)
    frames_norm = [
        seq.reference.with_vertices(transform.apply(m.vertices)) for m, _ in seq.frames
    ]
    return ref_norm, transform, frames_norm


# ---------------------------------------------------------------------------
# training


def train(dataset, cfg, out_dir, train_subjects=None, log_name="training_log.csv"):
    """Train a model; writes a checkpoint and a loss-curve CSV to out_dir.

    Returns (model, checkpoint_path). `train_subjects` indexes into the
    dataset list (default: all subjects).
    """
    os.makedirs(out_dir, exist_ok=True)
    subjects = list(range(len(dataset))) if train_subjects is None else list(train_subjects)
    if not subjects:
        raise DataError("no training subjects")
    prepared = {s: _normalized_subject(dataset[s]) for s in subjects}
    model = Model(cfg, rng=np.random.default_rng(cfg.seed))
    opt = ad.Adam(list(model.parameters().values()), lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed + 1)
    loss_rng = np.random.default_rng(cfg.loss.rng_seed)

    pairs = [(s, t) for s in subjects for t in range(len(dataset[s].frames))]
    step = 0
    pending = 0
    log_rows = []
    done = False
    for _epoch in range(cfg.epochs):
        if done:
            break
        for i in order_rng.permutation(len(pairs)):
            s, t = pairs[i]
            ref_norm, transform, frames_norm = prepared[s]
            img = dataset[s].frames[t][1]
            ref_img = dataset[s].frames[0][1]
            with ad.Tape():
                pred = model.predict(ref_norm, img, transform)
                if not np.all(np.isfinite(pred.values)):
                    raise NumericalError(f"non-finite prediction at training step {step}")
                tri = pred.values[ref_norm.facets]
                areas = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
                if not np.linalg.norm(areas, axis=1).sum() > 0.0:
                    raise NumericalError(
                        f"predicted surface collapsed at training step {step}"
                    )
                loss, data_val, ident_val = losses.total_loss(
                    pred,
                    ref_norm.facets,
                    frames_norm[t],
                    lambda im: model.predict(ref_norm, im, transform),
                    ref_norm,
                    ref_img,
                    cfg.loss,
                    loss_rng,
                )
                total_val = loss.item()
                if not np.isfinite(total_val):
                    raise NumericalError(f"non-finite loss at training step {step}")
                ad.backward(loss)
            step += 1
            pending += 1
            log_rows.append((step, data_val, ident_val, total_val))
            if pending == cfg.accumulation_steps:
                opt.step()
                opt.zero_grad()
                pending = 0
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
    if pending:
        opt.step()
        opt.zero_grad()

    with open(os.path.join(out_dir, log_name), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "data_loss", "identity_loss", "total_loss"])
        writer.writerows(log_rows)
    ckpt = os.path.join(out_dir, "model.ckpt")
    model.save(ckpt)
    return model, ckpt


# ---------------------------------------------------------------------------
# inference


def infer(model, reference, img):
    """Deform a world-frame reference mesh from a slice.

    Returns (TriMesh in the world frame, inference seconds). Timing
    covers the forward pass only, not file I/O or validation.
    """
    ref_norm, transform = meshmod.normalize(reference)
    gnn.warm_topology(ref_norm)
    t0 = time.perf_counter()
    with ad.no_grad():
        pred = model.predict(ref_norm, img, transform)
    seconds = time.perf_counter() - t0
    return reference.with_vertices(transform.invert(pred.values)), seconds


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: list  # dicts: subject, frame, chamfer_l2, chamfer_l2_mm, avg_error_mm, inference_seconds
    aggregates: dict

    @staticmethod
    def aggregate(rows):
        agg = {}
        for key in ("chamfer_l2", "chamfer_l2_mm", "avg_error_mm", "inference_seconds"):
            vals = np.array([r[key] for r in rows])
            agg[f"{key}_mean"] = float(vals.mean())
            agg[f"{key}_std"] = float(vals.std())
        return agg

    def save(self, out_dir, prefix="eval"):
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{prefix}_frames.csv")
        keys = ["subject", "frame", "chamfer_l2", "chamfer_l2_mm", "avg_error_mm", "inference_seconds"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)
        json_path = os.path.join(out_dir, f"{prefix}_summary.json")
        with open(json_path, "w") as fh:
            json.dump(self.aggregates, fh, sort_keys=True, indent=1)
            fh.write("\n")
        return csv_path, json_path

    @staticmethod
    def load(out_dir, prefix="eval"):
        with open(os.path.join(out_dir, f"{prefix}_frames.csv"), newline="") as fh:
            rows = []
            for row in csv.DictReader(fh):
                parsed = {"subject": int(row["subject"]), "frame": int(row["frame"])}
                for key in ("chamfer_l2", "chamfer_l2_mm", "avg_error_mm", "inference_seconds"):
                    parsed[key] = float(row[key])
                rows.append(parsed)
        with open(os.path.join(out_dir, f"{prefix}_summary.json")) as fh:
            aggregates = json.load(fh)
        recomputed = EvalReport.aggregate(rows)
        for key, val in recomputed.items():
            if abs(val - aggregates[key]) > 1e-9 * max(1.0, abs(val)):
                raise DataError(f"aggregate '{key}' does not match its per-frame rows")
        return EvalReport(rows, aggregates)


def evaluate(model, dataset, subject_ids):
    """Per-frame metrics over the given held-out subjects."""
    rows = []
    for s in subject_ids:
        seq = dataset[s]
        ref_norm, transform, frames_norm = _normalized_subject(seq)
        for t, (truth_world, img) in enumerate(seq.frames):
            pred_world, seconds = infer(model, seq.reference, img)
            pred_norm_v = transform.apply(pred_world.vertices)
            rows.append(
                {
                    "subject": s,
                    "frame": t,
                    "chamfer_l2": losses.chamfer_value(pred_norm_v, frames_norm[t].vertices),
                    "chamfer_l2_mm": losses.chamfer_value(pred_world.vertices, truth_world.vertices),
                    "avg_error_mm": meshmod.unsigned_surface_distance(pred_world, truth_world),
                    "inference_seconds": seconds,
                }
            )
    return EvalReport(rows, EvalReport.aggregate(rows))


def static_baseline_error(dataset, subject_ids):
    """Mean avg_error_mm of always predicting the reference mesh."""
    vals = []
    for s in subject_ids:
        seq = dataset[s]
        for truth_world, _ in seq.frames:
            vals.append(meshmod.unsigned_surface_distance(seq.reference, truth_world))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# cross-validation


def make_folds(num_subjects, fold_count, seed):
    """Deterministic subject-level folds; every subject is tested once."""
    if fold_count > num_subjects:
        raise DataError(
            f"fold_count {fold_count} exceeds subject count {num_subjects}; reduce fold_count"
        )
    order = np.random.default_rng(seed).permutation(num_subjects)
    return [sorted(int(s) for s in order[i::fold_count]) for i in range(fold_count)]


def crossval(dataset, cfg, out_dir):
    """Per-fold train + evaluate; writes fold reports and an aggregate."""
    folds = make_folds(len(dataset), cfg.fold_count, cfg.seed)
    all_subjects = set(range(len(dataset)))
    fold_means = []
    reports = []
    for i, test_subjects in enumerate(folds):
        train_subjects = sorted(all_subjects - set(test_subjects))
        if set(train_subjects) & set(test_subjects):
            raise DataError(f"fold {i}: train/test subject overlap")
        fold_dir = os.path.join(out_dir, f"fold_{i}")
        model, _ = train(dataset, cfg, fold_dir, train_subjects=train_subjects)
        report = evaluate(model, dataset, test_subjects)
        report.save(fold_dir)
        reports.append(report)
        fold_means.append(report.aggregates["avg_error_mm_mean"])
    aggregate = {
        "fold_avg_error_mm": fold_means,
        "avg_error_mm_mean": float(np.mean(fold_means)),
        "avg_error_mm_std": float(np.std(fold_means)),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "crossval_summary.json"), "w") as fh:
        json.dump(aggregate, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return reports, aggregate


# ---------------------------------------------------------------------------
# visualization export


def export_viz(pred, truth, out_dir):
    """Signed-distance PLY plus per-plane contour polylines (CSV)."""
    os.makedirs(out_dir, exist_ok=True)
    signed = meshmod.signed_vertex_distance(pred, truth)
    ply_path = os.path.join(out_dir, "signed_distance.ply")
    meshmod.save_ply_quality(pred, signed, ply_path)
    center = truth.centroid()
    paths = [ply_path]
    for name, axis in (("sagittal", 0), ("coronal", 1), ("axial", 2)):
        plane = PlaneSpec(axis=axis, value=float(center[axis]))
        path = os.path.join(out_dir, f"contour_{name}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mesh", "segment", "point", "row_world", "col_world"])
            for label, m in (("pred", pred), ("truth", truth)):
                segments = _cross_section_segments(m, plane)
                for k, seg in enumerate(segments):
                    for j, (r, c) in enumerate(seg):
                        writer.writerow([label, k, j, f"{r:.9g}", f"{c:.9g}"])
        paths.append(path)
    return paths
