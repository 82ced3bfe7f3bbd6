"""Downstream conversion prediction, ranking metrics and time-equivariance analysis.

Downstream models always consume encoder representations; the projector of a
pretrained network is never used here.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from scipy import ndimage, stats
from torch import nn

from .augment3d import derive_rng
from .model import SiameseModel, encode
from .voldata import Cohort, Label, LabelledScan, VisitRecord, assign_labels, load_visit, preprocess


class UndefinedMetricError(ValueError):
    """Metric needs both classes (or at least one positive)."""


class InsufficientVisitsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels).astype(int).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs at least one positive and one negative")
    ranks = stats.rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: precision at each distinct threshold times the recall gained."""
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def balanced_accuracy(predictions, labels, threshold: float = 0.5) -> float:
    """Mean of per-class recall; ``predictions`` are probabilities or 0/1 decisions."""
    y = _binary(labels)
    if y.min() == y.max():
        raise UndefinedMetricError("balanced accuracy needs both classes")
    pred = (np.asarray(predictions, dtype=np.float64).ravel() >= threshold).astype(int)
    recall_pos = np.mean(pred[y == 1] == 1)
    recall_neg = np.mean(pred[y == 0] == 0)
    return float((recall_pos + recall_neg) / 2)


def concordance_index(times, values) -> float:
    """Fraction of time-ordered pairs whose values increase; value ties count 0.5."""
    t = np.asarray(times, dtype=np.float64).ravel()
    v = np.asarray(values, dtype=np.float64).ravel()
    if t.size < 2 or t.size != v.size:
        raise ValueError("concordance_index needs at least two (time, value) entries")
    dt = np.sign(t[None, :] - t[:, None])
    dv = np.sign(v[None, :] - v[:, None])
    upper = np.triu(np.ones_like(dt, dtype=bool), k=1) & (dt != 0)
    if not upper.any():
        raise ValueError("concordance_index needs distinct times")
    agree = (dt * dv)[upper]
    return float(np.mean(np.where(agree > 0, 1.0, np.where(agree == 0, 0.5, 0.0))))


@dataclass
class MetricsReport:
    rocauc: float
    prauc: float
    bacc: float
    prauc_baseline: float
    n_pos: int
    n_neg: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, probs, labels, **extra) -> "MetricsReport":
        y = _binary(labels)
        return cls(rocauc=roc_auc(probs, y), prauc=pr_auc(probs, y),
                   bacc=balanced_accuracy(probs, y), prauc_baseline=float(y.mean()),
                   n_pos=int(y.sum()), n_neg=int((1 - y).sum()), extra=extra)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "linear"
    epochs: Optional[int] = None
    lr: float = 1e-4
    positive_class_weight: float = 5.0
    batch_size: int = 32
    horizon_months: int = 6
    test_fraction: float = 0.25
    val_fraction: float = 0.2
    standardize: bool = True
    translate_max: int = 4
    rotate_degrees: float = 15.0
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("linear", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.positive_class_weight <= 0:
            raise ValueError("positive_class_weight must be positive")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")

    @property
    def n_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 50 if self.mode == "linear" else 100


def labelled_scans(cohort: Cohort, horizon_months: int = 6) -> list[LabelledScan]:
    """Labelled scans with post-conversion (excluded) visits removed."""
    return [s for eye in cohort.eyes for s in assign_labels(eye, horizon_months)
            if s.label is not Label.EXCLUDED]


def _patient_strata(scans) -> tuple[list[str], np.ndarray]:
    by_patient: dict[str, int] = {}
    for s in scans:
        pos = int(s.label is Label.POSITIVE)
        by_patient[s.visit.patient_id] = max(by_patient.get(s.visit.patient_id, 0), pos)
    patients = sorted(by_patient)
    return patients, np.array([by_patient[p] for p in patients])


def stratified_patient_folds(scans, n_folds: int, seed: int) -> list[set[str]]:
    """Patient-wise folds, stratified on whether a patient has any positive scan."""
    patients, strata = _patient_strata(scans)
    rng = np.random.default_rng(seed)
    folds: list[set[str]] = [set() for _ in range(n_folds)]
    for value in (1, 0):
        members = [p for p, s in zip(patients, strata) if s == value]
        rng.shuffle(members)
        offset = len(folds[0]) if value == 0 else 0
        for i, p in enumerate(members):
            folds[(i + offset) % n_folds].add(p)
    return folds


def split_scans(scans, fraction: float, seed: int):
    """Patient-wise stratified split into (rest, held_out)."""
    patients, strata = _patient_strata(scans)
    rng = np.random.default_rng(seed)
    held = set()
    for value in (0, 1):
        members = [p for p, s in zip(patients, strata) if s == value]
        rng.shuffle(members)
        held.update(members[:int(round(fraction * len(members)))])
    rest = [s for s in scans if s.visit.patient_id not in held]
    out = [s for s in scans if s.visit.patient_id in held]
    return rest, out


def _labels(scans) -> np.ndarray:
    return np.array([int(s.label is Label.POSITIVE) for s in scans])


def _require_both_classes(y, what="training split"):
    if y.size == 0 or y.min() == y.max():
        raise UndefinedMetricError(f"{what} contains a single class")


Encoder = Callable[[np.ndarray, Sequence[VisitRecord]], np.ndarray]


def model_encoder(model: SiameseModel) -> Encoder:
    def run(volumes, visits):
        return encode(model, volumes).double().numpy()
    return run


def encode_visits(encoder: Encoder, visits: Sequence[VisitRecord], shape,
                  chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(visits), chunk):
        part = list(visits[i:i + chunk])
        vols = np.stack([preprocess(load_visit(v), n_slices=shape[0]) for v in part])
        out.append(np.asarray(encoder(vols, part), dtype=np.float64))
    return np.concatenate(out) if out else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, feats) -> np.ndarray:
        return ((np.asarray(feats) - self.mean) / self.scale) @ self.weight + self.bias

    def predict_proba(self, feats) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(feats)))


def fit_linear_probe(feats, labels, cfg: EvalConfig, seed: int = 0) -> LinearProbe:
    """Single linear layer on frozen features, class-weighted BCE, Adam.

    Features are standardized with training-split statistics first (a fixed,
    non-learned affine map) so the constant learning rate is scale-free.
    """
    x = np.asarray(feats, dtype=np.float64)
    y = _binary(labels)
    _require_both_classes(y)
    mean = x.mean(0) if cfg.standardize else np.zeros(x.shape[1])
    scale = x.std(0) if cfg.standardize else np.ones(x.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    xt = torch.from_numpy((x - mean) / scale)
    yt = torch.from_numpy(y.astype(np.float64))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layer = nn.Linear(x.shape[1], 1).double()
    opt = torch.optim.Adam(layer.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(cfg.positive_class_weight,
                                                           dtype=torch.float64))
    rng = np.random.default_rng(seed)
    for _ in range(cfg.n_epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            opt.zero_grad()
            loss_fn(layer(xt[idx]).squeeze(1), yt[idx]).backward()
            opt.step()
    return LinearProbe(layer.weight.detach().numpy()[0].copy(), float(layer.bias.detach()),
                       mean, scale)


ModelLike = Union[SiameseModel, str, Path]


def _resolve_model(model: ModelLike) -> SiameseModel:
    if isinstance(model, SiameseModel):
        return model
    from .pretrain import load_model
    return load_model(model)


def linear_eval(model: ModelLike, data: Union[Cohort, Sequence[LabelledScan]],
                cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Frozen-encoder linear evaluation on a patient-wise held-out split."""
    model = _resolve_model(model)
    scans = labelled_scans(data, cfg.horizon_months) if isinstance(data, Cohort) else list(data)
    train, test = split_scans(scans, cfg.test_fraction, cfg.seed)
    y_train, y_test = _labels(train), _labels(test)
    _require_both_classes(y_train)
    _require_both_classes(y_test, "held-out split")
    enc = model_encoder(model)
    shape = model.enc_cfg.input_shape
    f_train = encode_visits(enc, [s.visit for s in train], shape)
    f_test = encode_visits(enc, [s.visit for s in test], shape)
    probe = fit_linear_probe(f_train, y_train, cfg, cfg.seed)
    return MetricsReport.from_scores(probe.predict_proba(f_test), y_test, mode="linear",
                                     n_train=len(train), n_test=len(test))


# ---------------------------------------------------------------------------
# fine-tuning


def downstream_augment(volume: np.ndarray, cfg: EvalConfig, rng) -> np.ndarray:
    """Random in-plane translation, small rotation and horizontal flip."""
    out = volume
    if cfg.rotate_degrees:
        angle = rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees)
        out = ndimage.rotate(out, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
    if cfg.translate_max:
        dy, dx = rng.integers(-cfg.translate_max, cfg.translate_max + 1, size=2)
        out = ndimage.shift(out, (0, int(dy), int(dx)), order=0, mode="nearest")
    if cfg.hflip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


class Classifier(nn.Module):
    def __init__(self, encoder: nn.Module, dim: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(dim, 1)

    def forward(self, x):
        return self.head(self.encoder(x)).squeeze(1)


def _predict(clf: Classifier, vols: np.ndarray, chunk: int = 64) -> np.ndarray:
    clf.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(vols), chunk):
            outs.append(torch.sigmoid(clf(torch.from_numpy(vols[i:i + chunk]))).double().numpy())
    return np.concatenate(outs)


def fine_tune(model: ModelLike, data: Union[Cohort, Sequence[LabelledScan]],
              cfg: EvalConfig = EvalConfig(mode="finetune")) -> MetricsReport:
    """End-to-end training of encoder + linear head; best epoch chosen on validation ROC AUC."""
    model = _resolve_model(model)
    scans = labelled_scans(data, cfg.horizon_months) if isinstance(data, Cohort) else list(data)
    rest, test = split_scans(scans, cfg.test_fraction, cfg.seed)
    train, val = split_scans(rest, cfg.val_fraction, cfg.seed + 1) if cfg.val_fraction else (rest, [])
    y_train, y_val, y_test = _labels(train), _labels(val), _labels(test)
    _require_both_classes(y_train)
    _require_both_classes(y_test, "held-out split")
    shape = model.enc_cfg.input_shape

    def load(ss):
        if not ss:
            return np.zeros((0, *shape), np.float32)
        return np.stack([preprocess(load_visit(s.visit), n_slices=shape[0]) for s in ss])

    x_train, x_val, x_test = load(train), load(val), load(test)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        clf = Classifier(copy.deepcopy(model.encoder), model.enc_cfg.representation_dim)
    clf.float()
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    loss_fn = nn.BCEWithLogitsLoss(pos_weight=torch.tensor(cfg.positive_class_weight))
    rng = derive_rng(cfg.seed, "finetune")

    use_val = len(y_val) > 0 and y_val.min() != y_val.max()
    best_state, best_auc, best_epoch = copy.deepcopy(clf.state_dict()), -math.inf, 0
    for epoch in range(1, cfg.n_epochs + 1):
        clf.train()
        order = rng.permutation(len(y_train))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:  # batch-norm needs two samples
                continue
            xb = np.stack([downstream_augment(x_train[j], cfg, rng) for j in idx])
            opt.zero_grad()
            loss_fn(clf(torch.from_numpy(xb)), torch.from_numpy(y_train[idx]).float()).backward()
            opt.step()
        if use_val:
            auc = roc_auc(_predict(clf, x_val), y_val)
            if auc > best_auc:
                best_auc, best_epoch = auc, epoch
                best_state = copy.deepcopy(clf.state_dict())
        else:
            best_state, best_epoch = copy.deepcopy(clf.state_dict()), epoch
    clf.load_state_dict(best_state)
    return MetricsReport.from_scores(_predict(clf, x_test), y_test, mode="finetune",
                                     best_epoch=best_epoch, n_train=len(train),
                                     n_val=len(val), n_test=len(test))


# ---------------------------------------------------------------------------
# cross-validation


def cross_validate(model: ModelLike, cohort: Cohort, cfg: EvalConfig, n_folds: int = 4) -> dict:
    """Patient-wise stratified k-fold linear evaluation; mean and std per metric."""
    model = _resolve_model(model)
    scans = labelled_scans(cohort, cfg.horizon_months)
    folds = stratified_patient_folds(scans, n_folds, cfg.seed)
    enc = model_encoder(model)
    feats = encode_visits(enc, [s.visit for s in scans], model.enc_cfg.input_shape)
    y = _labels(scans)
    pids = np.array([s.visit.patient_id for s in scans])
    reports = []
    for k, fold in enumerate(folds):
        test = np.isin(pids, list(fold))
        probe = fit_linear_probe(feats[~test], y[~test], cfg, cfg.seed + k)
        reports.append(MetricsReport.from_scores(probe.predict_proba(feats[test]), y[test]))
    out = {}
    for key in ("rocauc", "prauc", "bacc"):
        vals = [getattr(r, key) for r in reports]
        out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "folds": vals}
    return out


# ---------------------------------------------------------------------------
# time equivariance


@dataclass
class Trajectory:
    patient_id: str
    eye_id: str
    visit_days: list[int]
    visit_months: list[int]
    distances: list[float]
    ci: float


@dataclass
class EquivarianceReport:
    trajectories: list[Trajectory]
    mean_ci: float

    @property
    def ci_values(self) -> list[float]:
        return [t.ci for t in self.trajectories]

    def to_dict(self) -> dict:
        return {"mean_ci": self.mean_ci, "n_patients": len(self.trajectories),
                "per_patient_ci": {f"{t.patient_id}/{t.eye_id}": t.ci for t in self.trajectories}}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def write_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "eye_id", "visit_day", "visit_month", "distance"])
            for t in self.trajectories:
                for day, month, dist in zip(t.visit_days, t.visit_months, t.distances):
                    w.writerow([t.patient_id, t.eye_id, day, month, repr(float(dist))])


def equivariance_report(encoder: Union[ModelLike, Encoder], cohort: Cohort, n_patients: int,
                        seed: int = 0, shape=None) -> EquivarianceReport:
    """Distance of every visit to the first visit in representation space.

    The per-patient concordance index ranks the follow-up visits (baseline
    excluded, since its distance is zero by definition) by visit day.
    """
    if not callable(encoder) or isinstance(encoder, SiameseModel):
        model = _resolve_model(encoder)
        shape = model.enc_cfg.input_shape
        encoder = model_encoder(model)
    if shape is None:
        raise ValueError("shape is required when passing a bare encoder callable")
    first_eye: dict[str, object] = {}
    for eye in cohort.eyes:
        if len(eye.visits) >= 3 and eye.patient_id not in first_eye:
            first_eye[eye.patient_id] = eye
    eligible = sorted(first_eye)
    if len(eligible) < n_patients:
        raise InsufficientVisitsError(
            f"requested {n_patients} patients but only {len(eligible)} have >= 3 visits")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(eligible), size=n_patients, replace=False))
    trajectories = []
    for i in chosen:
        eye = first_eye[eligible[i]]
        reps = encode_visits(encoder, eye.visits, shape)
        dist = np.linalg.norm(reps - reps[0], axis=1)
        dist[0] = 0.0
        days = [v.visit_day for v in eye.visits]
        ci = concordance_index(days[1:], dist[1:])
        trajectories.append(Trajectory(eye.patient_id, eye.eye_id, days,
                                       [v.visit_month for v in eye.visits],
                                       [float(d) for d in dist], ci))
    return EquivarianceReport(trajectories, float(np.mean([t.ci for t in trajectories])))
