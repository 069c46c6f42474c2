"""Loss, optimizers, cross-trial folds, metrics and the training driver."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import tensor as tn
from .curriculum import Curriculum, CurriculumConfig
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tape, backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    total_epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    curriculum_enabled: bool = True
    folds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class FoldSplit:
    fold_id: int
    train_trial_ids: list
    test_trial_ids: list


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    macro_f1: float
    per_class_f1: list

    def to_dict(self):
        return {"confusion": self.confusion.tolist(), "accuracy": self.accuracy,
                "macro_f1": self.macro_f1, "per_class_f1": list(self.per_class_f1)}


@dataclass
class Dataset:
    """Stacked feature segments: ``features`` is ``(N, T, C, B)``."""

    features: np.ndarray
    labels: np.ndarray
    trial_ids: np.ndarray
    intensity: np.ndarray = None
    classes: int = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.trial_ids = np.asarray(self.trial_ids, dtype=np.int64)
        if self.intensity is None:
            self.intensity = np.ones(len(self.labels))
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.classes is None:
            self.classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        n = len(self.features)
        if not (len(self.labels) == len(self.trial_ids) == len(self.intensity) == n):
            raise ShapeError("dataset arrays have inconsistent lengths")

    @classmethod
    def from_segments(cls, segments, classes=None):
        return cls(np.stack([s.features for s in segments]), [s.label for s in segments],
                   [s.trial_id for s in segments], [s.intensity for s in segments], classes)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.trial_ids[idx],
                       self.intensity[idx], self.classes)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------- loss and optimizer

def cross_entropy(probs, labels):
    """Mean of ``-ln(max(p[label], 1e-12))`` over rows; accepts ``(K,)`` or ``(N, K)``."""
    if probs.ndim == 1:
        probs = tn.reshape(probs, (1, probs.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(labels >= probs.shape[1]) or np.any(labels < 0):
        raise ConfigError(f"label out of range for {probs.shape[1]} classes")
    picked = tn.clamp_min(tn.pick(probs, labels), PROB_FLOOR)
    return tn.scale(tn.mean_all(tn.log(picked)), -1.0)


def per_sample_loss(probs, labels):
    p = np.asarray(probs, dtype=np.float64)[np.arange(len(labels)), labels]
    return -np.log(np.maximum(p, PROB_FLOOR))


class Optimizer:
    """SGD or Adam over a dict of float arrays; returns new arrays each step."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        cfg = self.config
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            if cfg.optimizer == "sgd":
                out[name] = (p - cfg.learning_rate * g).astype(p.dtype)
                continue
            m = cfg.beta1 * self.m.get(name, 0.0) + (1 - cfg.beta1) * g
            v = cfg.beta2 * self.v.get(name, 0.0) + (1 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - cfg.beta1 ** self.t)
            vhat = v / (1 - cfg.beta2 ** self.t)
            out[name] = (p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.dtype)
        return out


def optimizer_step(params, grads, config: TrainConfig, optimizer=None):
    """One update; pass a persistent :class:`Optimizer` to keep Adam moments."""
    return (optimizer or Optimizer(config)).step(params, grads)


def train_step(params, features, labels, cfg: M.ModelConfig, optimizer: Optimizer):
    """One gradient step on a batch; returns ``(new_params, loss, correct)``."""
    tensors = M.as_tensors(params, requires_grad=True)
    with Tape() as tape:
        probs = M.forward_batch(features, tensors, cfg)
        loss = cross_entropy(probs, labels)
    grads = backward(loss, tape, params=list(tensors.values()))
    correct = probs.data.argmax(axis=1) == np.asarray(labels)
    return optimizer.step(params, dict(zip(tensors, grads))), loss.item(), correct


# ---------------------------------------------------------------- protocol and metrics

def cross_trial_split(trials, folds=5, seed=0):
    """Shuffle distinct trial ids and deal them into ``folds`` near-equal test sets."""
    ids = sorted(set(int(t) for t in trials))
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if len(ids) < folds:
        raise ConfigError(f"{len(ids)} trials cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(ids)
    parts = np.array_split(order, folds)
    splits = []
    for f, test in enumerate(parts):
        test_ids = sorted(int(t) for t in test)
        train_ids = sorted(set(ids) - set(test_ids))
        splits.append(FoldSplit(f, train_ids, test_ids))
    return splits


def confusion_matrix(labels, preds, classes):
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def metrics_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    denom = pred + true
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    acc = float(tp.sum() / total) if total else 0.0
    return MetricsReport(cm, acc, float(f1.mean()), f1.tolist())


def evaluate(params, cfg: M.ModelConfig, features, labels):
    """Argmax predictions scored into a :class:`MetricsReport`."""
    if len(labels) == 0:
        raise ConfigError("cannot evaluate on an empty set")
    probs = M.predict_proba(features, params, cfg)
    preds = probs.argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(labels, preds, cfg.classes))


def derive_deap_labels(arousal, valence, threshold=5.0):
    """Four classes from high/low arousal and valence: ``2*high_arousal + high_valence``."""
    a = np.asarray(arousal, dtype=np.float64) > threshold
    v = np.asarray(valence, dtype=np.float64) > threshold
    return (2 * a + v).astype(np.int64)


# ---------------------------------------------------------------- driver

@dataclass
class FoldResult:
    split: FoldSplit
    params: dict
    report: MetricsReport
    epoch_log: list
    curriculum_log: list = field(default_factory=list)
    difficulty: np.ndarray = None
    train_intensity: np.ndarray = None


@dataclass
class RunResult:
    folds: list
    model_config: M.ModelConfig
    train_config: TrainConfig
    curriculum_config: CurriculumConfig

    def aggregate(self):
        acc = np.array([f.report.accuracy for f in self.folds])
        f1 = np.array([f.report.macro_f1 for f in self.folds])
        return {"accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
                "macro_f1_mean": float(f1.mean()), "macro_f1_std": float(f1.std())}

    def best_fold(self):
        return max(self.folds, key=lambda f: (f.report.accuracy, -f.split.fold_id))


def train_fold(train: Dataset, test: Dataset, model_cfg, train_cfg: TrainConfig,
               curriculum_cfg: CurriculumConfig, seed, split=None):
    """Fresh model trained on ``train``; scored on ``test`` after every epoch."""
    rng = np.random.default_rng(seed)
    params = M.init_params(model_cfg, seed)
    opt = Optimizer(train_cfg)
    state = {"params": params}
    epoch_log = []

    def run_batches(order):
        correct = []
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            state["params"], loss, ok = train_step(
                state["params"], train.features[idx], train.labels[idx], model_cfg, opt)
            correct.extend(ok.tolist())
            losses.append(loss * len(idx))
        state["last_loss"] = sum(losses) / max(len(order), 1)
        state["last_acc"] = float(np.mean(correct)) if correct else 0.0
        return correct

    def evaluate_train(indices):
        probs = M.predict_proba(train.features[indices], state["params"], model_cfg)
        labels = train.labels[indices]
        return per_sample_loss(probs, labels), probs.argmax(axis=1) == labels

    curriculum = None
    if train_cfg.curriculum_enabled:
        curriculum = Curriculum(len(train), curriculum_cfg, rng)
        curriculum.start(evaluate_train)

    for k in range(1, train_cfg.total_epochs + 1):
        if curriculum is not None:
            curriculum.run_epoch(k, run_batches, evaluate_train)
        else:
            run_batches(rng.permutation(len(train)))
        report = evaluate(state["params"], model_cfg, test.features, test.labels)
        epoch_log.append({"epoch": k, "train_loss": state["last_loss"], "train_accuracy": state["last_acc"],
                          "test_accuracy": report.accuracy, "macro_f1": report.macro_f1})
        log.info("epoch %d loss %.4f train_acc %.3f test_acc %.3f", k, state["last_loss"],
                 state["last_acc"], report.accuracy)

    if curriculum is not None:
        difficulty = curriculum.state.difficulty.copy()
    else:
        losses, correct = evaluate_train(np.arange(len(train)))
        difficulty = losses
    return FoldResult(split, state["params"], report, epoch_log,
                      curriculum.log if curriculum is not None else [], difficulty, train.intensity.copy())


def train_run(dataset: Dataset, model_cfg: M.ModelConfig, train_cfg: TrainConfig,
              curriculum_cfg: CurriculumConfig = None, on_fold=None):
    """Cross-trial k-fold training; one fresh model per fold."""
    curriculum_cfg = curriculum_cfg or CurriculumConfig(total_epochs=train_cfg.total_epochs)
    if curriculum_cfg.total_epochs != train_cfg.total_epochs:
        curriculum_cfg = CurriculumConfig(**{**asdict(curriculum_cfg), "total_epochs": train_cfg.total_epochs})
    if dataset.classes != model_cfg.classes:
        raise ConfigError(f"dataset has {dataset.classes} classes, model expects {model_cfg.classes}")
    splits = cross_trial_split(dataset.trial_ids, train_cfg.folds, train_cfg.seed)
    results = []
    for split in splits:
        test_mask = np.isin(dataset.trial_ids, split.test_trial_ids)
        train_mask = np.isin(dataset.trial_ids, split.train_trial_ids)
        if np.any(test_mask & train_mask) or set(split.train_trial_ids) & set(split.test_trial_ids):
            raise ConfigError(f"fold {split.fold_id}: trial leakage between train and test")
        res = train_fold(dataset.subset(np.flatnonzero(train_mask)), dataset.subset(np.flatnonzero(test_mask)),
                         model_cfg, train_cfg, curriculum_cfg, seed=train_cfg.seed + 1000 * split.fold_id,
                         split=split)
        results.append(res)
        if on_fold is not None:
            on_fold(res)
    return RunResult(results, model_cfg, train_cfg, curriculum_cfg)


def format_mean_std(mean, std):
    return f"{mean:.4f}±{std:.4f}"
