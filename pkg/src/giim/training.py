"""Training loop, missing-view masking, optimiser and evaluation metrics."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numba
import numpy as np
from scipy.stats import rankdata

from .autodiff import Tensor, backward, concat, softmax_cross_entropy, vstack
from .data import Dataset, copy_case
from .errors import ConfigurationError, TrainingDivergedError, UndefinedMetricError
from .graph import build_exam_graph, build_lesion_graph
from .imputation import FeatureDatabase, Imputer, ImputerKind
from .model import HIDDEN_WIDTHS, MhgModel, NnBaseline

logger = logging.getLogger(__name__)

# independent RNG streams derived from one seed
_MASK, _INIT, _SHUFFLE, _LEARNABLE = 0, 1, 2, 3


class EvalMode(str, enum.Enum):
    FULL_VIEW = "full"
    MISS_VIEW = "miss"


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eta: float = 0.0
    missing_view: int = 0
    imputer: str = "constant"
    hidden: tuple = HIDDEN_WIDTHS
    learnable_rows: int = 4
    centered_covariance: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        # 0 is accepted as a null step
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")
        ImputerKind(self.imputer)
        return self


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


# --- masking -------------------------------------------------------------

def apply_missing(dataset: Dataset, eta: float, missing_view: int, seed: int = 0):
    """Blank ``missing_view`` in every lesion of ``floor(eta·N)`` seeded-chosen samples.

    Returns ``(masked dataset, sorted ids of masked patients)``; the input is
    left untouched.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must be in [0, 1], got {eta}")
    n = len(dataset)
    if not 0 <= missing_view < dataset.manifest.n_views:
        raise ConfigurationError(f"missing view {missing_view} out of range")
    k = int(math.floor(eta * n))
    chosen = set(_rng(seed, _MASK).permutation(n)[:k].tolist())
    cases, masked = [], []
    for i, case in enumerate(dataset.cases):
        case = copy_case(case)
        if i in chosen:
            for les in case.lesions:
                les.features[missing_view] = None
            masked.append(case.patient_id)
        cases.append(case)
    return dataset.with_cases(cases), sorted(masked)


# --- optimiser -----------------------------------------------------------

@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    for i in range(p.size):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update of flat float64 arrays, in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigurationError("params, grads and moments must share a shape")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    _adam_kernel(params.reshape(-1), grads.reshape(-1), state.m.reshape(-1), state.v.reshape(-1),
                 float(lr), float(beta1), float(beta2), c1, c2, float(eps))
    return params


class Adam:
    """Adam over a list of parameter tensors.

    The parameters are re-homed into one contiguous buffer so each step is a
    single pass over memory.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        sizes = [p.data.size for p in self.params]
        self.bounds = np.cumsum([0] + sizes)
        self.flat = np.empty(self.bounds[-1])
        for p, a, b in zip(self.params, self.bounds[:-1], self.bounds[1:]):
            self.flat[a:b] = p.data.reshape(-1)
            p.data = self.flat[a:b].reshape(p.data.shape)
        self.grad = np.zeros_like(self.flat)
        self.state = AdamState(np.zeros_like(self.flat), np.zeros_like(self.flat))

    def step(self):
        for p, a, b in zip(self.params, self.bounds[:-1], self.bounds[1:]):
            if p.grad is None:
                self.grad[a:b] = 0.0
            else:
                self.grad[a:b] = p.grad.reshape(-1)
        adam_step(self.flat, self.grad, self.state, self.lr, self.beta1, self.beta2, self.eps)


# --- forward adapters ----------------------------------------------------

def case_logits(model, case, imputed: dict, task: str):
    """Logits and target labels for one case, for either model family."""
    if isinstance(model, MhgModel):
        graph = build_exam_graph(case, imputed) if task == "exam" else build_lesion_graph(case, imputed)
        return model(graph), graph.target_labels()
    return model(baseline_inputs(case, imputed, task, model.views)), (
        [case.exam_label] if task == "exam" else [l.label for l in case.lesions])


def baseline_inputs(case, imputed: dict, task: str, views: Optional[Sequence[int]] = None) -> Tensor:
    """Concatenated view features, one row per lesion (or one per exam)."""
    V = case.n_views
    views = list(range(V)) if views is None else list(views)
    if task == "exam":
        rows_by_view = []
        for v in views:
            present = [l.features[v] for l in case.lesions if l.features[v] is not None]
            rows_by_view.append(Tensor(np.mean(present, axis=0)) if present else _as_row(imputed[v]))
        return concat(rows_by_view)
    rows = []
    for j, les in enumerate(case.lesions):
        parts = [Tensor(les.features[v]) if les.features[v] is not None else _as_row(imputed[(j, v)])
                 for v in views]
        rows.append(concat(parts))
    return vstack(rows)


def _as_row(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- training ------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    imputer: Imputer
    history: list
    masked_ids: list
    config: TrainConfig


def build_imputer(kind, dataset: Dataset, seed: int = 0, learnable_rows: int = 4,
                  centered: bool = False) -> Imputer:
    """An imputer whose database (if it needs one) is drawn from ``dataset``."""
    kind = ImputerKind(kind)
    m = dataset.manifest
    db = None
    if kind in (ImputerKind.RAG, ImputerKind.COVARIANCE):
        db = FeatureDatabase.from_cases(dataset.cases, m.task)
    return Imputer.create(kind, m.feature_width, m.n_views, db=db, seed=seed,
                          learnable_rows=learnable_rows, centered=centered)


def fit(model, dataset: Dataset, config: TrainConfig, imputer: Optional[Imputer] = None,
        callback: Optional[Callable] = None) -> TrainResult:
    """Per-patient gradient training of ``model`` (a graph model or the baseline).

    The retrieval database comes from the unmasked training cases; a training
    case never retrieves entries of its own patient.
    """
    config.validate()
    task = dataset.manifest.task
    masked, masked_ids = apply_missing(dataset, config.eta, config.missing_view, config.seed)
    if imputer is None:
        imputer = build_imputer(config.imputer, dataset, seed=_rng(config.seed, _LEARNABLE).integers(2**31),
                                learnable_rows=config.learnable_rows, centered=config.centered_covariance)
    params = list(model.parameters()) + imputer.parameters()
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    shuffle = _rng(config.seed, _SHUFFLE)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(masked))
        total_loss, correct, seen = 0.0, 0, 0
        for step, i in enumerate(order):
            case = masked.cases[i]
            imputed = imputer.impute_case(case, task, exclude=case.patient_id)
            logits, labels = case_logits(model, case, imputed, task)
            loss = softmax_cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, patient {case.patient_id!r}")
            backward(loss, params)
            opt.step()
            total_loss += value
            correct += int(np.sum(np.argmax(logits.data, axis=1) == np.asarray(labels)))
            seen += len(labels)
            if callback is not None:
                callback(epoch=epoch, step=step, model=model, imputer=imputer)
        record = {"epoch": epoch, "loss": total_loss / len(masked), "train_accuracy": correct / seen}
        logger.debug("epoch %d loss %.6f acc %.4f", epoch, record["loss"], record["train_accuracy"])
        history.append(record)
    return TrainResult(model, imputer, history, masked_ids, config)


def train(dataset: Dataset, config: TrainConfig, callback: Optional[Callable] = None) -> TrainResult:
    """Train a graph model on ``dataset``."""
    m = dataset.manifest
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    model = MhgModel(m.feature_width, m.n_views, m.n_classes, config.hidden,
                     seed=int(_rng(config.seed, _INIT).integers(2**31)))
    return fit(model, dataset, config, callback=callback)


def train_baseline(dataset: Dataset, config: TrainConfig, views: Optional[Sequence[int]] = None,
                   hidden: int = 64, callback: Optional[Callable] = None) -> TrainResult:
    """Train the two-layer baseline on the given views (default: all)."""
    m = dataset.manifest
    views = list(range(m.n_views)) if views is None else list(views)
    model = NnBaseline(len(views) * m.feature_width, m.n_classes, hidden,
                       seed=int(_rng(config.seed, _INIT).integers(2**31)), views=views)
    return fit(model, dataset, config, callback=callback)


# --- metrics -------------------------------------------------------------

def auc_binary(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigurationError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalReport:
    accuracy: float
    auc_macro: float
    per_class_auc: list
    confusion: list
    n_targets: int
    mode: str = "full"

    def to_record(self) -> dict:
        """Plain dict; undefined AUCs (NaN) become ``None`` so the record is strict JSON."""
        rec = asdict(self)
        rec["per_class_auc"] = [None if math.isnan(a) else a for a in self.per_class_auc]
        rec["auc_macro"] = None if math.isnan(self.auc_macro) else self.auc_macro
        return rec


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def report_from_scores(probs: np.ndarray, labels: Sequence[int], n_classes: int, mode: str = "full") -> EvalReport:
    labels = np.asarray(labels, dtype=int)
    preds = np.argmax(probs, axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(confusion, (labels, preds), 1)
    per_class = []
    for k in range(n_classes):
        onehot = (labels == k).astype(int)
        if 0 < onehot.sum() < onehot.size:
            per_class.append(auc_binary(probs[:, k], onehot))
        else:
            per_class.append(float("nan"))
    defined = [a for a in per_class if not math.isnan(a)]
    macro = float(np.mean(defined)) if defined else float("nan")
    n = int(labels.size)
    return EvalReport(float(np.trace(confusion)) / n, macro, per_class, confusion.tolist(), n, mode)


def predict(model, dataset: Dataset, imputer: Imputer):
    """Stacked logits and labels over every target of ``dataset``."""
    task = dataset.manifest.task
    all_logits, all_labels = [], []
    for case in dataset.cases:
        imputed = imputer.impute_case(case, task)
        logits, labels = case_logits(model, case, imputed, task)
        all_logits.append(logits.data)
        all_labels.extend(labels)
    return np.vstack(all_logits), all_labels


def evaluate(model, dataset: Dataset, imputer: Imputer, mode=EvalMode.FULL_VIEW,
             missing_view: int = 0) -> EvalReport:
    """Accuracy and one-vs-rest macro AUC; MISS_VIEW blanks ``missing_view`` everywhere first."""
    mode = EvalMode(mode)
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if mode is EvalMode.MISS_VIEW:
        dataset, _ = apply_missing(dataset, 1.0, missing_view)
    logits, labels = predict(model, dataset, imputer)
    return report_from_scores(softmax(logits), labels, dataset.manifest.n_classes, mode.value)
