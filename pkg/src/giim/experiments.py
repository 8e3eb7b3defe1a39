"""Batch experiments: the missing-view sweep and the gradient check."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, softmax_cross_entropy
from .data import Dataset
from .errors import GiimError, SweepCellError
from .graph import LesionRecord, PatientCase, build_lesion_graph
from .imputation import Imputer, ImputerKind, learnable_vector
from .model import MhgModel, NnBaseline, nn_baseline_forward
from .training import EvalMode, TrainConfig, evaluate, train

SWEEP_ETAS = (0.0, 0.2, 0.5, 0.7, 1.0)
IMPUTERS = tuple(k.value for k in ImputerKind)


def cell_seed(master: int, eta_index: int, imputer_index: int) -> int:
    return int(np.random.SeedSequence([master, eta_index, imputer_index]).generate_state(1)[0])


@dataclass
class SweepTable:
    etas: list
    imputers: list
    cells: dict = field(default_factory=dict)

    def records(self) -> list:
        out = []
        for imp in self.imputers:
            for eta in self.etas:
                out.append({"imputer": imp, "eta": eta, **self.cells[(imp, eta)]})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def shape(self) -> tuple:
        """(rows, cells per row): one row per imputer, a miss and a full cell per eta."""
        return len(self.imputers), 2 * len(self.etas)

    def render(self) -> str:
        head = ["imputer"] + [f"miss@{e:g}" for e in self.etas] + [f"full@{e:g}" for e in self.etas]
        rows = [head]
        for imp in self.imputers:
            rows.append([imp] + [f"{self.cells[(imp, e)]['miss_accuracy']:.4f}" for e in self.etas]
                        + [f"{self.cells[(imp, e)]['full_accuracy']:.4f}" for e in self.etas])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def run_sweep(train_set: Dataset, test_set: Dataset, etas: Sequence[float] = SWEEP_ETAS,
              imputers: Sequence[str] = IMPUTERS, base: Optional[TrainConfig] = None,
              seed: int = 0, on_cell: Optional[Callable] = None) -> SweepTable:
    """Train once per (eta, imputer); evaluate each model with full and missing views."""
    base = base or TrainConfig()
    etas = [float(e) for e in etas]
    imputers = [ImputerKind(i).value for i in imputers]
    for e in etas:
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"eta {e} outside [0, 1]")
    table = SweepTable(etas, imputers)
    for j, imp in enumerate(imputers):
        for i, eta in enumerate(etas):
            cfg = replace(base, eta=eta, imputer=imp, seed=cell_seed(seed, i, j))
            try:
                result = train(train_set, cfg)
                full = evaluate(result.model, test_set, result.imputer, EvalMode.FULL_VIEW, cfg.missing_view)
                miss = evaluate(result.model, test_set, result.imputer, EvalMode.MISS_VIEW, cfg.missing_view)
            except GiimError as exc:
                raise SweepCellError(f"[eta={eta}, imputer={imp}] {exc}") from exc
            table.cells[(imp, eta)] = {
                "full_accuracy": full.accuracy, "miss_accuracy": miss.accuracy,
                "full_auc": full.auc_macro, "miss_auc": miss.auc_macro,
                "final_loss": result.history[-1]["loss"],
            }
            if on_cell is not None:
                on_cell(imp, eta, table.cells[(imp, eta)])
    return table


# --- gradient checking ---------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = loss_fn()
        flat[i] = orig - h
        minus = loss_fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return grad


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> dict:
    """Max relative error per parameter name, analytic vs central differences."""
    loss = build_loss()
    analytic = {p: g.copy() for p, g in backward(loss, params).items()}
    errors = {}
    for p in params:
        numeric = numeric_gradient(lambda: build_loss().item(), p, h)
        err = relative_error(analytic[p], numeric)
        errors[p.name] = float(err.max()) if err.size else 0.0
    return errors


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    per_layer: dict
    per_parameter: dict
    tolerance: float
    seed: int
    redraws: int

    def to_record(self) -> dict:
        return {"passed": self.passed, "max_rel_error": self.max_rel_error, "per_layer": self.per_layer,
                "tolerance": self.tolerance, "seed": self.seed, "redraws": self.redraws}


def random_case(rng: np.random.Generator, n_lesions: int, n_views: int, width: int, n_classes: int,
                missing_view: Optional[int] = None) -> PatientCase:
    lesions = []
    for j in range(n_lesions):
        feats = [rng.uniform(-1, 1, width) for _ in range(n_views)]
        if missing_view is not None and j == 0:
            feats[missing_view] = None
        lesions.append(LesionRecord(f"l{j}", int(rng.integers(n_classes)), feats))
    return PatientCase("gradcheck", lesions)


def _layer_of(name: str) -> str:
    return name.split(".")[0]


def run_gradcheck(widths: Sequence[int] = (8, 8, 8, 8, 8), seed: int = 0, n_classes: int = 3,
                  feature_width: int = 3, n_views: int = 2, n_lesions: int = 2,
                  h: float = 1e-5, tolerance: float = 1e-4, kink_margin: float = 1e-4,
                  max_redraws: int = 50) -> GradcheckReport:
    """Finite-difference check of every parameter of a reduced graph model.

    One view of the first lesion is absent and filled by a learnable imputer,
    so its tensor is checked too. Draws whose ReLU inputs sit within
    ``kink_margin`` of zero are redrawn: central differences straddling the
    kink do not estimate the derivative.
    """
    if any(w >= 16 for w in widths):
        raise ValueError(f"gradcheck widths must be < 16, got {list(widths)}")
    for redraw in range(max_redraws):
        rng = np.random.default_rng([seed, redraw])
        model = MhgModel(feature_width, n_views, n_classes, widths, seed=int(rng.integers(2**31)))
        imputer = Imputer.create("learnable", feature_width, n_views, seed=int(rng.integers(2**31)))
        case = random_case(rng, n_lesions, n_views, feature_width, n_classes, missing_view=n_views - 1)

        def build_loss(record=None):
            imputed = {(0, n_views - 1): learnable_vector(imputer.learnable[n_views - 1])}
            graph = build_lesion_graph(case, imputed)
            return softmax_cross_entropy(model(graph, record), graph.target_labels())

        record = []
        build_loss(record)
        hidden_pre = record[: -2]  # the last layer (both kinds) has no ReLU
        if min(np.abs(z).min() for z in hidden_pre) >= kink_margin:
            break
    else:
        raise RuntimeError(f"no kink-free draw in {max_redraws} attempts")
    params = model.parameters() + [imputer.learnable[n_views - 1]]
    per_param = check_gradients(build_loss, params, h)
    per_layer = {}
    for name, err in per_param.items():
        key = "imputer" if name.startswith("imputer") else _layer_of(name)
        per_layer[key] = max(per_layer.get(key, 0.0), err)
    worst = max(per_param.values())
    return GradcheckReport(bool(worst < tolerance), worst, per_layer, per_param, tolerance, seed, redraw)


def gradcheck_baseline(seed: int = 0, in_width: int = 6, hidden: int = 8, n_classes: int = 3,
                       n_rows: int = 4, h: float = 1e-5, kink_margin: float = 1e-4) -> dict:
    for redraw in range(50):
        rng = np.random.default_rng([seed, 1000 + redraw])
        model = NnBaseline(in_width, n_classes, hidden, seed=int(rng.integers(2**31)))
        x = Tensor(rng.uniform(-1, 1, (n_rows, in_width)))
        labels = rng.integers(n_classes, size=n_rows)
        pre = x.data @ model.W1.data + model.b1.data
        if np.abs(pre).min() >= kink_margin:
            break
    return check_gradients(lambda: softmax_cross_entropy(nn_baseline_forward(model, x), labels),
                           model.parameters(), h)
