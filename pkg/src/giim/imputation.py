"""Stand-in features for an absent view.

Four strategies:

``constant``
    a zero row.
``learnable``
    a trainable ``rows × c`` tensor, mean-pooled over rows and scaled to unit
    Frobenius norm; it is optimised together with the model.
``rag``
    stack the query's available views, find the database entry whose same
    views are most cosine-similar, copy that entry's missing view.
``covariance``
    summarise the available views as a difference vector
    ``delta = first - sum(rest)``, score database entries by
    ``delta_q^T Sigma delta_j`` and copy the best entry's missing view.

Both retrieval strategies return rows that exist verbatim in the database
and break ties towards the lowest entry index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor, frobenius_normalize, parameter, row_mean
from .errors import ConfigurationError, InsufficientDataError
from .graph import PatientCase, exam_view_features


class ImputerKind(str, enum.Enum):
    CONSTANT = "constant"
    LEARNABLE = "learnable"
    RAG = "rag"
    COVARIANCE = "covariance"


@dataclass
class FeatureDatabase:
    """Complete reference samples: ``features[i, v]`` is entry i's row for view v."""

    features: np.ndarray
    ids: list
    owners: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ConfigurationError(f"database features must be (n, V, c), got {self.features.shape}")
        if len(self.ids) != len(self.features):
            raise ConfigurationError("one id per database entry is required")
        if self.owners is None:
            self.owners = list(self.ids)
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("database features must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_views(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    @classmethod
    def from_cases(cls, cases: Sequence[PatientCase], task: str = "lesion") -> "FeatureDatabase":
        """Collect every complete lesion (or complete exam, for ``task='exam'``)."""
        rows, ids, owners = [], [], []
        for case in cases:
            if task == "exam":
                views = exam_view_features(case)
                if all(v is not None for v in views):
                    rows.append(np.stack(views))
                    ids.append(case.patient_id)
                    owners.append(case.patient_id)
                continue
            for lesion in case.lesions:
                if all(f is not None for f in lesion.features):
                    rows.append(np.stack(lesion.features))
                    ids.append(f"{case.patient_id}/{lesion.lesion_id}")
                    owners.append(case.patient_id)
        if not rows:
            raise InsufficientDataError("no complete samples to build a feature database from")
        return cls(np.stack(rows), ids, owners)

    def stack(self, views: Sequence[int]) -> np.ndarray:
        """Entry rows for ``views`` laid end to end: shape (n, len(views)·c)."""
        return self.features[:, list(views), :].reshape(len(self), -1)


def _argmax_lowest(scores: np.ndarray, allowed: Optional[np.ndarray] = None) -> int:
    if allowed is not None:
        if not allowed.any():
            raise InsufficientDataError("every database entry is excluded for this query")
        scores = np.where(allowed, scores, -np.inf)
    # np.argmax returns the first maximal index
    return int(np.argmax(scores))


def impute_constant(width: int) -> np.ndarray:
    if width < 1:
        raise ConfigurationError(f"width must be >= 1, got {width}")
    return np.zeros((1, width))


def learnable_vector(param: Tensor) -> Tensor:
    """Pool the learnable tensor's rows and normalise to unit Frobenius norm."""
    return frobenius_normalize(row_mean(param))


def cosine_scores(query: np.ndarray, stacks: np.ndarray) -> np.ndarray:
    """Cosine similarity of one query row against each row of ``stacks``.

    A zero-norm query or entry scores -1.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    en = np.linalg.norm(stacks, axis=1)
    scores = np.full(stacks.shape[0], -1.0)
    ok = (en > 0) & (qn > 0)
    # row-wise sums (not BLAS gemv) so identical entries score identically
    scores[ok] = (stacks[ok] * q).sum(axis=1) / (en[ok] * qn)
    return scores


def _available(query: Mapping, missing_view: int) -> list:
    views = sorted(v for v, f in query.items() if f is not None and v != missing_view)
    if not views:
        raise ConfigurationError("the query has no available view")
    return views


def rag_index(query_available: Mapping, missing_view: int, db: FeatureDatabase,
              allowed: Optional[np.ndarray] = None) -> int:
    if len(db) == 0:
        raise InsufficientDataError("empty feature database")
    views = _available(query_available, missing_view)
    x = np.concatenate([np.asarray(query_available[v], dtype=np.float64).reshape(-1) for v in views])
    return _argmax_lowest(cosine_scores(x, db.stack(views)), allowed)


def impute_rag(query_available: Mapping, missing_view: int, db: FeatureDatabase,
               allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """Copy the missing view of the most cosine-similar database entry.

    ``query_available`` maps view index to a feature row; views other than
    ``missing_view`` with a value are compared. ``allowed`` optionally masks
    entries out of the search.
    """
    i = rag_index(query_available, missing_view, db, allowed)
    return db.features[i, missing_view].reshape(1, -1).copy()


def difference_vector(rows: Sequence[np.ndarray]) -> np.ndarray:
    """First available row minus the sum of the others."""
    rows = [np.asarray(r, dtype=np.float64).reshape(-1) for r in rows]
    out = rows[0].copy()
    for r in rows[1:]:
        out -= r
    return out


@dataclass
class CovarianceFit:
    sigma: np.ndarray
    mu: np.ndarray
    deltas: np.ndarray
    available_views: tuple
    missing_view: int


def fit_covariance(db: FeatureDatabase, available_views: Sequence[int], missing_view: int) -> CovarianceFit:
    """Unbiased covariance of the per-entry difference vectors over ``available_views``."""
    n = len(db)
    if n < 2:
        raise InsufficientDataError(f"covariance needs at least 2 database entries, got {n}")
    views = tuple(int(v) for v in available_views)
    if not views or missing_view in views:
        raise ConfigurationError(f"bad view split: available={views}, missing={missing_view}")
    deltas = db.features[:, views[0], :].copy()
    for v in views[1:]:
        deltas -= db.features[:, v, :]
    mu = deltas.mean(axis=0)
    centered = deltas - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return CovarianceFit(sigma, mu, deltas, views, int(missing_view))


def covariance_scores(delta_q: np.ndarray, fit: CovarianceFit, centered: bool = False) -> np.ndarray:
    if centered:
        # Mahalanobis-style variant; pinv keeps it defined for rank-deficient Sigma
        inv = np.linalg.pinv(fit.sigma, hermitian=True)
        return ((fit.deltas - fit.mu) * (inv @ (delta_q - fit.mu))).sum(axis=1)
    return (fit.deltas * (fit.sigma @ delta_q)).sum(axis=1)


def covariance_index(query_available: Mapping, missing_view: int, fit: CovarianceFit,
                     centered: bool = False, allowed: Optional[np.ndarray] = None) -> int:
    views = tuple(_available(query_available, missing_view))
    if views != fit.available_views or missing_view != fit.missing_view:
        raise ConfigurationError(
            f"query views {views} / missing {missing_view} do not match the fit "
            f"({fit.available_views} / {fit.missing_view})")
    delta_q = difference_vector([query_available[v] for v in views])
    return _argmax_lowest(covariance_scores(delta_q, fit, centered), allowed)


def impute_covariance(query_available: Mapping, missing_view: int, fit: CovarianceFit,
                      db: FeatureDatabase, centered: bool = False,
                      allowed: Optional[np.ndarray] = None) -> np.ndarray:
    j = covariance_index(query_available, missing_view, fit, centered, allowed)
    return db.features[j, missing_view].reshape(1, -1).copy()


@dataclass
class Imputer:
    """A configured strategy, usable on whole cases.

    ``exclude`` in :meth:`impute` hides database entries owned by the given
    patient, so a training case never retrieves its own features.
    """

    kind: ImputerKind
    width: int
    n_views: int
    db: Optional[FeatureDatabase] = None
    learnable: dict = field(default_factory=dict)
    centered: bool = False
    _fits: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.kind = ImputerKind(self.kind)

    @classmethod
    def create(cls, kind, width: int, n_views: int, db: Optional[FeatureDatabase] = None,
               seed: int = 0, learnable_rows: int = 4, centered: bool = False) -> "Imputer":
        kind = ImputerKind(kind)
        imp = cls(kind, width, n_views, db=db, centered=centered)
        if kind in (ImputerKind.RAG, ImputerKind.COVARIANCE):
            if db is None:
                raise ConfigurationError(f"the {kind.value} imputer needs a feature database")
            if db.width != width or db.n_views != n_views:
                raise ConfigurationError(
                    f"database is {db.n_views} views × {db.width}, expected {n_views} × {width}")
            if kind is ImputerKind.COVARIANCE and len(db) < 2:
                raise InsufficientDataError("the covariance imputer needs at least 2 database entries")
        if kind is ImputerKind.LEARNABLE:
            if learnable_rows < 1:
                raise ConfigurationError("learnable_rows must be >= 1")
            rng = np.random.default_rng(seed)
            for v in range(n_views):
                imp.learnable[v] = parameter(rng.normal(size=(learnable_rows, width)),
                                             name=f"imputer.learnable.{v}")
        return imp

    def parameters(self) -> list:
        return [self.learnable[v] for v in sorted(self.learnable)]

    def fit_for(self, available_views: Sequence[int], missing_view: int) -> CovarianceFit:
        key = (tuple(available_views), int(missing_view))
        if key not in self._fits:
            self._fits[key] = fit_covariance(self.db, key[0], key[1])
        return self._fits[key]

    def _allowed(self, exclude: Optional[str]) -> Optional[np.ndarray]:
        if exclude is None or self.db is None:
            return None
        return np.array([o != exclude for o in self.db.owners])

    def impute(self, available: Mapping, missing_view: int, exclude: Optional[str] = None):
        """A 1×c stand-in for ``missing_view`` (a Tensor for the learnable kind)."""
        if self.kind is ImputerKind.CONSTANT:
            return impute_constant(self.width)
        if self.kind is ImputerKind.LEARNABLE:
            return learnable_vector(self.learnable[missing_view])
        if self.kind is ImputerKind.RAG:
            return impute_rag(available, missing_view, self.db, self._allowed(exclude))
        views = _available(available, missing_view)
        fit = self.fit_for(views, missing_view)
        return impute_covariance(available, missing_view, fit, self.db, self.centered,
                                 self._allowed(exclude))

    def impute_case(self, case: PatientCase, task: str = "lesion", exclude: Optional[str] = None) -> dict:
        """Stand-ins for every absent slot of ``case``, keyed as the graph builders expect."""
        out = {}
        if task == "exam":
            views = exam_view_features(case)
            available = {v: f for v, f in enumerate(views) if f is not None}
            for v, f in enumerate(views):
                if f is None:
                    out[v] = self.impute(available, v, exclude)
            return out
        for j, lesion in enumerate(case.lesions):
            available = {v: f for v, f in enumerate(lesion.features) if f is not None}
            for v, f in enumerate(lesion.features):
                if f is None:
                    out[(j, v)] = self.impute(available, v, exclude)
        return out
