"""Feature datasets: manifest + case files, synthetic generation, patient splits.

A dataset is two files. The manifest is a small JSON object::

    {"view_names": ["arterial", "venous", "delay"], "feature_width": 16,
     "class_names": ["benign", "malignant"], "task": "lesion"}

The case file holds one JSON object per line, one patient per line::

    {"patient_id": "p0001", "exam_label": null,
     "lesions": [{"lesion_id": "l00", "label": 1,
                  "features": {"arterial": [...], "venous": null, "delay": [...]}}]}

``null`` marks an absent view. Numbers are written with 17 significant
digits so a save/load round trip is exact.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetParseError
from .graph import LesionRecord, PatientCase, exam_label_of

logger = logging.getLogger(__name__)

TASKS = ("lesion", "exam")


@dataclass(frozen=True)
class Manifest:
    view_names: tuple
    feature_width: int
    class_names: tuple
    task: str = "lesion"

    def __post_init__(self):
        object.__setattr__(self, "view_names", tuple(self.view_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(set(self.view_names)) != len(self.view_names) or not self.view_names:
            raise ConfigurationError(f"view names must be unique and non-empty: {self.view_names}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigurationError(f"class names must be unique: {self.class_names}")
        if len(self.class_names) < 2:
            raise ConfigurationError("at least two classes are required")
        if int(self.feature_width) < 1:
            raise ConfigurationError(f"feature_width must be >= 1, got {self.feature_width}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")

    @property
    def n_views(self) -> int:
        return len(self.view_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def view_index(self, view) -> int:
        """Accept a view name or an index."""
        if isinstance(view, (int, np.integer)):
            if not 0 <= view < self.n_views:
                raise ConfigurationError(f"view index {view} out of range [0, {self.n_views})")
            return int(view)
        if view in self.view_names:
            return self.view_names.index(view)
        if isinstance(view, str) and view.isdigit():
            return self.view_index(int(view))
        raise ConfigurationError(f"unknown view {view!r}; known: {list(self.view_names)}")

    def to_json(self) -> dict:
        return {"view_names": list(self.view_names), "feature_width": int(self.feature_width),
                "class_names": list(self.class_names), "task": self.task}

    @classmethod
    def from_json(cls, obj: dict) -> "Manifest":
        return cls(obj["view_names"], int(obj["feature_width"]), obj["class_names"], obj.get("task", "lesion"))


@dataclass
class Dataset:
    manifest: Manifest
    cases: list = field(default_factory=list)

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __getitem__(self, i):
        return self.cases[i]

    def with_cases(self, cases) -> "Dataset":
        return Dataset(self.manifest, list(cases))

    @property
    def n_lesions(self) -> int:
        return sum(len(c.lesions) for c in self.cases)

    def labels(self) -> list:
        """Target labels in evaluation order (per lesion, or per exam)."""
        if self.manifest.task == "exam":
            return [c.exam_label for c in self.cases]
        return [les.label for c in self.cases for les in c.lesions]


def copy_case(case: PatientCase) -> PatientCase:
    lesions = [LesionRecord(l.lesion_id, l.label, [None if f is None else f.copy() for f in l.features])
               for l in case.lesions]
    return replace(case, lesions=lesions)


# --- file format ---------------------------------------------------------

def _fmt_row(row: np.ndarray) -> str:
    return "[" + ", ".join(format(float(x), ".17g") for x in row) + "]"


def case_to_line(case: PatientCase, manifest: Manifest) -> str:
    lesion_parts = []
    for les in case.lesions:
        feats = ", ".join(
            f"{json.dumps(name)}: {'null' if f is None else _fmt_row(f)}"
            for name, f in zip(manifest.view_names, les.features))
        lesion_parts.append(
            f'{{"lesion_id": {json.dumps(les.lesion_id)}, "label": {int(les.label)}, '
            f'"features": {{{feats}}}}}')
    exam = "null" if case.exam_label is None else str(int(case.exam_label))
    return (f'{{"patient_id": {json.dumps(case.patient_id)}, "exam_label": {exam}, '
            f'"lesions": [{", ".join(lesion_parts)}]}}')


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


def load_manifest(path) -> Manifest:
    try:
        obj = json.loads(Path(path).read_text())
        return Manifest.from_json(obj)
    except (json.JSONDecodeError, KeyError, TypeError, ConfigurationError) as exc:
        raise DatasetParseError(f"invalid manifest: {exc}", path) from exc


def save_dataset(dataset: Dataset, manifest_path, cases_path) -> None:
    save_manifest(dataset.manifest, manifest_path)
    with open(cases_path, "w") as fh:
        for case in dataset.cases:
            fh.write(case_to_line(case, dataset.manifest) + "\n")


def _is_index(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _parse_case(obj, manifest: Manifest, path, lineno) -> PatientCase:
    def fail(msg):
        raise DatasetParseError(msg, path, lineno)

    if not isinstance(obj, dict):
        fail("record must be a JSON object")
    pid = obj.get("patient_id")
    if not isinstance(pid, str) or not pid:
        fail("missing or empty patient_id")
    C = manifest.n_classes
    exam = obj.get("exam_label")
    if exam is not None and (not _is_index(exam) or not 0 <= exam < C):
        fail(f"patient {pid}: exam_label {exam!r} is not a class index in [0, {C})")
    lesions_raw = obj.get("lesions")
    if not isinstance(lesions_raw, list) or not lesions_raw:
        fail(f"patient {pid}: lesions must be a non-empty list")
    lesions, seen = [], set()
    for raw in lesions_raw:
        lid = raw.get("lesion_id") if isinstance(raw, dict) else None
        if not isinstance(lid, str) or not lid:
            fail(f"patient {pid}: lesion without a lesion_id")
        if lid in seen:
            fail(f"patient {pid}: duplicate lesion_id {lid!r}")
        seen.add(lid)
        label = raw.get("label")
        if not _is_index(label) or not 0 <= label < C:
            fail(f"patient {pid} lesion {lid}: label {label!r} is not a class index in [0, {C})")
        feats_raw = raw.get("features")
        if not isinstance(feats_raw, dict):
            fail(f"patient {pid} lesion {lid}: features must be an object keyed by view name")
        unknown = set(feats_raw) - set(manifest.view_names)
        if unknown:
            fail(f"patient {pid} lesion {lid}: unknown view(s) {sorted(unknown)}")
        feats = []
        for view in manifest.view_names:
            if view not in feats_raw:
                fail(f"patient {pid} lesion {lid} view {view}: missing (use null for an absent view)")
            row = feats_raw[view]
            if row is None:
                feats.append(None)
                continue
            arr = np.asarray(row, dtype=np.float64) if isinstance(row, list) else None
            if arr is None or arr.ndim != 1 or arr.size != manifest.feature_width:
                got = len(row) if isinstance(row, list) else type(row).__name__
                fail(f"patient {pid} lesion {lid} view {view}: expected {manifest.feature_width} "
                     f"numbers, got {got}")
            if not np.all(np.isfinite(arr)):
                fail(f"patient {pid} lesion {lid} view {view}: non-finite value")
            feats.append(arr)
        if all(f is None for f in feats) and manifest.task == "lesion":
            fail(f"patient {pid} lesion {lid}: every view is absent")
        lesions.append(LesionRecord(lid, label, feats))
    lesions.sort(key=lambda l: l.lesion_id)
    return PatientCase(pid, lesions, exam)


def load_dataset(manifest_path, cases_path) -> Dataset:
    """Read a manifest and its case file; patients sorted by id, lesions by id."""
    manifest = load_manifest(manifest_path)
    cases, ids = [], {}
    with open(cases_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"malformed JSON: {exc.msg}", cases_path, lineno) from exc
            case = _parse_case(obj, manifest, cases_path, lineno)
            if case.patient_id in ids:
                raise DatasetParseError(
                    f"duplicate patient_id {case.patient_id!r} (first seen on line {ids[case.patient_id]})",
                    cases_path, lineno)
            ids[case.patient_id] = lineno
            cases.append(case)
    if manifest.task == "exam":
        for case in cases:
            if case.exam_label is None:
                raise DatasetParseError(f"patient {case.patient_id}: exam task needs an exam_label",
                                        cases_path, ids[case.patient_id])
    cases.sort(key=lambda c: c.patient_id)
    return Dataset(manifest, cases)


# --- synthetic data ------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Recipe for a synthetic multi-view dataset.

    With ``interaction`` the class is ``(b1 + b2) mod C`` for two latent
    values carried by the first two views, so no single view says anything
    about the class (XOR for C=2); further views carry an independent latent.
    Without it every view carries the class directly. Each view feature is
    its latent's prototype plus isotropic gaussian noise.
    """

    n_patients: Optional[int] = 100
    n_lesions: Optional[int] = None
    lesions_per_patient: tuple = (1, 3)
    n_views: int = 3
    feature_width: int = 16
    n_classes: int = 2
    noise_sigma: float = 0.5
    separation: float = 4.0
    interaction: bool = False
    class_weights: Optional[Sequence[float]] = None
    prototypes: Optional[np.ndarray] = None
    task: str = "lesion"
    seed: int = 0
    prototype_seed: Optional[int] = None
    view_names: Optional[Sequence[str]] = None
    class_names: Optional[Sequence[str]] = None

    def manifest(self) -> Manifest:
        views = self.view_names or DEFAULT_VIEW_NAMES.get(self.n_views) or [f"view{v}" for v in range(self.n_views)]
        classes = self.class_names or [f"class{k}" for k in range(self.n_classes)]
        return Manifest(views, self.feature_width, classes, self.task)

    def make_prototypes(self) -> np.ndarray:
        """(C, V, c) prototype means, at pairwise distance about ``separation``."""
        if self.prototypes is not None:
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.shape != (self.n_classes, self.n_views, self.feature_width):
                raise ConfigurationError(
                    f"prototypes must have shape {(self.n_classes, self.n_views, self.feature_width)}, "
                    f"got {protos.shape}")
            return protos
        seed = self.seed if self.prototype_seed is None else self.prototype_seed
        rng = np.random.default_rng([seed, 7919])
        scale = self.separation / np.sqrt(2.0 * self.feature_width)
        return rng.normal(size=(self.n_classes, self.n_views, self.feature_width)) * scale


DEFAULT_VIEW_NAMES = {2: ["CC", "MLO"], 3: ["arterial", "venous", "delay"]}


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    if spec.noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    if (spec.n_patients is None) == (spec.n_lesions is None):
        raise ConfigurationError("give exactly one of n_patients or n_lesions")
    lo, hi = spec.lesions_per_patient
    if not 1 <= lo <= hi:
        raise ConfigurationError(f"bad lesions_per_patient range {spec.lesions_per_patient}")
    if spec.interaction and spec.n_views < 2:
        raise ConfigurationError("interaction data needs at least two views")
    C, V = spec.n_classes, spec.n_views
    weights = np.full(C, 1.0 / C) if spec.class_weights is None else np.asarray(spec.class_weights, float)
    if weights.shape != (C,) or np.any(weights < 0) or weights.sum() <= 0:
        raise ConfigurationError(f"class_weights must be {C} non-negative numbers")
    weights = weights / weights.sum()
    manifest = spec.manifest()
    protos = spec.make_prototypes()
    rng = np.random.default_rng([spec.seed, 104729])

    cases = []
    remaining = spec.n_lesions
    p = 0
    while (spec.n_patients is not None and p < spec.n_patients) or (remaining is not None and remaining > 0):
        n_les = int(rng.integers(lo, hi + 1))
        if remaining is not None:
            n_les = min(n_les, remaining)
            remaining -= n_les
        lesions = []
        for j in range(n_les):
            label = int(rng.choice(C, p=weights))
            if spec.interaction:
                latent = rng.integers(0, C, size=V)
                latent[1] = (label - latent[0]) % C
            else:
                latent = np.full(V, label)
            feats = [protos[latent[v], v] + spec.noise_sigma * rng.normal(size=spec.feature_width)
                     for v in range(V)]
            lesions.append(LesionRecord(f"l{j:02d}", label, feats))
        exam = exam_label_of([l.label for l in lesions]) if spec.task == "exam" else None
        cases.append(PatientCase(f"p{p:05d}", lesions, exam))
        p += 1
    return Dataset(manifest, cases)


def synthetic_benchmark(seed: int = 0, n_train: int = 400, n_test: int = 150, **overrides):
    """Train/test lesion sets drawn around the same prototypes.

    Defaults give the interaction benchmark: C=2, V=3, c=16.
    """
    params = dict(n_views=3, feature_width=16, n_classes=2, interaction=True,
                  noise_sigma=0.5, separation=4.0, lesions_per_patient=(2, 6))
    params.update(overrides)
    train = generate_synthetic(SyntheticSpec(n_patients=None, n_lesions=n_train, seed=2 * seed,
                                             prototype_seed=seed, **params))
    test = generate_synthetic(SyntheticSpec(n_patients=None, n_lesions=n_test, seed=2 * seed + 1,
                                            prototype_seed=seed, **params))
    test.cases = [replace(c, patient_id="t" + c.patient_id[1:]) for c in test.cases]
    return train, test


# --- splitting -----------------------------------------------------------

def patient_stratum(case: PatientCase) -> int:
    """Exam label if present, else the most common lesion label (ties to the lowest)."""
    if case.exam_label is not None:
        return int(case.exam_label)
    counts = Counter(l.label for l in case.lesions)
    top = max(counts.values())
    return min(k for k, n in counts.items() if n == top)


def split_by_patient(dataset: Dataset, test_fraction: float, seed: int = 0):
    """Patient-disjoint, label-stratified (train, test) split.

    The test split gets ``floor(test_fraction · n_patients)`` patients, spread
    over strata by largest remainder. Strata with fewer than two patients
    are pooled and split without stratification.
    """
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([seed, 31337])
    n = len(dataset)
    n_test = int(np.floor(test_fraction * n))
    strata = {}
    for i, case in enumerate(dataset.cases):
        strata.setdefault(patient_stratum(case), []).append(i)
    small = sorted(k for k, idx in strata.items() if len(idx) < 2)
    if small:
        warnings.warn(f"classes {small} have fewer than 2 patients; splitting them unstratified",
                      stacklevel=2)
        pooled = [i for k in small for i in strata.pop(k)]
        strata["pooled"] = pooled
    keys = sorted(strata, key=str)
    quotas = {k: test_fraction * len(strata[k]) for k in keys}
    take = {k: int(np.floor(quotas[k])) for k in keys}
    spare = n_test - sum(take.values())
    by_remainder = sorted(keys, key=lambda k: (-(quotas[k] - take[k]), str(k)))
    for k in by_remainder[:spare]:
        take[k] += 1
    test_idx = set()
    for k in keys:
        idx = strata[k]
        chosen = rng.permutation(len(idx))[: take[k]]
        test_idx.update(idx[c] for c in chosen)
    train = [c for i, c in enumerate(dataset.cases) if i not in test_idx]
    test = [c for i, c in enumerate(dataset.cases) if i in test_idx]
    return dataset.with_cases(train), dataset.with_cases(test)
