"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"GIIMCKPT"  u32 version
    u32 n        n bytes of UTF-8 JSON metadata (manifest, model config, seed, imputer)
    u32 count    then per tensor:
        u32 len, name bytes, u32 ndim, ndim × u64 dims, row-major float64 values

Besides the model parameters the file carries whatever the imputer needs at
test time: the learnable tensors, the retrieval database and any fitted
covariance state.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from .autodiff import parameter
from .data import Manifest
from .errors import DatasetParseError
from .imputation import CovarianceFit, FeatureDatabase, Imputer, ImputerKind
from .model import MhgModel, NnBaseline

MAGIC = b"GIIMCKPT"
VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetParseError("truncated checkpoint", path)
    return buf


def _read_tensor(fh, path):
    (n,) = struct.unpack("<I", _read_exact(fh, 4, path))
    name = _read_exact(fh, n, path).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(fh, 8 * count, path), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def save_checkpoint(path, model, manifest: Manifest, imputer: Optional[Imputer] = None,
                    seed: Optional[int] = None, extra: Optional[dict] = None) -> None:
    tensors = {}
    if isinstance(model, MhgModel):
        meta_model = {"type": "mhg", **model.config()}
    else:
        meta_model = {"type": "baseline", "in_width": model.in_width, "n_classes": model.n_classes,
                      "hidden": model.hidden, "seed": model.seed, "views": model.views}
    for name, p in model.named_parameters().items():
        tensors[f"model.{name}"] = p.data
    meta_imp = None
    if imputer is not None:
        meta_imp = {"kind": imputer.kind.value, "width": imputer.width, "n_views": imputer.n_views,
                    "centered": imputer.centered, "learnable_views": sorted(imputer.learnable), "fits": []}
        for v, p in imputer.learnable.items():
            tensors[f"imputer.learnable.{v}"] = p.data
        if imputer.db is not None:
            meta_imp["db_ids"] = list(imputer.db.ids)
            meta_imp["db_owners"] = list(imputer.db.owners)
            tensors["imputer.db.features"] = imputer.db.features
        for i, ((views, missing), fit) in enumerate(sorted(imputer._fits.items())):
            meta_imp["fits"].append({"available_views": list(views), "missing_view": missing})
            tensors[f"imputer.fit.{i}.sigma"] = fit.sigma
            tensors[f"imputer.fit.{i}.mu"] = fit.mu
            tensors[f"imputer.fit.{i}.deltas"] = fit.deltas
    meta = {"manifest": manifest.to_json(), "model": meta_model, "imputer": meta_imp,
            "seed": seed, "extra": extra or {}}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def read_checkpoint(path):
    """Raw contents: ``(metadata dict, {name: array})``."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DatasetParseError("not a checkpoint file (bad magic)", path)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != VERSION:
            raise DatasetParseError(f"unsupported checkpoint version {version}", path)
        (n,) = struct.unpack("<I", _read_exact(fh, 4, path))
        meta = json.loads(_read_exact(fh, n, path).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        tensors = dict(_read_tensor(fh, path) for _ in range(count))
        if fh.read(1):
            raise DatasetParseError("trailing bytes after the last tensor", path)
    return meta, tensors


def load_checkpoint(path):
    """Rebuild ``(model, manifest, imputer, metadata)`` from a checkpoint."""
    meta, tensors = read_checkpoint(path)
    manifest = Manifest.from_json(meta["manifest"])
    mm = meta["model"]
    if mm["type"] == "mhg":
        model = MhgModel(mm["feature_width"], mm["n_views"], mm["n_classes"], mm["hidden"], mm["seed"])
    else:
        model = NnBaseline(mm["in_width"], mm["n_classes"], mm["hidden"], mm["seed"], mm["views"])
    for name, p in model.named_parameters().items():
        if f"model.{name}" not in tensors:
            raise DatasetParseError(f"checkpoint lacks parameter {name}", path)
        arr = tensors[f"model.{name}"]
        if arr.shape != p.data.shape:
            raise DatasetParseError(f"parameter {name} has shape {arr.shape}, expected {p.data.shape}", path)
        p.data = arr.copy()
    imputer = None
    mi = meta.get("imputer")
    if mi is not None:
        db = None
        if "imputer.db.features" in tensors:
            db = FeatureDatabase(tensors["imputer.db.features"], mi["db_ids"], mi["db_owners"])
        imputer = Imputer(ImputerKind(mi["kind"]), mi["width"], mi["n_views"], db=db, centered=mi["centered"])
        for v in mi["learnable_views"]:
            imputer.learnable[int(v)] = parameter(tensors[f"imputer.learnable.{v}"],
                                                  name=f"imputer.learnable.{v}")
        for i, f in enumerate(mi["fits"]):
            imputer._fits[(tuple(f["available_views"]), f["missing_view"])] = CovarianceFit(
                tensors[f"imputer.fit.{i}.sigma"], tensors[f"imputer.fit.{i}.mu"].reshape(-1),
                tensors[f"imputer.fit.{i}.deltas"], tuple(f["available_views"]), f["missing_view"])
    return model, manifest, imputer, meta
