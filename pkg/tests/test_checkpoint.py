import struct

import numpy as np
import pytest

from giim.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint
from giim.data import SyntheticSpec, generate_synthetic
from giim.errors import DatasetParseError
from giim.training import EvalMode, TrainConfig, evaluate, train, train_baseline


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(n_patients=12, n_views=3, feature_width=4, seed=0))


@pytest.mark.parametrize("kind", ["constant", "learnable", "rag", "covariance"])
def test_round_trip_reproduces_predictions(tmp_path, dataset, kind):
    res = train(dataset, TrainConfig(epochs=1, hidden=(6, 5), imputer=kind, eta=0.5, missing_view=2))
    before = evaluate(res.model, dataset, res.imputer, EvalMode.MISS_VIEW, 2)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, res.model, dataset.manifest, res.imputer, seed=3, extra={"note": "x"})
    model, manifest, imputer, meta = load_checkpoint(path)
    assert manifest == dataset.manifest
    assert meta["seed"] == 3 and meta["extra"] == {"note": "x"}
    for p, q in zip(res.model.parameters(), model.parameters()):
        assert p.name == q.name and p.data.tobytes() == q.data.tobytes()
    after = evaluate(model, dataset, imputer, EvalMode.MISS_VIEW, 2)
    assert after == before


def test_covariance_fit_is_stored(tmp_path, dataset):
    res = train(dataset, TrainConfig(epochs=1, hidden=(4,), imputer="covariance", eta=1.0, missing_view=1))
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, res.model, dataset.manifest, res.imputer)
    _, tensors = read_checkpoint(path)
    assert "imputer.fit.0.sigma" in tensors
    fit = load_checkpoint(path)[2]._fits[((0, 2), 1)]
    np.testing.assert_array_equal(fit.sigma, res.imputer._fits[((0, 2), 1)].sigma)


def test_baseline_round_trip(tmp_path, dataset):
    res = train_baseline(dataset, TrainConfig(epochs=1), views=[0, 2], hidden=5)
    save_checkpoint(tmp_path / "b.ckpt", res.model, dataset.manifest, res.imputer)
    model = load_checkpoint(tmp_path / "b.ckpt")[0]
    assert model.views == [0, 2]
    assert model.W1.data.tobytes() == res.model.W1.data.tobytes()


def test_byte_layout(tmp_path, dataset):
    res = train(dataset, TrainConfig(epochs=1, hidden=(3,)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.model, dataset.manifest)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (version, hlen) = struct.unpack_from("<II", raw, 8)
    assert version == 1
    off = 16 + hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    (nlen,) = struct.unpack_from("<I", raw, off)
    name = raw[off + 4: off + 4 + nlen].decode()
    off += 4 + nlen
    (ndim,) = struct.unpack_from("<I", raw, off)
    shape = struct.unpack_from(f"<{ndim}Q", raw, off + 4)
    off += 4 + 8 * ndim
    values = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=off).reshape(shape)
    assert count == len(res.model.parameters())
    np.testing.assert_array_equal(values, res.model.named_parameters()[name[len("model."):]].data)


def test_deterministic_bytes(tmp_path, dataset):
    for i in range(2):
        res = train(dataset, TrainConfig(epochs=1, hidden=(3,), seed=9))
        save_checkpoint(tmp_path / f"{i}.ckpt", res.model, dataset.manifest, res.imputer, seed=9)
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()


@pytest.mark.parametrize("mangle, message", [
    (lambda b: b"NOTACKPT" + b[8:], "bad magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:8] + struct.pack("<I", 99) + b[12:], "version"),
])
def test_corrupt(tmp_path, dataset, mangle, message):
    res = train(dataset, TrainConfig(epochs=1, hidden=(3,)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.model, dataset.manifest)
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(DatasetParseError, match=message):
        load_checkpoint(path)
