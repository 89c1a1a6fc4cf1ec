import json
import zipfile

import numpy as np
import pytest
import torch

from chreode.checkpoint import load_checkpoint, read_meta, save_checkpoint, save_identity_stub
from chreode.evaluation import IdentityPredictor, OperatorPredictor
from chreode.exceptions import DataError
from chreode.operator import build_variant


def randomized_model(variant="selected", seed=0):
    model = build_variant(variant, 3, width=8, depth=1, rank=2, n_periodic=2, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


@pytest.mark.parametrize("variant", ["selected", "unconstrained", "tied_time2vec", "tied_fourier"])
def test_round_trip_preserves_predictions(tmp_path, variant):
    model = randomized_model(variant)
    path = save_checkpoint(model, tmp_path / "m.ckpt", extra={"steps": 7})
    loaded, meta = load_checkpoint(path)
    assert meta["extra"] == {"steps": 7} and meta["config"]["variant"] == variant
    for (name, a), b in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), name
    z = np.random.default_rng(1).normal(size=(6, 3))
    np.testing.assert_array_equal(
        OperatorPredictor(model).sample(z, 0.5, 3, 0), OperatorPredictor(loaded).sample(z, 0.5, 3, 0)
    )


def test_saving_twice_is_byte_identical(tmp_path):
    model = randomized_model()
    a = save_checkpoint(model, tmp_path / "a.ckpt").read_bytes()
    b = save_checkpoint(model, tmp_path / "b.ckpt").read_bytes()
    assert a == b


def test_archive_is_plain_numpy_readable(tmp_path):
    model = randomized_model()
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("__meta__.json"))
    arrays = np.load(path)
    for name in meta["param_order"]:
        np.testing.assert_array_equal(arrays[name], model.state_dict()[name].numpy())


def test_identity_stub(tmp_path):
    path = save_identity_stub(tmp_path / "id.ckpt", dim=4)
    model, meta = load_checkpoint(path)
    assert model is None and meta["kind"] == "identity" and meta["config"]["dim"] == 4
    z = np.ones((2, 4))
    assert np.array_equal(IdentityPredictor().sample(z, 1.0, 3, 0)[:, 0], z)


def test_missing_and_foreign_files_are_rejected(tmp_path):
    with pytest.raises(DataError, match="not found"):
        read_meta(tmp_path / "none.ckpt")
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a zip")
    with pytest.raises(DataError, match="not a readable checkpoint"):
        load_checkpoint(junk)


def test_wrong_version_is_rejected(tmp_path):
    path = save_identity_stub(tmp_path / "id.ckpt", dim=2)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("__meta__.json"))
    meta["version"] = 99
    bad = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(bad, "w") as zf:
        zf.writestr("__meta__.json", json.dumps(meta))
    with pytest.raises(DataError, match="v99"):
        load_checkpoint(bad)


def test_missing_array_is_named(tmp_path):
    model = randomized_model()
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("__meta__.json"))
    victim = meta["param_order"][0]
    cut = tmp_path / "cut.ckpt"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(cut, "w") as dst:
        for item in src.infolist():
            if item.filename != victim + ".npy":
                dst.writestr(item, src.read(item))
    with pytest.raises(DataError, match=victim):
        load_checkpoint(cut)
