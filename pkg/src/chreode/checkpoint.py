"""Versioned checkpoint container.

A checkpoint is an uncompressed zip archive readable by ``numpy.load``:

* ``__meta__.json``: ``{"format": "CHREODE-CKPT", "version": 1, "kind",
  "config", "param_order", "extra"}``; ``config`` echoes the operator
  config (dim, width, depth, rank, trunk, variant, tau_init, delta_scale,
  seed).
* one ``<name>.npy`` float64 array per entry of ``param_order``, written in
  that order.

Entries carry a fixed timestamp, so saving the same model twice gives
byte-identical files. ``kind == "identity"`` is a parameter-free stub whose
prediction is the source population itself.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE
from .exceptions import DataError
from .operator import OperatorConfig, WaddingtonOperator

FORMAT = "CHREODE-CKPT"
VERSION = 1
_META = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(array):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _write(path, meta, arrays):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, _META, json.dumps(meta, sort_keys=True, indent=2).encode())
        for name in meta["param_order"]:
            _entry(zf, name + ".npy", _npy_bytes(arrays[name]))
    tmp.replace(path)
    return path


def save_checkpoint(model, path, extra=None):
    """Write ``model`` (a :class:`WaddingtonOperator`) and an ``extra`` dict."""
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": "operator",
        "config": model.config_dict(),
        "param_order": list(state),
        "extra": extra or {},
    }
    return _write(path, meta, state)


def save_identity_stub(path, dim, extra=None):
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": "identity",
        "config": {"dim": int(dim)},
        "param_order": [],
        "extra": extra or {},
    }
    return _write(path, meta, {})


def read_meta(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_META))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path} is not a readable checkpoint: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise DataError(
            f"unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')!r}; "
            f"expected {FORMAT} v{VERSION}"
        )
    return meta


def load_checkpoint(path):
    """``(model, meta)``; ``model`` is ``None`` for the identity stub."""
    meta = read_meta(path)
    if meta["kind"] == "identity":
        return None, meta
    model = WaddingtonOperator(OperatorConfig.from_dict(meta["config"]))
    with zipfile.ZipFile(path) as zf:
        state = {}
        for name in meta["param_order"]:
            try:
                array = np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
            except KeyError as exc:
                raise DataError(f"checkpoint {path} is missing array {name!r}") from exc
            state[name] = torch.as_tensor(array, dtype=DTYPE)
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise DataError(f"checkpoint {path} lacks entries {sorted(missing)}")
    model.load_state_dict(state)
    return model, meta
