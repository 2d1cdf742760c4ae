"""Single-file checkpoints: a zip of ``config.json`` plus one ``.npy`` per parameter.

Entries are stored uncompressed with a fixed timestamp so identical models
produce byte-identical archives.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from ..numkernel import Tensor
from .config import ModelConfig, param_shapes
from .transformer import Model

_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Archive content does not match its recorded config."""


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        cfg = json.dumps(model.config.to_dict(), sort_keys=True, indent=2)
        zf.writestr(_entry("config.json"), cfg)
        for name, tensor in model.params.items():
            buf = io.BytesIO()
            np.save(buf, tensor.data.astype("<f8"), allow_pickle=False)
            zf.writestr(_entry(f"params/{name}.npy"), buf.getvalue())
    return path


def load_checkpoint(path) -> Model:
    with zipfile.ZipFile(Path(path)) as zf:
        config = ModelConfig.from_dict(json.loads(zf.read("config.json")))
        names = {n[len("params/"):-len(".npy")] for n in zf.namelist() if n.startswith("params/")}
        expected = param_shapes(config)
        if names != set(expected):
            raise CheckpointError(f"parameter set differs from config: "
                                  f"missing={sorted(set(expected) - names)} extra={sorted(names - set(expected))}")
        params = {}
        for name, shape in expected.items():
            arr = np.load(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
            if arr.shape != shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape}, config expects {shape}")
            params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name, copy=False)
    return Model(config, params)
