"""Model checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (a zip of ``.npy`` members,
each self-describing its dtype and shape, stored row-major):

* ``__meta__``: a 0-d unicode array holding a JSON document with keys
  ``format`` (``"xray-ensemble-ckpt"``), ``version`` (``1``), ``input_shape``,
  ``layers`` (list of layer dicts), ``seed`` and ``metadata`` (free-form
  training information such as architecture name and best epoch).
* one float32 member per parameter tensor, named ``"<layer>.kernel"`` or
  ``"<layer>.bias"``.

Writes go to a temporary file in the target directory which is then renamed
over the destination, so readers never see a half-written checkpoint.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .network import LayerSpec, Network

FORMAT = "xray-ensemble-ckpt"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Network, path: str | os.PathLike, metadata: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.specs],
        "seed": int(model.seed),
        "metadata": metadata or {},
    }
    arrays = {name: np.ascontiguousarray(p, dtype=np.float32) for name, p in sorted(model.params.items())}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Network, dict[str, Any]]:
    """Return the network and the stored metadata dict."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["__meta__"]))
            params = {k: archive[k] for k in archive.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    specs = [LayerSpec.from_dict(d) for d in meta["layers"]]
    model = Network(specs, tuple(meta["input_shape"]), params, seed=meta["seed"])
    return model, meta["metadata"]
