"""Checkpoint archive: named float arrays plus an embedded JSON config.

Backed by an uncompressed npz written through a fixed-timestamp zip so the
bytes are deterministic for identical content.  Writes go to a temp file and
are published with an atomic rename, so a reader never sees partial state.
"""

import io
import json
import os
import tempfile
import zipfile

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
_CONFIG_KEY = "__config__"
# fixed zip entry timestamp, keeps bytes stable across runs
_EPOCH = (1980, 1, 1, 0, 0, 0)


def state_dict_to_arrays(module: torch.nn.Module, prefix: str):
    return {prefix + k: v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_arrays_into(module: torch.nn.Module, arrays: dict, prefix: str):
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"missing array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(v.shape)}")
        state[k] = torch.from_numpy(arr.copy()).to(v.dtype)
    module.load_state_dict(state)


def save_archive(path: str, arrays: dict, config: dict):
    """Write arrays + config atomically with deterministic bytes."""
    payload = dict(config)
    payload["format_version"] = FORMAT_VERSION
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        names = [_CONFIG_KEY] + sorted(arrays)
        for name in names:
            if name == _CONFIG_KEY:
                data = json.dumps(payload, sort_keys=True).encode()
            else:
                mem = io.BytesIO()
                # asarray keeps 0-d shapes, ascontiguousarray would not
                np.save(mem, np.asarray(arrays[name], order="C"))
                data = mem.getvalue()
            info = zipfile.ZipInfo(name + ".npy" if name != _CONFIG_KEY
                                   else _CONFIG_KEY, date_time=_EPOCH)
            zf.writestr(info, data)
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path: str):
    """Read back (arrays, config); truncated or malformed files raise a
    CheckpointError without returning partial state."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if _CONFIG_KEY not in names:
                raise CheckpointError(f"{path}: missing config block")
            config = json.loads(zf.read(_CONFIG_KEY))
            arrays = {}
            for name in names:
                if name == _CONFIG_KEY:
                    continue
                arrays[name.removesuffix(".npy")] = np.load(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, ValueError, KeyError, json.JSONDecodeError,
            EOFError, OSError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")
    if config.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {config.get('format_version')}")
    return arrays, config
