"""Versioned checkpoint container shared by all networks.

A container is a dict saved with ``torch.save``:

    {"format": "boostgan-checkpoint", "version": 1,
     "namespaces": {name: {"config": ..., "table": ..., "state": state_dict}},
     "meta": {...}}

Writes go to a temporary file first and are renamed into place.
"""

import os
import tempfile
from pathlib import Path

import torch

FORMAT = "boostgan-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_container(path, namespaces: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"format": FORMAT, "version": VERSION, "namespaces": namespaces, "meta": meta or {}}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(blob, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} container")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {blob.get('version')}")
    if not isinstance(blob.get("namespaces"), dict):
        raise CheckpointError(f"{path}: container has no namespaces")
    return blob


def namespace(blob: dict, name: str, path="checkpoint") -> dict:
    try:
        return blob["namespaces"][name]
    except KeyError:
        raise CheckpointError(f"{path}: no '{name}' namespace "
                              f"(has {sorted(blob['namespaces'])})") from None


def module_entry(module, config=None, table=None) -> dict:
    return {"config": config, "table": table,
            "state": {k: v.detach().clone() for k, v in module.state_dict().items()}}


def restore_module(module, entry: dict, expected_table=None, name="module") -> None:
    """Load ``entry`` into ``module``; refuse on architecture-table or key mismatch."""
    if expected_table is not None and entry.get("table") != expected_table:
        raise CheckpointError(f"{name}: checkpoint architecture table does not match the "
                              "configured network")
    state = entry.get("state")
    own = module.state_dict()
    if not isinstance(state, dict) or set(state) != set(own):
        raise CheckpointError(f"{name}: parameter names do not match")
    for key, value in state.items():
        if tuple(value.shape) != tuple(own[key].shape):
            raise CheckpointError(f"{name}: shape mismatch for {key}: "
                                  f"{tuple(value.shape)} vs {tuple(own[key].shape)}")
    module.load_state_dict(state)
