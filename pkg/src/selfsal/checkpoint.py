"""Checkpoint container.

One ``.npz`` file holds a version string, the architecture descriptor as
JSON, optional run metadata, and every named parameter tensor with its
shape, dtype and row-major values. Round-tripping is bit-exact because
arrays are stored raw.

Two layouts share the format:
  - a bare model: keys ``param/<name>``;
  - a training state: ``student/<name>``, ``teacher/<name>`` and
    ``center`` (the running teacher-center vector).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError
from .model import ArchConfig, BaseNetwork, clone_as_teacher

FORMAT_VERSION = "selfsal-checkpoint-1"


def _collect(prefix: str, module: torch.nn.Module) -> dict:
    return {
        f"{prefix}/{name}": p.detach().cpu().numpy()
        for name, p in module.named_parameters()
    }


def _restore(arrays: dict, prefix: str, model: BaseNetwork) -> None:
    state = {}
    for name, p in model.named_parameters():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise ConfigurationError(f"checkpoint is missing tensor {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise ConfigurationError(
                f"checkpoint tensor {key!r} has shape {arr.shape}, expected {tuple(p.shape)}")
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)


def _write(path, arch: ArchConfig, arrays: dict, meta: dict | None) -> None:
    payload = {
        "__version__": np.array(FORMAT_VERSION),
        "__arch__": np.array(json.dumps(arch.to_dict())),
    }
    if meta is not None:
        payload["__meta__"] = np.array(json.dumps(meta))
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def _read(path) -> tuple[ArchConfig, dict, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    version = str(arrays.pop("__version__"))
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version!r}")
    arch = ArchConfig.from_dict(json.loads(str(arrays.pop("__arch__"))))
    meta = json.loads(str(arrays.pop("__meta__"))) if "__meta__" in arrays else {}
    return arch, arrays, meta


def save_model(path, model: BaseNetwork, meta: dict | None = None) -> None:
    _write(path, model.arch, _collect("param", model), meta)


def load_model(path) -> BaseNetwork:
    """Load a network from either a bare-model or a training checkpoint.

    Training checkpoints yield the student branch (the network used for
    all inference).
    """
    arch, arrays, _ = _read(path)
    prefix = "param" if any(k.startswith("param/") for k in arrays) else "student"
    try:
        sample = next(a for k, a in arrays.items() if k.startswith(prefix + "/"))
    except StopIteration:
        raise ConfigurationError("checkpoint holds no parameter tensors") from None
    model = BaseNetwork(arch).to(torch.from_numpy(np.zeros(1, dtype=sample.dtype)).dtype)
    _restore(arrays, prefix, model)
    return model


def save_training_state(path, student: BaseNetwork, teacher: BaseNetwork,
                        center: torch.Tensor, meta: dict) -> None:
    arrays = _collect("student", student)
    arrays.update(_collect("teacher", teacher))
    arrays["center"] = center.detach().cpu().numpy()
    _write(path, student.arch, arrays, meta)


def load_training_state(path):
    arch, arrays, meta = _read(path)
    if "center" not in arrays:
        raise ConfigurationError("not a training checkpoint (no center vector)")
    center = torch.from_numpy(arrays["center"].copy())
    student = BaseNetwork(arch).to(center.dtype)
    _restore(arrays, "student", student)
    teacher = clone_as_teacher(student)
    _restore(arrays, "teacher", teacher)
    return student, teacher, center, meta
