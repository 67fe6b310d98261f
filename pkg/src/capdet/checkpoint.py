"""Single-file checkpoint container.

Layout: one JSON header line mapping tensor name -> {"dtype": "f32",
"shape": [...], "offset": bytes-into-payload}, then a newline, then the
concatenated little-endian float32 payload.  Writes go to a temporary file
in the same directory and are renamed into place, so readers never observe
a half-written checkpoint.

Names: model parameters keep their module paths (backbone.*, fpn.*, rpn.*,
roi.*, decoder.*); optimizer moments live under optim.<param>.m / .v / .t;
scalars such as the step counter live under meta.*.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    header = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": len(payload)}
        payload += arr.tobytes()
    blob = json.dumps(header, sort_keys=True).encode() + b"\n" + bytes(payload)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt checkpoint header: {e}") from e
    out = {}
    for name, entry in header.items():
        if entry["dtype"] != "f32":
            raise ValueError(f"{path}: tensor {name} has unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise ValueError(f"{path}: tensor {name} extends past end of payload")
        out[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return out


def _scalar(arr) -> float:
    """Stored scalars come back as 1-element arrays; unwrap explicitly."""
    return float(np.asarray(arr).reshape(-1)[0])


def model_tensors(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().astype("<f4")
            for name, p in model.named_parameters()}


def load_model_tensors(model: torch.nn.Module, tensors: dict[str, np.ndarray],
                       prefixes: tuple[str, ...] | None = None) -> list[str]:
    """Copy stored tensors into matching parameters; returns the names loaded.

    With prefixes, only parameters under those prefixes are loaded (used by
    caption-only inference, which must not read detection parameters).
    Missing or shape-mismatched parameters raise.
    """
    loaded = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            if prefixes is not None and not name.startswith(prefixes):
                continue
            if name not in tensors:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
            loaded.append(name)
    return loaded


def optimizer_tensors(optimizer: torch.optim.Optimizer,
                      model: torch.nn.Module) -> dict[str, np.ndarray]:
    by_param = {p: n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            if not state:
                continue
            name = by_param[p]
            out[f"optim.{name}.m"] = state["exp_avg"].detach().cpu().numpy()
            out[f"optim.{name}.v"] = state["exp_avg_sq"].detach().cpu().numpy()
            out[f"optim.{name}.t"] = np.asarray(float(state["step"]), dtype=np.float32)
    return out


def load_optimizer_tensors(optimizer: torch.optim.Optimizer, model: torch.nn.Module,
                           tensors: dict[str, np.ndarray]) -> None:
    by_param = {p: n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = by_param[p]
            key = f"optim.{name}.m"
            if key not in tensors:
                continue
            dtype, device = p.dtype, p.device
            optimizer.state[p] = {
                "step": torch.tensor(_scalar(tensors[f"optim.{name}.t"]), dtype=torch.float32),
                "exp_avg": torch.from_numpy(tensors[key]).to(dtype).to(device),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim.{name}.v"]).to(dtype).to(device),
            }


def save_checkpoint(path, model: torch.nn.Module,
                    optimizer: torch.optim.Optimizer | None = None, step: int = 0) -> None:
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer, model))
    tensors["meta.step"] = np.asarray(float(step), dtype=np.float32)
    save_tensors(path, tensors)


def load_checkpoint(path, model: torch.nn.Module | None = None,
                    optimizer: torch.optim.Optimizer | None = None,
                    prefixes: tuple[str, ...] | None = None) -> int:
    """Restore model (and optimizer) state; returns the stored step count."""
    tensors = load_tensors(path)
    if model is not None:
        load_model_tensors(model, tensors, prefixes=prefixes)
        if optimizer is not None:
            load_optimizer_tensors(optimizer, model, tensors)
    return int(_scalar(tensors["meta.step"])) if "meta.step" in tensors else 0
