"""Versioned text model files.

Line 1 is a JSON header ``{"format": ..., "format_version": 1, "config": {...}}``;
every following line holds one parameter ``{"name", "shape", "values"}``.
Floats are written with Python's shortest round-trip repr, so load(save(m))
is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import TapConfig
from .model import TapModel, TapShapeError, param_shapes

FORMAT_NAME = "walkguide-tap"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def dumps_model(model: TapModel) -> str:
    lines = [json.dumps({"format": FORMAT_NAME, "format_version": FORMAT_VERSION, "config": model.config.to_dict()}, sort_keys=True)]
    for name, arr in model.params.items():
        record = {"name": name, "shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
        lines.append(json.dumps(record))
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> TapModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ModelFileError("empty model file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"model header is not valid JSON: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise ModelFileError(f"not a TAP model file (format={header.get('format')!r})")
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format version {header.get('format_version')!r}")
    try:
        cfg = TapConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"bad model config: {exc}") from None
    expected = param_shapes(cfg)
    params = {}
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
            name, shape, values = record["name"], tuple(record["shape"]), record["values"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ModelFileError(f"line {line_no}: malformed parameter record ({exc})") from None
        if name not in expected:
            raise ModelFileError(f"line {line_no}: unexpected parameter {name!r}")
        if shape != expected[name]:
            raise TapShapeError(f"{name}: file shape {shape} does not match config shape {expected[name]}")
        arr = np.array(values, dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise ModelFileError(f"line {line_no}: {name} has {arr.size} values, shape needs {int(np.prod(shape))}")
        params[name] = arr.reshape(shape)
    missing = [n for n in expected if n not in params]
    if missing:
        raise ModelFileError(f"model file truncated: missing {missing}")
    return TapModel(cfg, {n: params[n] for n in expected})


def model_save(model: TapModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def model_load(path) -> TapModel:
    return loads_model(Path(path).read_text(encoding="utf-8"))


def model_digest(model: TapModel) -> str:
    return hashlib.sha256(dumps_model(model).encode("utf-8")).hexdigest()
