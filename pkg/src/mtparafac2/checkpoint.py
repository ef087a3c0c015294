"""JSON checkpoints for a factor model and, optionally, its prediction heads.

Format: ``{"R", "H", "V", "slices": [{"id", "Q", "s"}], "heads"?}`` with
matrices stored as row-major nested lists.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .heads import TaskSet
from .model import FactorModel


def model_to_dict(model: FactorModel, slice_ids, heads: TaskSet | None = None) -> dict:
    if len(slice_ids) != model.K:
        raise ShapeError(f"{len(slice_ids)} slice ids for {model.K} slices")
    doc = {
        "R": model.R,
        "H": model.H.tolist(),
        "V": model.V.tolist(),
        "slices": [
            {"id": sid, "Q": q.tolist(), "s": s.tolist()}
            for sid, q, s in zip(slice_ids, model.Q, model.s)
        ],
    }
    if heads is not None and len(heads):
        doc["heads"] = heads.to_dict()
    return doc


def model_from_dict(doc: dict):
    """Return ``(model, slice_ids, heads_dict_or_None)``; U is set to Q H."""
    try:
        R = int(doc["R"])
        H = np.asarray(doc["H"], dtype=np.float64).reshape(R, R)
        V = np.asarray(doc["V"], dtype=np.float64)
        ids = [str(sl["id"]) for sl in doc["slices"]]
        Q = [np.asarray(sl["Q"], dtype=np.float64).reshape(-1, R) for sl in doc["slices"]]
        s = [np.asarray(sl["s"], dtype=np.float64) for sl in doc["slices"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if V.ndim != 2 or V.shape[1] != R:
        raise FormatError(f"V has shape {V.shape}, expected (J, {R})")
    return FactorModel(Q=Q, H=H, s=s, V=V), ids, doc.get("heads")


def save_checkpoint(path, model: FactorModel, slice_ids, heads: TaskSet | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, slice_ids, heads), fh)
        fh.write("\n")
    tmp.replace(path)


def load_checkpoint(path, labels=None):
    """Return ``(model, slice_ids, heads)``; heads is None when absent."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    model, ids, heads = model_from_dict(doc)
    if heads is not None:
        heads = TaskSet.from_dict(heads, labels)
    return model, ids, heads
