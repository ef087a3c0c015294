"""Irregular tensors: storage, file formats, splitting and synthetic data.

An irregular tensor is a list of K slices ``X_k`` of shape ``(I_k, J)``
that share the feature mode but not the time mode. Every slice carries a
binary observation mask; unobserved entries are stored as zero and never
enter a loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UniquenessError

STATIC = "static"
DYNAMIC = "dynamic"

# Default task names for synthetic data; extra tasks get generic names.
STATIC_TASK_NAMES = ("mortality", "readmission", "icu_mortality")
DYNAMIC_TASK_NAMES = ("ventilation",)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class IrregularTensor:
    """K slices of shape ``(I_k, J)`` with per-entry observation masks."""

    slices: tuple
    masks: tuple
    feature_names: tuple
    slice_ids: tuple

    def __init__(self, slices, masks=None, feature_names=None, slice_ids=None):
        slices = [np.asarray(x, dtype=np.float64) for x in slices]
        if len(slices) == 0:
            raise ShapeError("tensor must contain at least one slice")
        if slice_ids is None:
            slice_ids = [str(k) for k in range(len(slices))]
        slice_ids = [str(s) for s in slice_ids]
        if len(slice_ids) != len(slices):
            raise ShapeError(f"{len(slice_ids)} slice ids for {len(slices)} slices")
        if len(set(slice_ids)) != len(slice_ids):
            seen, dup = set(), None
            for s in slice_ids:
                if s in seen:
                    dup = s
                    break
                seen.add(s)
            raise UniquenessError(f"duplicate slice_id {dup!r}")
        for x, sid in zip(slices, slice_ids):
            if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
                raise ShapeError(f"slice {sid!r} has invalid shape {x.shape}")
        J = slices[0].shape[1]
        for x, sid in zip(slices, slice_ids):
            if x.shape[1] != J:
                raise ShapeError(f"slice {sid!r} has {x.shape[1]} columns, expected {J}")
        if masks is None:
            masks = [np.ones(x.shape) for x in slices]
        if len(masks) != len(slices):
            raise ShapeError(f"{len(masks)} masks for {len(slices)} slices")
        clean_x, clean_m = [], []
        for x, m, sid in zip(slices, masks, slice_ids):
            m = np.asarray(m, dtype=np.float64)
            if m.shape != x.shape:
                raise ShapeError(f"mask of slice {sid!r} has shape {m.shape}, slice has {x.shape}")
            if not np.all((m == 0) | (m == 1)):
                raise FormatError(f"mask of slice {sid!r} is not binary")
            clean_x.append(_frozen(np.where(m > 0, x, 0.0)))
            clean_m.append(_frozen(m))
        if feature_names is None:
            feature_names = [f"f{j}" for j in range(J)]
        feature_names = tuple(str(f) for f in feature_names)
        if len(feature_names) != J:
            raise ShapeError(f"{len(feature_names)} feature names for J={J}")
        object.__setattr__(self, "slices", tuple(clean_x))
        object.__setattr__(self, "masks", tuple(clean_m))
        object.__setattr__(self, "feature_names", feature_names)
        object.__setattr__(self, "slice_ids", tuple(slice_ids))

    @property
    def K(self) -> int:
        return len(self.slices)

    @property
    def J(self) -> int:
        return self.slices[0].shape[1]

    @property
    def I(self) -> list[int]:
        return [x.shape[0] for x in self.slices]

    @property
    def n_observed(self) -> int:
        return int(sum(m.sum() for m in self.masks))

    def index_of(self, slice_id: str) -> int:
        return self.slice_ids.index(slice_id)

    def subset(self, indices: Sequence[int]) -> "IrregularTensor":
        """Tensor restricted to the given slice positions (arrays are shared)."""
        new = object.__new__(IrregularTensor)
        object.__setattr__(new, "slices", tuple(self.slices[i] for i in indices))
        object.__setattr__(new, "masks", tuple(self.masks[i] for i in indices))
        object.__setattr__(new, "feature_names", self.feature_names)
        object.__setattr__(new, "slice_ids", tuple(self.slice_ids[i] for i in indices))
        return new

    def __repr__(self):
        return f"IrregularTensor(K={self.K}, J={self.J}, I=[{min(self.I)}..{max(self.I)}])"


@dataclass
class LabelTable:
    """Binary outcomes keyed by task name then slice id.

    ``static`` maps task -> {slice_id: 0/1}; ``dynamic`` maps
    task -> {slice_id: int array of length I_k}.
    """

    static: dict = field(default_factory=dict)
    dynamic: dict = field(default_factory=dict)

    @property
    def task_names(self) -> list[str]:
        return list(self.static) + list(self.dynamic)

    def kind(self, task: str) -> str:
        if task in self.static:
            return STATIC
        if task in self.dynamic:
            return DYNAMIC
        raise ConfigError(f"unknown task {task!r}")

    def validate(self, tensor: IrregularTensor) -> None:
        ids = set(tensor.slice_ids)
        for task, table in self.static.items():
            for sid, y in table.items():
                if sid not in ids:
                    raise ShapeError(f"task {task!r} references unknown slice {sid!r}")
                if y not in (0, 1):
                    raise FormatError(f"task {task!r} slice {sid!r}: label {y!r} not in {{0,1}}")
        for task, table in self.dynamic.items():
            for sid, y in table.items():
                if sid not in ids:
                    raise ShapeError(f"task {task!r} references unknown slice {sid!r}")
                n = tensor.slices[tensor.index_of(sid)].shape[0]
                if len(y) != n:
                    raise ShapeError(
                        f"task {task!r} slice {sid!r}: {len(y)} labels for {n} timesteps"
                    )

    def subset(self, slice_ids) -> "LabelTable":
        keep = set(slice_ids)
        return LabelTable(
            static={t: {s: y for s, y in d.items() if s in keep} for t, d in self.static.items()},
            dynamic={t: {s: y for s, y in d.items() if s in keep} for t, d in self.dynamic.items()},
        )

    def select(self, tasks) -> "LabelTable":
        tasks = list(tasks)
        for t in tasks:
            self.kind(t)
        return LabelTable(
            static={t: d for t, d in self.static.items() if t in tasks},
            dynamic={t: d for t, d in self.dynamic.items() if t in tasks},
        )


# -- file formats -----------------------------------------------------------


def load_tensor(path) -> IrregularTensor:
    """Read the JSONL slice format: a ``{"features": [...]}`` header line,
    then one ``{"id", "rows", "mask"?}`` object per slice."""
    path = Path(path)
    features = None
    slices, masks, ids = [], [], []
    with path.open("r", encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            if features is None:
                if "features" not in rec or not isinstance(rec["features"], list):
                    raise FormatError(f"{path}:{lineno}: first line must be a features header")
                features = [str(f) for f in rec["features"]]
                continue
            if "id" not in rec or "rows" not in rec:
                raise FormatError(f"{path}:{lineno}: record needs 'id' and 'rows'")
            sid = str(rec["id"])
            rows = rec["rows"]
            if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
                raise FormatError(f"{path}:{lineno}: 'rows' must be a non-empty list of lists")
            widths = {len(r) for r in rows}
            if len(widths) != 1:
                raise ShapeError(f"slice {sid!r} has ragged rows (lengths {sorted(widths)})")
            if widths.pop() != len(features):
                raise ShapeError(f"slice {sid!r} row length does not match {len(features)} features")
            try:
                x = np.array(rows, dtype=np.float64)
                m = np.ones_like(x) if rec.get("mask") is None else np.array(rec["mask"], dtype=np.float64)
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: non-numeric entries") from None
            if m.shape != x.shape:
                raise ShapeError(f"slice {sid!r} mask shape {m.shape} != rows shape {x.shape}")
            slices.append(x)
            masks.append(m)
            ids.append(sid)
    if features is None:
        raise FormatError(f"{path}: empty file, missing features header")
    if not slices:
        raise FormatError(f"{path}: no slice records")
    return IrregularTensor(slices, masks, features, ids)


def save_tensor(tensor: IrregularTensor, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"features": list(tensor.feature_names)}) + "\n")
        for sid, x, m in zip(tensor.slice_ids, tensor.slices, tensor.masks):
            rec = {"id": sid, "rows": x.tolist()}
            if not np.all(m == 1):
                rec["mask"] = m.astype(int).tolist()
            fh.write(json.dumps(rec) + "\n")


LABEL_HEADER = ["slice_id", "task", "kind", "t", "label"]


def load_labels(path, tensor: IrregularTensor | None = None) -> LabelTable:
    """Read the ``slice_id,task,kind,t,label`` CSV format."""
    path = Path(path)
    static: dict = {}
    dyn_rows: dict = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(LABEL_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            sid, task, kind, t, label = row
            if label not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1")
            y = int(label)
            if kind == STATIC:
                if t != "":
                    raise FormatError(f"{path}:{lineno}: static rows must leave t empty")
                static.setdefault(task, {})[sid] = y
            elif kind == DYNAMIC:
                try:
                    ti = int(t)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: dynamic rows need an integer t") from None
                dyn_rows.setdefault(task, {}).setdefault(sid, {})[ti] = y
            else:
                raise FormatError(f"{path}:{lineno}: kind must be static or dynamic")
    dynamic = {}
    for task, per_slice in dyn_rows.items():
        dynamic[task] = {}
        for sid, steps in per_slice.items():
            n = max(steps) + 1
            if sorted(steps) != list(range(n)):
                raise FormatError(f"{path}: task {task!r} slice {sid!r} has gaps in t")
            dynamic[task][sid] = np.array([steps[i] for i in range(n)], dtype=np.int64)
    labels = LabelTable(static, dynamic)
    if tensor is not None:
        labels.validate(tensor)
    return labels


def save_labels(labels: LabelTable, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for task, table in labels.static.items():
            for sid, y in table.items():
                w.writerow([sid, task, STATIC, "", int(y)])
        for task, table in labels.dynamic.items():
            for sid, ys in table.items():
                for t, y in enumerate(ys):
                    w.writerow([sid, task, DYNAMIC, t, int(y)])


# -- splitting ----------------------------------------------------------------


def split_tensor(tensor: IrregularTensor, labels: LabelTable | None, train_fraction=0.8, seed=0):
    """Seeded shuffle split of slices; ``ceil(train_fraction * K)`` go to train.

    Returns ``((train_tensor, train_labels), (test_tensor, test_labels))``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if tensor.K < 2:
        raise ConfigError("need at least two slices to split")
    order = np.random.default_rng(seed).permutation(tensor.K)
    # round before ceil so that 0.8 * 10 does not become 9
    n_train = min(tensor.K - 1, math.ceil(round(train_fraction * tensor.K, 9)))
    tr, te = sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())
    t_tr, t_te = tensor.subset(tr), tensor.subset(te)
    if labels is None:
        return (t_tr, None), (t_te, None)
    return (t_tr, labels.subset(t_tr.slice_ids)), (t_te, labels.subset(t_te.slice_ids))


# -- synthetic data -----------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs for ground-truth synthetic data.

    ``signal_rank`` restricts label signal to the last (weakest) that many
    components; 0 spreads it over all of them. ``decay`` scales column r of
    V by ``decay**r`` so later components carry less energy.
    """

    K: int = 50
    J: int = 20
    R_true: int = 5
    I_min: int = 5
    I_max: int = 15
    noise_sd: float = 0.0
    missing_rate: float = 0.0
    label_noise: float = 0.0
    seed: int = 0
    n_static: int = 2
    n_dynamic: int = 1
    label_scale: float = 3.0
    decay: float = 1.0
    signal_rank: int = 0

    def validate(self):
        for name in ("K", "J", "R_true", "I_min", "I_max"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.I_min > self.I_max:
            raise ConfigError("I_min must not exceed I_max")
        if self.R_true > min(self.I_min, self.J):
            raise ConfigError("R_true must not exceed min(I_min, J)")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be nonnegative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5)")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise ConfigError("task counts must be nonnegative")
        if not 0 <= self.signal_rank <= self.R_true:
            raise ConfigError("signal_rank must lie in [0, R_true]")
        if self.decay <= 0:
            raise ConfigError("decay must be positive")


def _task_names(defaults, n, prefix):
    return [defaults[i] if i < len(defaults) else f"{prefix}_{i}" for i in range(n)]


def orthonormal(rng, n_rows, n_cols):
    """Orthonormal columns from the QR of a Gaussian matrix (sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((n_rows, n_cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _draw_labels(rng, z, spec):
    """Bernoulli(sigmoid(a*z + b)) with a, b set to standardise the logits."""
    sd = z.std()
    a = spec.label_scale / sd if sd > 0 else 0.0
    b = -a * z.mean()
    p = 1.0 / (1.0 + np.exp(-(a * z + b)))
    y = (rng.random(z.shape) < p).astype(np.int64)
    flip = rng.random(z.shape) < spec.label_noise
    return np.where(flip, 1 - y, y)


def synth_generate(spec: SynthSpec):
    """Draw a ground-truth PARAFAC2 model, the tensor it generates, and labels.

    Returns ``(tensor, labels, truth)`` where ``truth`` is a FactorModel with
    ``U_k = Q_k H`` exactly.
    """
    from .model import FactorModel

    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K, J, R = spec.K, spec.J, spec.R_true
    I = rng.integers(spec.I_min, spec.I_max + 1, size=K)
    H = orthonormal(rng, R, R) + 0.3 * rng.standard_normal((R, R))
    V = rng.standard_normal((J, R)) * spec.decay ** np.arange(R)
    Q = [orthonormal(rng, int(n), R) for n in I]
    s = [rng.uniform(0.5, 1.5, size=R) for _ in range(K)]
    U = [q @ H for q in Q]

    slices, masks = [], []
    for k in range(K):
        x = (U[k] * s[k]) @ V.T
        if spec.noise_sd > 0:
            x = x + spec.noise_sd * rng.standard_normal(x.shape)
        m = (rng.random(x.shape) >= spec.missing_rate).astype(np.float64)
        slices.append(x)
        masks.append(m)
    ids = [f"s{k:05d}" for k in range(K)]
    tensor = IrregularTensor(slices, masks, [f"feature_{j}" for j in range(J)], ids)

    signal = np.zeros(R)
    signal[R - spec.signal_rank if spec.signal_rank else 0:] = 1.0
    labels = LabelTable()
    S = np.stack(s)
    for name in _task_names(STATIC_TASK_NAMES, spec.n_static, "static"):
        w = rng.standard_normal(R) * signal
        y = _draw_labels(rng, S @ w, spec)
        labels.static[name] = {sid: int(v) for sid, v in zip(ids, y)}
    rows = np.concatenate(U)
    bounds = np.cumsum([0] + [int(n) for n in I])
    for name in _task_names(DYNAMIC_TASK_NAMES, spec.n_dynamic, "dynamic"):
        w = rng.standard_normal(R) * signal
        y = _draw_labels(rng, rows @ w, spec)
        labels.dynamic[name] = {sid: y[bounds[k]:bounds[k + 1]] for k, sid in enumerate(ids)}

    truth = FactorModel(Q=Q, H=H, s=s, V=V, U=[u.copy() for u in U])
    return tensor, labels, truth
