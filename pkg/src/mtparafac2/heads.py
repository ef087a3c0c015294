"""Prediction heads attached to the factors.

Static tasks use a logistic regression on ``s_k``; dynamic tasks run an
LSTM over the rows of ``U_k`` and emit one probability per timestep. Both
heads return gradients with respect to their inputs so the factorization
can be supervised by the labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError

EPS = 1e-12


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def cross_entropy(p, y):
    p = np.clip(p, EPS, 1.0 - EPS)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


# -- static head --------------------------------------------------------------


@dataclass
class StaticHead:
    task_name: str
    w: np.ndarray
    b: float = 0.0

    @classmethod
    def zeros(cls, task_name, R):
        return cls(task_name, np.zeros(R), 0.0)

    def params(self):
        return {"w": self.w, "b": self.b}

    def to_dict(self):
        return {"task": self.task_name, "w": self.w.tolist(), "b": float(self.b)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["task"], np.asarray(d["w"], dtype=np.float64), float(d["b"]))


def static_forward(h: StaticHead, s):
    return float(sigmoid(h.w @ s + h.b))


def static_loss_and_grads(h: StaticHead, s, y):
    """Cross-entropy of one label; returns ``(loss, grad_w, grad_b, grad_s)``."""
    p = static_forward(h, s)
    r = p - y
    return float(cross_entropy(p, y)), r * np.asarray(s, dtype=np.float64), r, r * h.w


# -- dynamic head -------------------------------------------------------------

GATES = ("input", "forget", "output", "candidate")


@dataclass
class DynamicHead:
    """Single-layer LSTM with a logistic read-out per timestep.

    ``W`` stacks the input, forget, output and candidate gate matrices
    (each ``hidden x (R + hidden)``, acting on ``[x_t, h_{t-1}]``).
    """

    task_name: str
    W: np.ndarray
    b: np.ndarray
    w_out: np.ndarray
    b_out: float = 0.0

    @property
    def hidden(self) -> int:
        return self.w_out.shape[0]

    @property
    def R(self) -> int:
        return self.W.shape[1] - self.hidden

    def gate(self, name):
        i = GATES.index(name)
        n = self.hidden
        return self.W[i * n:(i + 1) * n], self.b[i * n:(i + 1) * n]

    @classmethod
    def init(cls, task_name, R, hidden=16, rng=None, scale=0.1):
        if hidden < 1:
            raise ConfigError("hidden size must be at least 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        W = scale * rng.standard_normal((4 * hidden, R + hidden))
        return cls(task_name, W, np.zeros(4 * hidden), np.zeros(hidden), 0.0)

    def params(self):
        return {"W": self.W, "b": self.b, "w_out": self.w_out, "b_out": self.b_out}

    def to_dict(self):
        return {
            "task": self.task_name,
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "w_out": self.w_out.tolist(),
            "b_out": float(self.b_out),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["task"],
            np.asarray(d["W"], dtype=np.float64),
            np.asarray(d["b"], dtype=np.float64),
            np.asarray(d["w_out"], dtype=np.float64),
            float(d["b_out"]),
        )


def _pad(seqs):
    T = max(len(x) for x in seqs)
    R = seqs[0].shape[1]
    X = np.zeros((len(seqs), T, R))
    for i, x in enumerate(seqs):
        X[i, : len(x)] = x
    return X


def lstm_forward(h: DynamicHead, X):
    """Run a batch ``X`` of shape (B, T, R). Returns ``(logits, cache)``.

    Sequences shorter than T are zero padded at the end; padding cannot
    influence earlier timesteps.
    """
    B, T, R = X.shape
    n = h.hidden
    hid = np.zeros((B, n))
    cell = np.zeros((B, n))
    logits = np.empty((B, T))
    cache = []
    for t in range(T):
        z = np.concatenate([X[:, t], hid], axis=1)
        a = z @ h.W.T + h.b
        i = sigmoid(a[:, :n])
        f = sigmoid(a[:, n:2 * n])
        o = sigmoid(a[:, 2 * n:3 * n])
        g = np.tanh(a[:, 3 * n:])
        c_prev = cell
        cell = f * c_prev + i * g
        tc = np.tanh(cell)
        hid = o * tc
        logits[:, t] = hid @ h.w_out + h.b_out
        cache.append((z, i, f, o, g, c_prev, tc, hid))
    return logits, cache


def lstm_backward(h: DynamicHead, cache, dlogits):
    """Backpropagation through time over the full sequence.

    Returns parameter gradients and the gradient w.r.t. the inputs.
    """
    B, T = dlogits.shape
    n, R = h.hidden, h.R
    dW = np.zeros_like(h.W)
    db = np.zeros_like(h.b)
    dw_out = np.zeros_like(h.w_out)
    db_out = float(dlogits.sum())
    dX = np.zeros((B, T, R))
    dh_next = np.zeros((B, n))
    dc_next = np.zeros((B, n))
    for t in reversed(range(T)):
        z, i, f, o, g, c_prev, tc, hid = cache[t]
        dl = dlogits[:, t]
        dw_out += hid.T @ dl
        dh = dl[:, None] * h.w_out + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc**2) + dc_next
        da = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - g**2),
            ],
            axis=1,
        )
        dc_next = dc * f
        dW += da.T @ z
        db += da.sum(axis=0)
        dz = da @ h.W
        dX[:, t] = dz[:, :R]
        dh_next = dz[:, R:]
    return {"W": dW, "b": db, "w_out": dw_out, "b_out": db_out}, dX


def dynamic_forward(h: DynamicHead, U):
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 1:
        raise ShapeError(f"expected a non-empty (I_k, R) matrix, got {U.shape}")
    logits, _ = lstm_forward(h, U[None])
    return sigmoid(logits[0])


def dynamic_batch_loss_and_grads(h: DynamicHead, Us, ys, coefs=None):
    """Per-sequence mean cross-entropy for a batch of slices.

    Gradients are of ``sum_b coefs[b] * loss_b``. Returns
    ``(losses, param_grads, [grad_U_b])``.
    """
    if len(Us) != len(ys):
        raise ShapeError("one label sequence per input sequence required")
    for u, y in zip(Us, ys):
        if len(y) != len(u):
            raise ShapeError(f"{len(y)} labels for a sequence of length {len(u)}")
    coefs = np.ones(len(Us)) if coefs is None else np.asarray(coefs, dtype=np.float64)
    lengths = np.array([len(u) for u in Us])
    X = _pad([np.asarray(u, dtype=np.float64) for u in Us])
    Y = np.zeros(X.shape[:2])
    valid = np.zeros(X.shape[:2])
    for i, y in enumerate(ys):
        Y[i, : len(y)] = y
        valid[i, : len(y)] = 1.0
    logits, cache = lstm_forward(h, X)
    p = sigmoid(logits)
    losses = (cross_entropy(p, Y) * valid).sum(axis=1) / lengths
    dlogits = (p - Y) * valid * (coefs / lengths)[:, None]
    grads, dX = lstm_backward(h, cache, dlogits)
    return losses, grads, [dX[i, :L] for i, L in enumerate(lengths)]


def dynamic_loss_and_grads(h: DynamicHead, U, y):
    """Mean per-timestep cross-entropy on one slice.

    Returns ``(loss, param_grads, grad_U)``.
    """
    U = np.asarray(U, dtype=np.float64)
    if len(y) != U.shape[0]:
        raise ShapeError(f"{len(y)} labels for I_k={U.shape[0]}")
    losses, grads, gU = dynamic_batch_loss_and_grads(h, [U], [np.asarray(y)])
    return float(losses[0]), grads, gU[0]


def dynamic_batch_predict(h: DynamicHead, Us):
    logits, _ = lstm_forward(h, _pad([np.asarray(u, dtype=np.float64) for u in Us]))
    p = sigmoid(logits)
    return [p[i, : len(u)] for i, u in enumerate(Us)]


# -- task set -----------------------------------------------------------------


@dataclass
class TaskSet:
    """Heads for every task plus the labels they are trained on."""

    static: list = field(default_factory=list)
    dynamic: list = field(default_factory=list)
    labels: object = None

    @classmethod
    def from_labels(cls, labels, R, tasks=None, hidden=16, seed=0):
        rng = np.random.default_rng(seed)
        names = labels.task_names if tasks is None else list(tasks)
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique")
        static = [StaticHead.zeros(t, R) for t in names if t in labels.static]
        dynamic = [DynamicHead.init(t, R, hidden, rng) for t in names if t in labels.dynamic]
        missing = set(names) - {h.task_name for h in static + dynamic}
        if missing:
            raise ConfigError(f"no labels for task(s) {sorted(missing)}")
        return cls(static, dynamic, labels.select(names))

    @property
    def task_names(self):
        return [h.task_name for h in self.static] + [h.task_name for h in self.dynamic]

    def __len__(self):
        return len(self.static) + len(self.dynamic)

    def check_trainable(self, slice_ids):
        """Every task needs a positive and a negative label among ``slice_ids``."""
        for h in self.static:
            ys = [self.labels.static[h.task_name][s] for s in slice_ids if s in self.labels.static[h.task_name]]
            if not (0 < sum(ys) < len(ys)):
                raise ConfigError(f"task {h.task_name!r} lacks positive or negative training labels")
        for h in self.dynamic:
            tab = self.labels.dynamic[h.task_name]
            ys = np.concatenate([tab[s] for s in slice_ids if s in tab] or [np.zeros(0)])
            if not (0 < ys.sum() < len(ys)):
                raise ConfigError(f"task {h.task_name!r} lacks positive or negative training labels")

    def with_labels(self, labels):
        return TaskSet(self.static, self.dynamic, labels)

    def _n_labelled(self, table, t):
        return sum(1 for sid in t.slice_ids if sid in table)

    def static_input_grad(self, t, s, k, penalties, weights=None):
        """Weighted static-loss gradient w.r.t. ``s_k`` (batch-mean scaling)."""
        g = np.zeros_like(s)
        sid = t.slice_ids[k]
        for h in self.static:
            w = penalties.rho_static if weights is None else weights.get(h.task_name, penalties.rho_static)
            table = self.labels.static[h.task_name]
            if w == 0 or sid not in table:
                continue
            _, _, _, gs = static_loss_and_grads(h, s, table[sid])
            g += (w / self._n_labelled(table, t)) * gs
        return g

    def dynamic_input_grad(self, t, U, k, penalties, weights=None):
        """Weighted dynamic-loss gradient w.r.t. ``U_k`` (batch-mean scaling)."""
        g = np.zeros_like(U)
        sid = t.slice_ids[k]
        for h in self.dynamic:
            w = penalties.rho_dynamic if weights is None else weights.get(h.task_name, penalties.rho_dynamic)
            table = self.labels.dynamic[h.task_name]
            if w == 0 or sid not in table:
                continue
            _, _, gu = dynamic_loss_and_grads(h, U, table[sid])
            g += (w / self._n_labelled(table, t)) * gu
        return g

    def task_losses(self, t, m):
        """Mean loss per task over the labelled slices of ``t``."""
        out = {}
        for h in self.static:
            table = self.labels.static[h.task_name]
            ls = [static_loss_and_grads(h, m.s[k], table[sid])[0]
                  for k, sid in enumerate(t.slice_ids) if sid in table]
            out[h.task_name] = float(np.mean(ls)) if ls else float("nan")
        for h in self.dynamic:
            table = self.labels.dynamic[h.task_name]
            idx = [k for k, sid in enumerate(t.slice_ids) if sid in table]
            if not idx:
                out[h.task_name] = float("nan")
                continue
            losses, _, _ = dynamic_batch_loss_and_grads(
                h, [m.U[k] for k in idx], [table[t.slice_ids[k]] for k in idx]
            )
            out[h.task_name] = float(np.mean(losses))
        return out

    def to_dict(self):
        return {"static": [h.to_dict() for h in self.static],
                "dynamic": [h.to_dict() for h in self.dynamic]}

    @classmethod
    def from_dict(cls, d, labels=None):
        return cls([StaticHead.from_dict(x) for x in d.get("static", [])],
                   [DynamicHead.from_dict(x) for x in d.get("dynamic", [])], labels)


# -- metric -------------------------------------------------------------------


def pr_auc(scores, labels):
    """Average precision with tied scores grouped into one threshold step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise DegenerateInputError("PR-AUC undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], (labels[order] == 1).astype(np.int64)
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    pp = (np.nonzero(last)[0] + 1)
    hits = np.diff(np.r_[0, tp])
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(tp / pp * hits) / n_pos
