"""Alternating proximal/projected SGD over U, Q, H, S and V with task heads.

One epoch walks seeded mini-batches of slices. Per batch the blocks are
updated in the fixed order U, Q, H, S, V; the dynamic heads step right after
U and the static heads right after S. At the end of the epoch the per-task
losses feed the smooth dynamic weighting that sets the next epoch's weights.

Three step rules are available:

``fixed``
    ``x <- x - lr * g``.
``lipschitz``
    ``x <- x - lr / L * g`` with ``L`` the block's largest curvature.
``curvature`` (default)
    ``x <- x - lr * P^-1 g`` with ``P`` the block curvature of the quadratic
    part (row-wise for U, diagonal for V so the l1 prox stays exact).
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DivergenceError
from .heads import (
    TaskSet,
    dynamic_batch_loss_and_grads,
    dynamic_batch_predict,
    pr_auc,
    static_forward,
    static_loss_and_grads,
)
from .model import (
    TENSOR_TASK,
    FactorModel,
    PenaltyConfig,
    fit_score,
    grad_H,
    grad_Q,
    grad_S,
    grad_U,
    grad_V,
    masked_residual,
    nonneg_project,
    soft_threshold,
)
from .sdw import SdwState, update_weights
from .tensor import orthonormal

log = logging.getLogger(__name__)

MODES = ("multi_task", "single_task", "unsupervised")
STEP_RULES = ("fixed", "lipschitz", "curvature")
RIDGE = 1e-10
CLIP = 5.0


@dataclass
class SdwConfig:
    enabled: bool = True
    C: float | None = None
    m: int = 5


@dataclass
class TrainConfig:
    R: int = 5
    epochs_max: int = 200
    batch_size: int = 10
    penalties: PenaltyConfig = field(
        default_factory=lambda: PenaltyConfig(varrho1=0.01, varrho2=0.01, step_size=1.0)
    )
    sdw: SdwConfig = field(default_factory=SdwConfig)
    tol: float = 1e-4
    tol_window: int = 10
    seed: int = 0
    deterministic: bool = False
    mode: str = "multi_task"
    task: str | None = None
    step_rule: str = "curvature"
    init: str = "svd"
    hidden: int = 16
    head_lr: float = 0.5
    recalibrate_epochs: int = 50
    dynamic_lr: float = 0.5
    rebalance: bool = True
    project_epochs: int = 100

    def validate(self):
        if int(self.R) < 1:
            raise ConfigError(f"rank R must be >= 1, got {self.R}")
        if int(self.epochs_max) < 1:
            raise ConfigError("epochs_max must be >= 1")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "single_task" and not self.task:
            raise ConfigError("single_task mode needs a task name")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"step_rule must be one of {STEP_RULES}")
        if self.init not in ("svd", "random"):
            raise ConfigError("init must be 'svd' or 'random'")
        if self.tol < 0 or int(self.tol_window) < 1:
            raise ConfigError("tol must be >= 0 and tol_window >= 1")
        if self.head_lr < 0 or self.dynamic_lr < 0 or int(self.recalibrate_epochs) < 0:
            raise ConfigError("head learning rates must be nonnegative")
        self.penalties.validate()
        if self.sdw.enabled:
            if self.sdw.C is not None and not self.sdw.C > 0:
                raise ConfigError("SDW temperature C must be positive")
            if int(self.sdw.m) < 1:
                raise ConfigError("SDW window m must be >= 1")

    def tasks_for(self, labels):
        if self.mode == "unsupervised" or labels is None:
            return []
        if self.mode == "single_task":
            labels.kind(self.task)
            return [self.task]
        return labels.task_names

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        """Missing keys, including nested ones, keep the TrainConfig defaults."""
        d = dict(d)
        base = cls()
        pen = dataclasses.replace(base.penalties, **d.pop("penalties", {}))
        sdw = dataclasses.replace(base.sdw, **d.pop("sdw", {}))
        return cls(penalties=pen, sdw=sdw, **d)


@dataclass
class TrainerState:
    model: FactorModel
    heads: TaskSet
    sdw: SdwState
    epoch: int = 0
    log: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def weights(self, cfg: TrainConfig) -> dict:
        if cfg.sdw.enabled:
            return self.sdw.weight_map()
        p = cfg.penalties
        w = {TENSOR_TASK: p.rho_tensor}
        w.update({h.task_name: p.rho_static for h in self.heads.static})
        w.update({h.task_name: p.rho_dynamic for h in self.heads.dynamic})
        return w


# -- initialisation -------------------------------------------------------------


def _polar(a):
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    return u @ vt


def _orthonormal_or_gaussian(rng, n, R):
    if n >= R:
        return orthonormal(rng, n, R)
    return rng.standard_normal((n, R)) / math.sqrt(R)


def init_model(tensor, cfg: TrainConfig) -> FactorModel:
    """Seeded starting point.

    ``random``: orthonormal Gaussian Q_k, H = I + noise, s ~ U(0.1, 1),
    V ~ N(0, 0.1^2). ``svd``: V from the leading eigenvectors of
    ``sum_k X_k^T X_k``, Q_k the polar factor of ``X_k V``, s_k = 1 and H the
    average of ``Q_k^T X_k V``.
    """
    R = int(cfg.R)
    if R < 1:
        raise ConfigError(f"rank R must be >= 1, got {R}")
    if R > tensor.J or R > min(tensor.I):
        warnings.warn(
            f"rank {R} exceeds J={tensor.J} or min I_k={min(tensor.I)}; "
            "orthogonality cannot hold exactly for every slice",
            stacklevel=2,
        )
    rng = np.random.default_rng(cfg.seed)
    if cfg.init == "random":
        Q = [_orthonormal_or_gaussian(rng, n, R) for n in tensor.I]
        H = np.eye(R) + 0.01 * rng.standard_normal((R, R))
        s = [rng.uniform(0.1, 1.0, size=R) for _ in range(tensor.K)]
        V = 0.1 * rng.standard_normal((tensor.J, R))
        return FactorModel(Q, H, s, V)

    gram = sum(x.T @ x for x in tensor.slices)
    _, vecs = np.linalg.eigh(gram)
    V = vecs[:, ::-1][:, :R]
    if V.shape[1] < R:
        V = np.hstack([V, 0.1 * rng.standard_normal((tensor.J, R - V.shape[1]))])
    Q = []
    for x in tensor.slices:
        a = x @ V
        if x.shape[0] < R or np.linalg.matrix_rank(a) < R:
            a = a + 1e-3 * rng.standard_normal(a.shape)
        Q.append(_polar(a) if x.shape[0] >= R else _orthonormal_or_gaussian(rng, x.shape[0], R))
    H = sum(q.T @ x @ V for q, x in zip(Q, tensor.slices)) / tensor.K
    H = H + 1e-6 * np.eye(R)
    s = [np.ones(R) for _ in range(tensor.K)]
    return FactorModel(Q, H, s, V)


def init_state(tensor, labels, cfg: TrainConfig) -> TrainerState:
    cfg.validate()
    model = init_model(tensor, cfg)
    tasks = cfg.tasks_for(labels)
    if tasks:
        heads = TaskSet.from_labels(labels, cfg.R, tasks, hidden=cfg.hidden, seed=cfg.seed)
        heads.check_trainable(tensor.slice_ids)
    else:
        heads = TaskSet()
    sdw = SdwState([TENSOR_TASK] + heads.task_names, C=cfg.sdw.C, m=cfg.sdw.m)
    return TrainerState(model, heads, sdw)


# -- step rules ---------------------------------------------------------------


def _scale_rows(rule, P, g):
    """Precondition each row of ``g`` (n, R) by its own ``P[i]`` (n, R, R)."""
    if rule == "fixed":
        return g
    if rule == "lipschitz":
        return g / np.linalg.eigvalsh(P).max()
    return np.linalg.solve(P, g[..., None])[..., 0]


def _scale_left(rule, P, g):
    """``P^-1 g`` for a single curvature matrix acting from the left."""
    if rule == "fixed":
        return g
    if rule == "lipschitz":
        return g / np.linalg.eigvalsh(P).max()
    return np.linalg.solve(P, g)


def _finite(x, what, epoch):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite values in {what} at epoch {epoch}", epoch=epoch, step=what)


def _clip(grads):
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm > CLIP:
        return {k: v * (CLIP / norm) for k, v in grads.items()}
    return grads


# -- one epoch ----------------------------------------------------------------


def _batches(K, batch_size, rng):
    order = rng.permutation(K)
    return [order[i:i + batch_size] for i in range(0, K, batch_size)]


def _labelled(table, tb):
    return [k for k, sid in enumerate(tb.slice_ids) if sid in table]


def _static_head_step(h, g, P, cfg):
    """Damped Newton step on (w, b)."""
    R = len(h.w)
    P = P + 1e-3 * np.eye(R + 1)
    step = cfg.penalties.step_size * cfg.head_lr * _scale_left(cfg.step_rule, P, g)
    h.w -= step[:R]
    h.b -= float(step[R])


def _batch_step(tb, mb, heads, cfg, weights, acc, epoch, update_heads=True, blocks="UQHSV"):
    pen = cfg.penalties
    rule, lr = cfg.step_rule, pen.step_size
    R = mb.R
    eye = np.eye(R)
    n = tb.n_observed
    if n == 0:
        return
    rho1 = weights.get(TENSOR_TASK, pen.rho_tensor)
    c = 2.0 * rho1 / n

    sq = sum(float(np.sum(masked_residual(tb, mb, k) ** 2)) for k in range(tb.K))
    acc[TENSOR_TASK][0] += sq
    acc[TENSOR_TASK][1] += n

    # (1) U_k, with the dynamic heads' input gradients
    if "U" in blocks:
        extra = [np.zeros_like(u) for u in mb.U]
        extra_curv = np.zeros(tb.K)
        head_grads = []
        for h in heads.dynamic:
            table = heads.labels.dynamic[h.task_name]
            idx = _labelled(table, tb)
            if not idx:
                continue
            losses, pg, gU = dynamic_batch_loss_and_grads(
                h, [mb.U[k] for k in idx], [table[tb.slice_ids[k]] for k in idx],
                coefs=np.full(len(idx), 1.0 / len(idx)),
            )
            acc[h.task_name][0] += float(np.sum(losses))
            acc[h.task_name][1] += len(idx)
            w = weights.get(h.task_name, pen.rho_dynamic)
            if w != 0:
                # bound on the Gauss-Newton curvature of a logit in its own input row
                lip = 0.25 * (np.linalg.norm(h.w_out) * np.linalg.norm(h.W[:, :R], 2)) ** 2
                for k, g in zip(idx, gU):
                    extra[k] += w * g
                    extra_curv[k] += w * lip / (len(idx) * len(g))
            head_grads.append((h, pg))
        for k in range(tb.K):
            g = grad_U(tb, mb, k, pen, weights=weights, n_obs=n) + extra[k]
            a = mb.V * mb.s[k]
            P = c * np.einsum("ij,jr,jq->irq", tb.masks[k], a, a)
            P += (2.0 * pen.varrho1 + extra_curv[k] + RIDGE) * eye
            mb.U[k] -= lr * _scale_rows(rule, P, g)
            _finite(mb.U[k], "U", epoch)
        if update_heads:
            for h, pg in head_grads:
                pg = _clip(pg)
                step = lr * cfg.dynamic_lr
                h.W -= step * pg["W"]
                h.b -= step * pg["b"]
                h.w_out -= step * pg["w_out"]
                h.b_out -= step * pg["b_out"]

    # (2) Q_k
    if "Q" in blocks:
        P0 = 2.0 * pen.varrho1 * mb.H @ mb.H.T + RIDGE * eye
        for k in range(tb.K):
            g = grad_Q(mb, k, pen)
            # majorises the quartic term; equals 8 varrho2 I at an orthonormal Q_k
            qq = mb.Q[k].T @ mb.Q[k]
            P = P0 + 4.0 * pen.varrho2 * (2.0 * qq + np.linalg.norm(qq - eye, 2) * eye)
            mb.Q[k] -= lr * _scale_left(rule, P, g.T).T
            _finite(mb.Q[k], "Q", epoch)

    # (3) H
    if "H" in blocks:
        g = grad_H(mb)
        P = 2.0 * sum(q.T @ q for q in mb.Q) + RIDGE * eye
        mb.H -= lr * _scale_left(rule, P, g)
        _finite(mb.H, "H", epoch)

    # (4) s_k, projected; then static heads
    if "S" in blocks:
        static_grads = {h.task_name: [np.zeros(R), 0.0, np.zeros((R + 1, R + 1)), 0] for h in heads.static}
        curv_static = np.zeros((R, R))
        for h in heads.static:
            table = heads.labels.static[h.task_name]
            n_lab = len(_labelled(table, tb))
            w = weights.get(h.task_name, pen.rho_static)
            if n_lab and w:
                curv_static += (w / n_lab) * 0.25 * np.outer(h.w, h.w)
        for k in range(tb.K):
            sid = tb.slice_ids[k]
            for h in heads.static:
                table = heads.labels.static[h.task_name]
                if sid in table:
                    loss, gw, gb, _ = static_loss_and_grads(h, mb.s[k], table[sid])
                    acc[h.task_name][0] += loss
                    acc[h.task_name][1] += 1
                    sg = static_grads[h.task_name]
                    sg[0] += gw
                    sg[1] += gb
                    z = np.r_[mb.s[k], 1.0]
                    sg[2] += 0.25 * np.outer(z, z)
                    sg[3] += 1
            g = grad_S(tb, mb, k, pen, heads=heads if heads.static else None, weights=weights, n_obs=n)
            u = mb.U[k]
            P = c * np.einsum("ij,ir,iq,jr,jq->rq", tb.masks[k], u, u, mb.V, mb.V)
            P += curv_static + RIDGE * eye
            mb.s[k][:] = nonneg_project(mb.s[k] - lr * _scale_left(rule, P, g))
            _finite(mb.s[k], "S", epoch)
        if update_heads:
            for h in heads.static:
                gw, gb, P, cnt = static_grads[h.task_name]
                if cnt == 0:
                    continue
                _static_head_step(h, np.r_[gw, gb] / cnt, P / cnt, cfg)

    # (5) V, proximal
    if "V" in blocks:
        g = grad_V(tb, mb, pen, weights=weights, n_obs=n)
        # Gershgorin row sums of each feature's curvature: a diagonal majoriser
        d = np.zeros_like(mb.V)
        for k in range(tb.K):
            a = mb.U[k] * mb.s[k]
            d += np.einsum("ij,ir,iq->jr", tb.masks[k], np.abs(a), np.abs(a))
        d = c * d + RIDGE
        if rule == "fixed":
            d = np.ones_like(d)
        elif rule == "lipschitz":
            d = np.full_like(d, d.max())
        mb.V[:] = soft_threshold(mb.V - lr * g / d, lr * pen.c2 / d)
        _finite(mb.V, "V", epoch)


def rebalance(model: FactorModel, heads: TaskSet | None = None) -> None:
    """Move column scale of H and V into s_k without changing any prediction.

    The coupling penalty alone would let U and H shrink while V grows; this
    keeps the exported ``Q_k H`` on the same scale as the free ``U_k``.
    """
    v = np.linalg.norm(model.V, axis=0)
    h = np.linalg.norm(model.H, axis=0)
    v = np.where(v > 0, v, 1.0)
    h = np.where(h > 0, h, 1.0)
    model.V /= v
    model.H /= h
    for k in range(model.K):
        model.U[k] /= h
        model.s[k] *= v * h
    if heads is not None:
        for sh in heads.static:
            sh.w /= v * h
        for dh in heads.dynamic:
            dh.W[:, : model.R] *= h


def _epoch_losses(acc):
    return {t: (a[0] / a[1] if a[1] else float("nan")) for t, a in acc.items()}


def epoch_step(state: TrainerState, tensor, cfg: TrainConfig, rng=None) -> TrainerState:
    """One pass over shuffled mini-batches followed by the task-weight update."""
    state.epoch += 1
    t = state.epoch
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, t])
    weights = state.weights(cfg)
    heads = state.heads
    acc = {name: [0.0, 0] for name in state.sdw.tasks}
    for idx in _batches(tensor.K, cfg.batch_size, rng):
        tb, mb = tensor.subset(idx), state.model.subset(idx)
        _batch_step(tb, mb, heads, cfg, weights, acc, t)
    # a null step leaves the gauge untouched
    if cfg.rebalance and cfg.penalties.step_size > 0:
        rebalance(state.model, heads)
    losses = _epoch_losses(acc)
    for name, v in losses.items():
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite {name} loss at epoch {t}", epoch=t, step="loss")
    total = sum(weights[name] * losses[name] for name in state.sdw.tasks)
    state.totals.append(total)
    state.sdw.record(losses)
    state.last_losses = losses
    state.last_weights = weights
    if cfg.sdw.enabled:
        update_weights(state.sdw, t + 1)
    return state


# -- fitting ------------------------------------------------------------------


def _moving_average_converged(totals, window, tol):
    if len(totals) < window + 1:
        return False
    now = float(np.mean(totals[-window:]))
    before = float(np.mean(totals[-window - 1:-1]))
    return abs(now - before) <= tol * abs(before)


@dataclass
class FitResult:
    model: FactorModel
    heads: TaskSet
    log: list
    convergence_epoch: int
    converged: bool
    state: TrainerState = None


def fit(tensor, labels, cfg: TrainConfig, on_epoch=None, checkpoint=None, checkpoint_every=25):
    """Run epochs until the moving-average total loss plateaus or epochs_max.

    ``checkpoint(model, heads, epoch)`` is called every ``checkpoint_every``
    epochs and at exit. Returns a FitResult whose model has ``U_k = Q_k H``.
    """
    cfg.validate()
    if labels is not None:
        labels.validate(tensor)
    state = init_state(tensor, labels, cfg)
    rows = []
    converged = False
    last_good = None
    for _ in range(cfg.epochs_max):
        last_good = (state.model.copy(), copy.deepcopy(state.heads), state.epoch)
        t0 = time.perf_counter()
        try:
            epoch_step(state, tensor, cfg)
        except DivergenceError as exc:
            exc.state = last_good
            if checkpoint is not None:
                checkpoint(last_good[0].export(), last_good[1], last_good[2])
            raise
        wall_ms = 0 if cfg.deterministic else round(1000.0 * (time.perf_counter() - t0), 3)
        fit_now = fit_score(tensor, state.model)
        for name in state.sdw.tasks:
            rows.append({
                "epoch": state.epoch,
                "task": name,
                "loss": state.last_losses[name],
                "weight": state.last_weights[name],
                "fit": fit_now,
                "wall_ms": wall_ms,
            })
        if on_epoch is not None:
            on_epoch(state)
        if checkpoint is not None and state.epoch % checkpoint_every == 0:
            checkpoint(state.model.copy().export(), state.heads, state.epoch)
        if _moving_average_converged(state.totals, cfg.tol_window, cfg.tol):
            converged = True
            break
    state.model.export()
    if len(state.heads) and cfg.recalibrate_epochs:
        recalibrate_heads(state.model, state.heads, tensor, cfg)
    if checkpoint is not None:
        checkpoint(state.model, state.heads, state.epoch)
    state.log = rows
    return FitResult(state.model, state.heads, rows, state.epoch, converged, state)


# -- evaluation -----------------------------------------------------------------


def project_slices(model: FactorModel, tensor, cfg: TrainConfig, epochs=None) -> FactorModel:
    """Fit Q_k and s_k for new slices with H and V frozen.

    Returns a FactorModel over ``tensor`` sharing H and V (copies) with the
    trained model and ``U_k = Q_k H``.
    """
    epochs = cfg.project_epochs if epochs is None else epochs
    R = model.R
    H, V = model.H.copy(), model.V.copy()
    s0 = np.mean(model.s, axis=0) if model.K else np.ones(R)
    Q = []
    for x in tensor.slices:
        a = x @ V @ np.diag(s0) @ H.T
        Q.append(_polar(a) if x.shape[0] >= R else a / max(np.linalg.norm(a), 1e-12))
    proj = FactorModel(Q, H, [s0.copy() for _ in Q], V)
    weights = {TENSOR_TASK: cfg.penalties.rho_tensor or 1.0}
    acc = {TENSOR_TASK: [0.0, 0]}
    for _ in range(epochs):
        _batch_step(tensor, proj, TaskSet(), cfg, weights, acc, 0, update_heads=False, blocks="UQS")
    return proj.export()


def predict(model: FactorModel, heads: TaskSet, tensor):
    """Per-task predictions: static -> {slice_id: p}, dynamic -> {slice_id: array}."""
    out = {}
    for h in heads.static:
        out[h.task_name] = {sid: static_forward(h, model.s[k]) for k, sid in enumerate(tensor.slice_ids)}
    U = [q @ model.H for q in model.Q]
    for h in heads.dynamic:
        ps = dynamic_batch_predict(h, U) if U else []
        out[h.task_name] = dict(zip(tensor.slice_ids, ps))
    return out


def task_pr_auc(preds, labels, task):
    """PR-AUC of one task over the slices that carry its labels; NaN if undefined."""
    if task in labels.static:
        table = labels.static[task]
        ids = [s for s in preds[task] if s in table]
        scores = np.array([preds[task][s] for s in ids])
        ys = np.array([table[s] for s in ids])
    else:
        table = labels.dynamic[task]
        ids = [s for s in preds[task] if s in table]
        scores = np.concatenate([preds[task][s] for s in ids]) if ids else np.zeros(0)
        ys = np.concatenate([table[s] for s in ids]) if ids else np.zeros(0)
    if ys.size == 0 or ys.sum() == 0:
        return float("nan")
    return pr_auc(scores, ys)


def evaluate(model, heads, test_tensor, test_labels, cfg: TrainConfig, train_tensor=None, convergence_epoch=None):
    """FIT on train and test, plus test PR-AUC per task (NaN when undefined)."""
    if test_tensor is None or test_tensor.K == 0:
        raise ConfigError("empty test set")
    proj = project_slices(model, test_tensor, cfg)
    report = {
        "fit_test": fit_score(test_tensor, proj),
        "pr_auc": {},
        "convergence_epoch": convergence_epoch,
    }
    if train_tensor is not None:
        report["fit_train"] = fit_score(train_tensor, model)
    if test_labels is not None and len(heads):
        preds = predict(proj, heads, test_tensor)
        for task in heads.task_names:
            report["pr_auc"][task] = task_pr_auc(preds, test_labels, task)
    return report


def fit_heads(model: FactorModel, tensor, labels, cfg: TrainConfig, tasks=None, epochs=None) -> TaskSet:
    """Train fresh heads on frozen factors (post-hoc prediction)."""
    tasks = labels.task_names if tasks is None else tasks
    heads = TaskSet.from_labels(labels, model.R, tasks, hidden=cfg.hidden, seed=cfg.seed)
    heads.check_trainable(tensor.slice_ids)
    frozen = model.copy().export()
    rng = np.random.default_rng([cfg.seed, 7])
    for _ in range(cfg.epochs_max if epochs is None else epochs):
        for idx in _batches(tensor.K, cfg.batch_size, rng):
            _head_only_step(tensor.subset(idx), frozen.subset(idx), heads, cfg)
    return heads


def recalibrate_heads(model: FactorModel, heads: TaskSet, tensor, cfg: TrainConfig) -> TaskSet:
    """Continue training ``heads`` on reconstruction-only projections of ``tensor``.

    Held-out slices are represented by projection, so the heads finish on
    inputs produced the same way rather than on label-shaped training factors.
    """
    proj = project_slices(model, tensor, cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    for _ in range(int(cfg.recalibrate_epochs)):
        for idx in _batches(tensor.K, cfg.batch_size, rng):
            _head_only_step(tensor.subset(idx), proj.subset(idx), heads, cfg)
    return heads


def _head_only_step(tb, mb, heads, cfg):
    lr = cfg.penalties.step_size
    R = mb.R
    for h in heads.dynamic:
        table = heads.labels.dynamic[h.task_name]
        idx = _labelled(table, tb)
        if not idx:
            continue
        _, pg, _ = dynamic_batch_loss_and_grads(
            h, [mb.U[k] for k in idx], [table[tb.slice_ids[k]] for k in idx],
            coefs=np.full(len(idx), 1.0 / len(idx)),
        )
        pg = _clip(pg)
        step = lr * cfg.dynamic_lr
        h.W -= step * pg["W"]
        h.b -= step * pg["b"]
        h.w_out -= step * pg["w_out"]
        h.b_out -= step * pg["b_out"]
    for h in heads.static:
        table = heads.labels.static[h.task_name]
        g = np.zeros(R + 1)
        P = np.zeros((R + 1, R + 1))
        cnt = 0
        for k, sid in enumerate(tb.slice_ids):
            if sid in table:
                _, gw, gb, _ = static_loss_and_grads(h, mb.s[k], table[sid])
                g += np.r_[gw, gb]
                z = np.r_[mb.s[k], 1.0]
                P += 0.25 * np.outer(z, z)
                cnt += 1
        if cnt:
            _static_head_step(h, g / cnt, P / cnt, cfg)


# -- scaling ------------------------------------------------------------------


def _linear_r2(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(slope), float(intercept), (1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0)


def time_epochs(tensor, labels, cfg: TrainConfig, epochs=3, repeats=3):
    """Per-epoch wall time (seconds) of ``epochs`` training epochs, best of ``repeats``.

    The minimum rather than the median: scheduler noise only ever adds time.
    """
    times = []
    for _ in range(repeats):
        state = init_state(tensor, labels, cfg)
        t0 = time.perf_counter()
        for _ in range(epochs):
            epoch_step(state, tensor, cfg)
        times.append((time.perf_counter() - t0) / epochs)
    return float(min(times))


def scaling_probe(base_spec, cfg: TrainConfig, K_values=(100, 200, 400, 800), J_values=None,
                  R_values=None, epochs=3, repeats=3):
    """Per-epoch time while varying K (and optionally J and R).

    Returns ``{"K": rows, "J": rows, "R": rows, "fits": {...}}`` where each
    row is ``(value, seconds)`` and fits hold slope, intercept and R^2.
    """
    from .tensor import synth_generate

    out = {"fits": {}}

    def probe(axis, values, make):
        rows = []
        for v in values:
            spec, run_cfg = make(v)
            tensor, labels, _ = synth_generate(spec)
            rows.append((v, time_epochs(tensor, labels, run_cfg, epochs, repeats)))
        out[axis] = rows
        out["fits"][axis] = _linear_r2([r[0] for r in rows], [r[1] for r in rows])

    probe("K", K_values, lambda v: (_replace(base_spec, K=v), cfg))
    if J_values:
        probe("J", J_values, lambda v: (_replace(base_spec, J=v), cfg))
    if R_values:
        probe("R", R_values, lambda v: (_replace(base_spec, R_true=min(v, base_spec.I_min, base_spec.J)),
                                        _replace(cfg, R=v)))
    return out


def _replace(obj, **kw):
    import dataclasses

    return dataclasses.replace(obj, **kw)
