import numpy as np
import pytest

from mtparafac2 import FactorModel, IrregularTensor, LabelTable, PenaltyConfig, TaskSet
from mtparafac2.heads import DynamicHead, StaticHead
from mtparafac2.model import TENSOR_TASK, masked_l2_loss


def central_diff(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / den)


def random_instance(seed, K=3, max_dim=5, missing=0.2, hidden=3, with_heads=True):
    """Small random tensor, model with U != QH, and heads with labels."""
    rng = np.random.default_rng(seed)
    R = int(rng.integers(1, 4))
    J = int(rng.integers(1, max_dim + 1))
    I = rng.integers(1, max_dim + 1, size=K)
    slices = [rng.standard_normal((n, J)) for n in I]
    masks = [(rng.random((n, J)) >= missing).astype(float) for n in I]
    masks[0][0, 0] = 1.0
    ids = [f"k{k}" for k in range(K)]
    tensor = IrregularTensor(slices, masks, slice_ids=ids)
    Q = [rng.standard_normal((n, R)) for n in I]
    H = rng.standard_normal((R, R))
    s = [rng.uniform(0.1, 1.5, size=R) for _ in range(K)]
    V = rng.standard_normal((J, R))
    U = [q @ H + 0.3 * rng.standard_normal(q.shape) for q in Q]
    model = FactorModel(Q, H, s, V, U)
    pen = PenaltyConfig(
        rho_tensor=float(rng.uniform(0.5, 2)), rho_static=float(rng.uniform(0.5, 2)),
        rho_dynamic=float(rng.uniform(0.5, 2)), varrho1=float(rng.uniform(0.1, 1)),
        varrho2=float(rng.uniform(0.1, 1)), c2=0.0, step_size=0.01,
    )
    if not with_heads:
        return tensor, model, pen, TaskSet(), None
    labels = LabelTable(
        static={"st": {sid: int(rng.integers(0, 2)) for sid in ids[: K - 1]}},
        dynamic={"dy": {sid: rng.integers(0, 2, size=n) for sid, n in zip(ids[1:], I[1:])}},
    )
    st = StaticHead("st", rng.standard_normal(R), float(rng.standard_normal()))
    dy = DynamicHead.init("dy", R, hidden, rng, scale=0.5)
    dy.b[:] = 0.3 * rng.standard_normal(dy.b.shape)
    dy.w_out[:] = rng.standard_normal(hidden)
    dy.b_out = float(rng.standard_normal())
    heads = TaskSet([st], [dy], labels)
    weights = {TENSOR_TASK: pen.rho_tensor, "st": pen.rho_static, "dy": pen.rho_dynamic}
    return tensor, model, pen, heads, weights


def total_objective(t, m, pen, heads, weights):
    """Smooth objective whose partial derivatives the block gradients return."""
    w = weights or {}
    val = w.get(TENSOR_TASK, pen.rho_tensor) * masked_l2_loss(t, m)
    eye = np.eye(m.R)
    val += pen.varrho1 * sum(np.sum((u - q @ m.H) ** 2) for q, u in zip(m.Q, m.U))
    val += pen.varrho2 * sum(np.sum((q.T @ q - eye) ** 2) for q in m.Q)
    if heads is not None and len(heads):
        for name, loss in heads.task_losses(t, m).items():
            if np.isfinite(loss):
                val += w[name] * loss
    return float(val)


@pytest.fixture
def tiny_tensor():
    x = [np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), np.array([[7.0, 8.0]])]
    return IrregularTensor(x, slice_ids=["a", "b"], feature_names=["f0", "f1"])


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
