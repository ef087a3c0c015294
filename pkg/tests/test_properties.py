import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtparafac2 import FactorModel, IrregularTensor, fit_score, nonneg_project, pr_auc, soft_threshold

finite = st.floats(-1e6, 1e6, allow_nan=False)
vectors = arrays(np.float64, st.integers(1, 50), elements=finite)


@settings(max_examples=200)
@given(vectors, st.floats(0, 1e3))
def test_soft_threshold_shrinks_towards_zero(x, eta):
    out = soft_threshold(x, eta)
    assert np.all(np.abs(out) <= np.abs(x))
    assert np.all(np.sign(out) * np.sign(x) >= 0)
    assert np.all(out[np.abs(x) <= eta] == 0)


def test_soft_threshold_ten_thousand_inputs():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(10_000) * 10
    eta = rng.uniform(0, 5, 10_000)
    out = soft_threshold(x, eta)
    assert np.all(np.abs(out) <= np.abs(x)) and np.all(out * x >= 0)
    assert np.allclose(np.abs(out), np.maximum(np.abs(x) - eta, 0))


@given(vectors)
def test_nonneg_project_is_idempotent(x):
    once = nonneg_project(x)
    assert np.all(once >= 0)
    assert np.array_equal(nonneg_project(once), once)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_fit_never_exceeds_one(seed):
    rng = np.random.default_rng(seed)
    J, R = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    xs = [rng.standard_normal((int(rng.integers(1, 5)), J)) for _ in range(int(rng.integers(1, 4)))]
    m = FactorModel([rng.standard_normal((x.shape[0], R)) for x in xs], rng.standard_normal((R, R)),
                    [rng.uniform(0, 2, R) for _ in xs], rng.standard_normal((J, R)))
    assert fit_score(IrregularTensor(xs), m) <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.booleans()), min_size=1, max_size=40)
       .filter(lambda xs: any(y for _, y in xs)))
def test_pr_auc_invariant_under_monotone_maps(pairs):
    # integer scores keep the affine map exact, so no ties are created or broken
    scores = np.array([float(s) for s, _ in pairs])
    labels = np.array([int(y) for _, y in pairs])
    a = pr_auc(scores, labels)
    assert 0.0 < a <= 1.0
    assert a == pr_auc(3.0 * scores + 7.0, labels) == pr_auc(np.exp(scores / 10), labels)
