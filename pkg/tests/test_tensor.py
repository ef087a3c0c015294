import json

import numpy as np
import pytest

from mtparafac2 import (
    ConfigError,
    FormatError,
    IrregularTensor,
    LabelTable,
    ShapeError,
    SynthSpec,
    UniquenessError,
    load_labels,
    load_tensor,
    save_labels,
    save_tensor,
    split_tensor,
    synth_generate,
)


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


def test_load_two_records(tmp_path):
    p = write_lines(tmp_path / "t.jsonl", [
        {"features": ["a", "b"]},
        {"id": "x", "rows": [[1, 2], [3, 4], [5, 6]]},
        {"id": "y", "rows": [[7, 8]]},
    ])
    t = load_tensor(p)
    assert (t.K, t.J, t.I) == (2, 2, [3, 1])
    assert np.all(t.masks[0] == 1)


def test_load_ragged_rows_names_slice(tmp_path):
    p = write_lines(tmp_path / "t.jsonl", [{"features": ["a", "b"]}, {"id": "bad", "rows": [[1, 2], [1, 2, 3]]}])
    with pytest.raises(ShapeError, match="bad"):
        load_tensor(p)


def test_load_malformed_line_number(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"features": ["a"]}\n{"id": "x", "rows": [[1]]}\n{not json\n')
    with pytest.raises(FormatError, match=":3:"):
        load_tensor(p)


def test_load_duplicate_id(tmp_path):
    p = write_lines(tmp_path / "t.jsonl", [{"features": ["a"]}, {"id": "x", "rows": [[1]]}, {"id": "x", "rows": [[2]]}])
    with pytest.raises(UniquenessError):
        load_tensor(p)


def test_masked_entries_stored_as_zero():
    t = IrregularTensor([np.array([[1.0, 2.0]])], [np.array([[1.0, 0.0]])])
    assert t.slices[0][0, 1] == 0.0
    with pytest.raises(ValueError):
        t.slices[0][0, 0] = 5.0


def test_round_trip_is_bit_exact(tmp_path):
    t, lab, _ = synth_generate(SynthSpec(K=6, J=4, R_true=2, I_min=2, I_max=5, noise_sd=0.3, missing_rate=0.3))
    save_tensor(t, tmp_path / "t.jsonl")
    save_labels(lab, tmp_path / "l.csv")
    t2 = load_tensor(tmp_path / "t.jsonl")
    lab2 = load_labels(tmp_path / "l.csv", t2)
    assert t2.slice_ids == t.slice_ids and t2.feature_names == t.feature_names
    for a, b, ma, mb in zip(t.slices, t2.slices, t.masks, t2.masks):
        assert np.array_equal(a, b) and np.array_equal(ma, mb)
    assert lab2.static == lab.static
    for task in lab.dynamic:
        for sid in lab.dynamic[task]:
            assert np.array_equal(lab.dynamic[task][sid], lab2.dynamic[task][sid])
    save_tensor(t2, tmp_path / "t2.jsonl")
    assert (tmp_path / "t.jsonl").read_bytes() == (tmp_path / "t2.jsonl").read_bytes()


def test_labels_validate_lengths(tiny_tensor):
    bad = LabelTable(dynamic={"d": {"a": np.array([0, 1])}})
    with pytest.raises(ShapeError):
        bad.validate(tiny_tensor)
    unknown = LabelTable(static={"s": {"zz": 1}})
    with pytest.raises(ShapeError):
        unknown.validate(tiny_tensor)


def test_labels_csv_rejects_bad_label(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("slice_id,task,kind,t,label\na,m,static,,2\n")
    with pytest.raises(FormatError, match=":2:"):
        load_labels(p)


@pytest.mark.parametrize("K,frac,n_train", [(10, 0.8, 8), (2, 0.5, 1), (7, 0.8, 6)])
def test_split_sizes(K, frac, n_train):
    t = IrregularTensor([np.ones((1, 1)) * k for k in range(K)])
    (tr, _), (te, _) = split_tensor(t, None, frac, seed=3)
    assert tr.K == n_train and te.K == K - n_train
    assert set(tr.slice_ids).isdisjoint(te.slice_ids)
    assert set(tr.slice_ids) | set(te.slice_ids) == set(t.slice_ids)


def test_split_deterministic_and_labels_follow():
    t, lab, _ = synth_generate(SynthSpec(K=20, J=3, R_true=2))
    a = split_tensor(t, lab, 0.8, seed=5)
    b = split_tensor(t, lab, 0.8, seed=5)
    assert a[0][0].slice_ids == b[0][0].slice_ids
    for task, table in a[1][1].static.items():
        assert set(table) == set(a[1][0].slice_ids)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_rejects_fraction(frac, tiny_tensor):
    with pytest.raises(ConfigError):
        split_tensor(tiny_tensor, None, frac)


def test_synth_noiseless_exact():
    t, _, truth = synth_generate(SynthSpec(K=50, J=20, R_true=5))
    for k in range(t.K):
        recon = (truth.Q[k] @ truth.H * truth.s[k]) @ truth.V.T
        assert np.max(np.abs(recon - t.slices[k])) < 1e-12
    assert all(np.linalg.norm(q.T @ q - np.eye(5)) < 1e-10 for q in truth.Q)
    assert min(float(v.min()) for v in truth.s) >= 0.5


def test_synth_missing_rate_concentration():
    t, _, _ = synth_generate(SynthSpec(K=100, J=20, R_true=5, missing_rate=0.3))
    total = sum(m.size for m in t.masks)
    assert total >= 1e4
    assert 0.65 <= t.n_observed / total <= 0.75


def test_synth_deterministic():
    a = synth_generate(SynthSpec(seed=11, noise_sd=0.1, missing_rate=0.2))
    b = synth_generate(SynthSpec(seed=11, noise_sd=0.1, missing_rate=0.2))
    assert all(np.array_equal(x, y) for x, y in zip(a[0].slices, b[0].slices))
    assert a[1].static == b[1].static


@pytest.mark.parametrize("kw", [dict(missing_rate=1.0), dict(R_true=6, I_min=5), dict(label_noise=0.5), dict(I_min=9, I_max=8)])
def test_synth_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        synth_generate(SynthSpec(**kw))
