import json

import numpy as np
import pytest

from mtparafac2 import FormatError, SynthSpec, TaskSet, load_checkpoint, save_checkpoint, synth_generate
from mtparafac2.checkpoint import model_from_dict, model_to_dict


def test_round_trip_with_heads(tmp_path):
    t, lab, truth = synth_generate(SynthSpec(K=5, J=4, R_true=2, I_min=2, I_max=4))
    heads = TaskSet.from_labels(lab, R=2, hidden=3, seed=1)
    save_checkpoint(tmp_path / "c.json", truth, t.slice_ids, heads)
    model, ids, back = load_checkpoint(tmp_path / "c.json", lab)
    assert list(ids) == list(t.slice_ids)
    assert np.array_equal(model.H, truth.H) and np.array_equal(model.V, truth.V)
    assert all(np.array_equal(a, b) for a, b in zip(model.Q, truth.Q))
    assert all(np.array_equal(a, b) for a, b in zip(model.s, truth.s))
    assert all(np.array_equal(u, q @ model.H) for q, u in zip(model.Q, model.U))
    assert back.task_names == heads.task_names
    assert np.array_equal(back.dynamic[0].W, heads.dynamic[0].W)
    assert not (tmp_path / "c.json.tmp").exists()


def test_round_trip_without_heads(tmp_path):
    t, _, truth = synth_generate(SynthSpec(K=3, J=3, R_true=1, I_min=1, I_max=2))
    save_checkpoint(tmp_path / "c.json", truth, t.slice_ids)
    _, _, heads = load_checkpoint(tmp_path / "c.json")
    assert heads is None


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("V"),
    lambda d: d.update(R=7),
    lambda d: d["slices"][0].pop("s"),
])
def test_malformed_documents(mutate):
    t, _, truth = synth_generate(SynthSpec(K=2, J=3, R_true=2, I_min=2, I_max=3))
    doc = json.loads(json.dumps(model_to_dict(truth, t.slice_ids)))
    mutate(doc)
    with pytest.raises(FormatError):
        model_from_dict(doc)


def test_not_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.json")
