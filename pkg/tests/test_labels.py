import itertools
import json

import numpy as np
import pytest

from drivexai import labels as L


def onehot(n, *idx):
    v = np.zeros(n, dtype=int)
    v[list(idx)] = 1
    return v


R = {name: i for i, name in enumerate(L.REASONS)}


def test_vocab_sizes():
    assert len(L.ACTIONS) == 4 and len(L.REASONS) == 21
    assert set(L.REASON_TEXT) == set(L.REASONS)
    assert set(L.ACTION_TEXT) == set(L.ACTIONS)


@pytest.mark.parametrize(
    "probs, expected",
    [
        ([0.6, 0.4, 0.5, 0.51], [1, 0, 0, 1]),
        ([0, 0, 0, 0], [0, 0, 0, 0]),
        ([0.99] * 21, [1] * 21),
    ],
)
def test_decide_examples(probs, expected):
    assert L.decide(probs, L.DecisionConfig(0.5)).tolist() == expected


def test_decide_errors():
    with pytest.raises(L.LabelError, match="empty decision vector"):
        L.decide([])
    with pytest.raises(L.LabelError, match="probability out of range"):
        L.decide([0.2, 1.2])
    with pytest.raises(L.LabelError, match="probability out of range"):
        L.decide([-0.1])
    with pytest.raises(L.LabelError):
        L.DecisionConfig(1.0)


def test_decide_batch_matches_rows():
    p = np.random.default_rng(0).random((7, 21))
    batch = L.decide(p)
    assert np.array_equal(batch, np.stack([L.decide(row) for row in p]))


def test_explanation_defined():
    assert not L.explanation_defined(np.zeros(4), np.zeros(21))
    assert L.explanation_defined(onehot(4, 0), np.zeros(21))
    assert L.explanation_defined(np.zeros(4), onehot(21, 20))


def test_default_matrix_audit():
    pm = L.default_pair_matrix()
    assert pm.n_pairs == 33
    assert pm.matrix.sum(1).tolist() == [9, 12, 6, 6]
    assert list(pm.pairs) == sorted(pm.pairs)
    assert all(0 <= a < 4 and 0 <= r < 21 for a, r in pm.pairs)
    # count the ones independently of the pairs list
    assert sum(int(pm.matrix[a, r]) for a in range(4) for r in range(21)) == len(pm.pairs)
    assert int(pm.exclusion_mask().sum()) == 6


def test_turn_rows_pair_with_opposite_side_blockers():
    pm = L.default_pair_matrix()
    left = {L.REASONS[r] for r in np.nonzero(pm.matrix[L.TURN_LEFT])[0]}
    right = {L.REASONS[r] for r in np.nonzero(pm.matrix[L.TURN_RIGHT])[0]}
    assert {"solid_line_right", "no_lane_right", "obstacles_right_lane"} <= left
    assert {"solid_line_left", "no_lane_left", "obstacles_left_lane"} <= right


def test_joint_expand_examples():
    pm = L.default_pair_matrix()
    names = pm.pair_names()
    assert not L.joint_expand(np.zeros(4), np.ones(21), pm).any()

    j = L.joint_expand(onehot(4, 0), onehot(21, R["road_clear"]), pm)
    assert j.sum() == 1 and names[int(np.argmax(j))] == "move_forward|road_clear"

    j = L.joint_expand([0, 0, 1, 1], onehot(21, R["solid_line_right"], R["front_car_turning_left"]), pm, True)
    assert [names[i] for i in np.nonzero(j)[0]] == ["turn_left|front_car_turning_left"]
    j = L.joint_expand([0, 0, 1, 1], onehot(21, R["solid_line_right"], R["front_car_turning_left"]), pm, False)
    assert "turn_left|solid_line_right" in [names[i] for i in np.nonzero(j)[0]]


def _joint_oracle(a, r, matrix, exclude):
    out = []
    for ai in range(4):
        for ri in range(21):
            if not matrix[ai][ri]:
                continue
            v = int(a[ai] and r[ri])
            if exclude and a[2] and a[3]:
                if (ai == 2 and ri in (18, 19, 20)) or (ai == 3 and ri in (15, 16, 17)):
                    v = 0
            out.append(v)
    return out


@pytest.mark.parametrize("exclude", [True, False])
def test_joint_expand_brute_force(exclude):
    pm = L.default_pair_matrix()
    rng = np.random.default_rng(1)
    reasons = rng.integers(0, 2, size=(200, 21))
    for a in itertools.product((0, 1), repeat=4):
        got = L.joint_expand(np.tile(a, (200, 1)), reasons, pm, exclude)
        want = [_joint_oracle(a, r, pm.matrix.tolist(), exclude) for r in reasons]
        assert got.tolist() == want


def test_joint_expand_vocab_mismatch():
    with pytest.raises(L.LabelError, match="pair matrix incompatible with label vectors"):
        L.joint_expand(np.zeros(5), np.zeros(21))
    with pytest.raises(L.LabelError, match="pair matrix incompatible with label vectors"):
        L.joint_expand(np.zeros(4), np.zeros(20))


def test_pair_matrix_file_round_trip(tmp_path):
    pm = L.default_pair_matrix()
    path = tmp_path / "pairs.json"
    L.save_pair_matrix(pm, path)
    assert L.load_pair_matrix(path) == pm
    assert L.load_pair_matrix(None) == pm


def test_pair_matrix_file_with_34_ones(tmp_path):
    doc = L.default_pair_matrix().to_json()
    doc["pairs"].append([0, 3])  # one extra pair, no declared count -> 33 expected
    path = tmp_path / "pairs.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(L.LabelError, match="invalid pair matrix file"):
        L.load_pair_matrix(path)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(pairs=[[0, 99]]),
        lambda d: d.update(pairs=[[0, 1, 2]]),
        lambda d: d.update(actions=d["actions"][:3]),
        lambda d: d.pop("pairs"),
    ],
)
def test_pair_matrix_file_invalid(tmp_path, mutate):
    doc = L.default_pair_matrix().to_json()
    mutate(doc)
    path = tmp_path / "pairs.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(L.LabelError, match="invalid pair matrix file"):
        L.load_pair_matrix(path)


def test_pair_matrix_rejects_non_binary():
    m = L.default_pair_matrix().matrix.copy()
    m[0, 0] = 2
    with pytest.raises(L.LabelError):
        L.PairMatrix(m)
