import numpy as np
import pytest
from hypothesis import given, strategies as st

from lcm4rec.data import ChoiceData, ChoiceObservation, UtilityParams, read_dataset, utility, write_dataset

from conftest import random_params


def test_observation_validation():
    with pytest.raises(ValueError):
        ChoiceObservation(0, 5, (1, 2))
    with pytest.raises(ValueError):
        ChoiceObservation(0, 1, (1, 1))
    with pytest.raises(ValueError):
        ChoiceObservation(0, 1, (1,))


def test_utility_is_dot_plus_constant(small_params):
    up = small_params
    for i in range(up.n_users):
        for j in range(up.n_items):
            assert utility(up, i, j) == pytest.approx(up.user_embeddings[i] @ up.item_embeddings[j]
                                                      + up.item_constants[j])
    with pytest.raises(KeyError):
        utility(up, up.n_users, 0)


def test_params_shape_checks():
    with pytest.raises(ValueError):
        UtilityParams(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        UtilityParams(np.zeros((2, 3)), np.zeros((4, 3)), np.zeros(3))


def test_params_dict_round_trip(small_params):
    again = UtilityParams.from_dict(small_params.to_dict())
    np.testing.assert_array_equal(again.user_embeddings, small_params.user_embeddings)
    np.testing.assert_array_equal(again.item_constants, small_params.item_constants)


obs_strategy = st.integers(2, 6).flatmap(
    lambda k: st.tuples(
        st.integers(0, 20),
        st.lists(st.integers(0, 50), min_size=k, max_size=k, unique=True),
        st.integers(0, k - 1),
    )
).map(lambda t: ChoiceObservation(t[0], t[1][t[2]], tuple(t[1])))


@given(st.lists(obs_strategy, min_size=1, max_size=30))
def test_groups_put_chosen_first_and_keep_order(obs):
    data = ChoiceData(obs)
    seen = np.zeros(len(obs), dtype=int)
    for g in data.groups():
        seen[g.order] += 1
        for r, n in enumerate(g.order):
            o = obs[n]
            assert g.items[r, 0] == o.chosen
            assert sorted(g.items[r]) == sorted(o.choice_set)
            assert tuple(g.original_items[r]) == o.choice_set
            assert o.choice_set[g.chosen_pos[r]] == o.chosen
            assert g.users[r] == o.user
    np.testing.assert_array_equal(seen, 1)


@given(st.lists(obs_strategy, max_size=20))
def test_jsonl_round_trip(tmp_path_factory, obs):
    path = tmp_path_factory.mktemp("d") / "x.jsonl"
    write_dataset(path, obs)
    assert read_dataset(path).observations == obs


def test_bad_record_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"user":0,"chosen":1,"choice_set":[1,2]}\n\n{"user":0,"chosen":9,"choice_set":[1,2]}\n')
    with pytest.raises(ValueError, match=":3:"):
        read_dataset(path)


def test_utilities_matrix(rng):
    up = random_params(rng, 4, 6, 3)
    M = up.user_item_matrix()
    assert M.shape == (4, 6)
    users = np.array([[0, 0], [3, 3]])
    items = np.array([[1, 5], [2, 0]])
    np.testing.assert_allclose(up.utilities(users, items), M[users, items])
