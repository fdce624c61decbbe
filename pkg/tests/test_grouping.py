import numpy as np
import pytest

from fixq.grouping import group_count, group_matrix, groups_per_layer, parse_grouping, partition
from fixq.store import Grouping, ModelManifest, WeightTensor


def test_layer_wise_is_one_group():
    t = WeightTensor(np.arange(72.0).reshape(4, 2, 3, 3))
    gs = partition(t, "lw")
    assert len(gs) == 1 and len(gs[0]) == 72


def test_channel_wise_slices_output_channels():
    t = WeightTensor(np.arange(72.0).reshape(4, 2, 3, 3))
    gs = partition(t, "cw")
    assert [len(g) for g in gs] == [18] * 4
    for k, g in enumerate(gs):
        assert np.array_equal(g.view(t), t.values[k].reshape(-1))
    assert sorted(i for g in gs for i in g.indices) == list(range(72))


def test_group_matrix_matches_partition():
    v = np.random.default_rng(0).normal(size=(3, 2, 5, 5))
    gm = group_matrix(v, "cw")
    assert gm.shape == (3, 50)
    for g in partition(WeightTensor(v), "cw"):
        assert np.array_equal(gm[g.index], g.view(v))
    assert group_matrix(v, "lw").shape == (1, 150)


def test_counts():
    m = ModelManifest.from_dims([(4, 2, 3, 3), (3, 4, 1, 1)])
    assert groups_per_layer(m, "cw") == [4, 3]
    assert group_count(m, Grouping.LW) == 2


@pytest.mark.parametrize("bad", ["xw", "", "channel"])
def test_parse_rejects(bad):
    with pytest.raises(ValueError):
        parse_grouping(bad)


def test_parse_case_insensitive():
    assert parse_grouping("CW") is Grouping.CW
    assert parse_grouping(Grouping.LW) is Grouping.LW
