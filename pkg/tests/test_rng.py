import numpy as np
from scipy import stats

from pdtransport.rng import EventStream, uniforms


def test_uniforms_are_pure_functions_of_the_key():
    ids = np.arange(1000)
    a = uniforms(7, ids, 3, 2)
    b = uniforms(7, ids, 3, 2)
    assert np.array_equal(a, b)
    # any split of the particles sees the same numbers
    assert np.array_equal(uniforms(7, ids[500:], 3, 2), a[500:])
    assert np.all((a > 0) & (a < 1))


def test_keys_give_distinct_streams():
    ids = np.arange(1000)
    base = uniforms(7, ids, 3, 2)
    for other in (uniforms(8, ids, 3, 2), uniforms(7, ids, 4, 2), uniforms(7, ids, 3, 3)):
        assert not np.any(base == other)
        assert abs(np.corrcoef(base, other)[0, 1]) < 0.1


def test_uniformity():
    u = uniforms(11, np.arange(100_000), -1, 0)
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_event_stream_subset():
    s = EventStream(5, np.arange(10), np.arange(10) * 2)
    mask = np.arange(10) % 3 == 0
    assert np.array_equal(s.subset(mask).draw(4), s.draw(4)[mask])
    assert s.block(1, 3).shape == (10, 3)
