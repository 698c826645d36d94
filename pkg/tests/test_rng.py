import numpy as np

from randprod.rng import RngStream, derive_stream_id


def test_same_key_same_sequence():
    a, b = RngStream(11, 5), RngStream(11, 5)
    assert np.array_equal(a.random(100), b.random(100))
    assert np.array_equal(a.standard_normal(10), b.standard_normal(10))


def test_distinct_streams_differ():
    a, b = RngStream(11, 5), RngStream(11, 6)
    assert not np.array_equal(a.random(100), b.random(100))
    c = RngStream(12, 5)
    assert not np.array_equal(RngStream(11, 5).random(100), c.random(100))


def test_stream_ids_are_stable_and_distinct():
    assert derive_stream_id("run", 0) == derive_stream_id("run", 0)
    ids = {derive_stream_id(p, i) for p in ("run", "lyapunov", "xi") for i in range(50)}
    assert len(ids) == 150
    assert RngStream.for_purpose(3, "run", 2).stream_id == derive_stream_id("run", 2)


def test_fresh_rewinds_and_counter_advances():
    s = RngStream(7, 1)
    first = s.random(8)
    assert s.counter > 0
    again = s.fresh()
    assert again.counter == 0
    assert np.array_equal(again.random(8), first)


def test_split_is_deterministic_and_independent():
    s = RngStream(7, 1)
    c1, c2 = s.split("child", 0), s.split("child", 0)
    assert np.array_equal(c1.random(10), c2.random(10))
    assert not np.array_equal(s.split("child", 1).random(10), s.split("child", 0).random(10))


def test_uniform_moments():
    u = RngStream(99).random(200_000)
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1 / 12) < 0.002
