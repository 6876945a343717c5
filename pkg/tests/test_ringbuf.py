import pytest
from hypothesis import given, settings, strategies as st

from tsor.ringbuf import RingBuffer


def test_capacity_must_be_power_of_two():
    with pytest.raises(ValueError):
        RingBuffer(1000)
    assert RingBuffer(1024).capacity == 1024


def test_full_and_empty_are_distinct():
    rb = RingBuffer(8)
    assert rb.is_empty() and rb.free_space == 8
    assert rb.produce(b"abcdefghij") == 8
    assert rb.available_data == 8 and rb.free_space == 0
    assert rb.produce(b"x") == 0
    assert rb.consume(3) == b"abc"
    assert rb.produce(b"xyz") == 3
    assert rb.consume(100) == b"defghxyz"
    assert rb.is_empty()


def test_wrapping_range_splits_in_two():
    rb = RingBuffer(16)
    assert rb.contiguous_regions(14, 5) == [(14, 2), (0, 3)]
    assert rb.contiguous_regions(16 * 7 + 3, 4) == [(3, 4)]
    with pytest.raises(IndexError):
        rb.contiguous_regions(0, 17)


def test_counters_run_past_capacity():
    rb = RingBuffer(4)
    for i in range(1000):
        assert rb.produce(bytes([i % 256, (i + 1) % 256])) == 2
        assert rb.consume(2) == bytes([i % 256, (i + 1) % 256])
    assert rb.head == rb.tail == 2000


def test_write_at_and_commit():
    rb = RingBuffer(8)
    rb.write_at(0, b"hi")
    assert rb.available_data == 0
    rb.commit(2)
    assert rb.consume(8) == b"hi"
    with pytest.raises(IndexError):
        rb.write_at(7, b"ab")
    with pytest.raises(OverflowError):
        rb.commit(9)


def test_peek_does_not_consume():
    rb = RingBuffer(8)
    rb.produce(b"123456")
    rb.consume(5)
    rb.produce(b"abcdef")
    views = rb.peek(rb.head, 7)
    assert [bytes(v) for v in views] == [b"6ab", b"cdef"]
    assert rb.available_data == 7
    rb.advance_head(4)
    assert rb.consume(10) == b"def"
    with pytest.raises(OverflowError):
        rb.advance_head(1)


ops = st.lists(st.one_of(
    st.tuples(st.just("put"), st.binary(max_size=40)),
    st.tuples(st.just("get"), st.integers(0, 40)),
), max_size=200)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([1, 2, 8, 32]), ops)
def test_matches_a_bytearray_model(cap, script):
    rb = RingBuffer(cap)
    model = bytearray()
    for op, arg in script:
        if op == "put":
            n = rb.produce(arg)
            assert n == min(len(arg), cap - len(model))
            model += arg[:n]
        else:
            got = rb.consume(arg)
            assert got == bytes(model[:arg])
            del model[:arg]
        assert rb.available_data == len(model)
        assert rb.free_space == cap - len(model)
