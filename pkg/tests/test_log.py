import itertools
import os
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enrichstream.log import (
    INDEX_FILE,
    SEGMENT_FILE,
    PartitionedLog,
    PartitionOutOfRange,
    TopicExistsError,
    UnknownTopicError,
)
from enrichstream.model import partition_for

import properties

# the 10^4-case runs live in the acceptance suite
HYPOTHESIS_CASES = 1_000


@pytest.fixture
def log(tmp_path):
    with PartitionedLog(tmp_path / "log") as lg:
        yield lg


def test_create_topic_with_four_partitions(log):
    t = log.create_topic("measurements", 4)
    assert t.partitions == 4
    assert [log.end_offset(t, p) for p in range(4)] == [0, 0, 0, 0]
    for p in range(4):
        assert (t.path / str(p) / SEGMENT_FILE).exists()
        assert (t.path / str(p) / INDEX_FILE).exists()


def test_duplicate_topic_rejected(log):
    log.create_topic("measurements", 4)
    with pytest.raises(TopicExistsError):
        log.create_topic("measurements", 4)


def test_single_partition_topic(log):
    t = log.create_topic("single-queue", 1)
    offsets = [log.append(t, f"dev-{i}", b"x") for i in range(20)]
    assert {o.partition for o in offsets} == {0}
    assert [o.offset for o in offsets] == list(range(20))


@pytest.mark.parametrize("name", ["", "a/b", ".hidden"])
def test_invalid_topic_names(log, name):
    with pytest.raises(ValueError):
        log.create_topic(name, 1)


def test_unknown_topic(log):
    with pytest.raises(UnknownTopicError):
        log.topic("nope")


def test_first_append_gets_offset_zero(log):
    t = log.create_topic("t", 3)
    off = log.append(t, "k", b"payload")
    assert off.offset == 0
    assert off.partition == partition_for("k", 3)


def test_same_key_appends_are_consecutive(log):
    t = log.create_topic("t", 4)
    for _ in range(5):
        log.append(t, "other", b"")
    a = log.append(t, "k", b"1")
    b = log.append(t, "k", b"2")
    assert a.partition == b.partition
    assert b.offset == a.offset + 1


def test_count_conservation(log):
    t = log.create_topic("t", 4)
    for i in range(10_000):
        log.append(t, f"device-{i % 997}", i.to_bytes(4, "little"))
    log.flush()
    assert sum(log.end_offset(t, p) for p in range(4)) == 10_000
    assert sum(log.flushed_end_offset(t, p) for p in range(4)) == 10_000


def test_read_at_end_is_empty(log):
    t = log.create_topic("t", 1)
    assert log.read(t, 0, 0, 10) == []
    log.append(t, "k", b"a")
    log.flush()
    assert log.read(t, 0, 1, 10) == []
    assert log.read(t, 0, 50, 10) == []


def test_read_returns_appends_in_order(log):
    t = log.create_topic("t", 1)
    for p in (b"one", b"two", b"three"):
        log.append(t, "k", p)
    log.flush()
    recs = log.read(t, 0, 0, 10)
    assert [r.payload for r in recs] == [b"one", b"two", b"three"]
    assert [r.offset for r in recs] == [0, 1, 2]
    assert all(r.key == b"k" for r in recs)


def test_read_rejects_bad_partition_and_offset(log):
    t = log.create_topic("t", 2)
    with pytest.raises(PartitionOutOfRange):
        log.read(t, 2, 0, 1)
    with pytest.raises(PartitionOutOfRange):
        log.end_offset(t, -1)
    with pytest.raises(ValueError):
        log.read(t, 0, -1, 1)


def test_end_offset_unchanged_by_reads(log):
    t = log.create_topic("t", 1)
    for i in range(7):
        log.append(t, "k", bytes([i]))
    log.flush()
    before = log.end_offset(t, 0)
    for start in range(9):
        log.read(t, 0, start, 3)
    assert log.end_offset(t, 0) == before == 7


def test_append_time_never_decreases(log):
    t = log.create_topic("t", 1)
    log.append(t, "k", b"a", append_time=500)
    log.append(t, "k", b"b", append_time=400)
    log.flush()
    assert [r.append_time for r in log.read(t, 0, 0, 5)] == [500, 500]


def test_group_flush_after_record_limit(tmp_path):
    with PartitionedLog(tmp_path, flush_records=10, flush_interval_ms=60_000) as lg:
        t = lg.create_topic("t", 1)
        for i in range(9):
            lg.append(t, "k", b"x")
        assert lg.flushed_end_offset(t, 0) == 0
        assert lg.end_offset(t, 0) == 9
        lg.append(t, "k", b"x")
        assert lg.flushed_end_offset(t, 0) == 10


def test_reread_after_restart_is_byte_identical(tmp_path):
    with PartitionedLog(tmp_path) as lg:
        t = lg.create_topic("t", 3)
        for i in range(300):
            lg.append(t, f"d{i % 13}", os.urandom(i % 50), append_time=1000 + i)
        lg.flush()
        before = [lg.read(t, p, 0, 1000) for p in range(3)]
    with PartitionedLog(tmp_path) as lg:
        after = [lg.read("t", p, 0, 1000) for p in range(3)]
    assert before == after
    assert sum(len(x) for x in after) == 300


def test_durable_append_survives_crash(tmp_path):
    lg = PartitionedLog(tmp_path, flush_records=1000, flush_interval_ms=60_000)
    t = lg.create_topic("t", 1)
    lg.append(t, "k", b"a")
    acked = lg.append(t, "k", b"b", durable=True)
    lg.append(t, "k", b"lost")
    lg.abandon()
    with PartitionedLog(tmp_path) as lg:
        recs = lg.read("t", 0, 0, 10)
    assert [r.payload for r in recs] == [b"a", b"b"]
    assert recs[-1].offset == acked.offset


@pytest.mark.parametrize("chop", [1, 5, 9])
def test_torn_tail_truncated_on_open(tmp_path, chop):
    with PartitionedLog(tmp_path) as lg:
        t = lg.create_topic("t", 1)
        for i in range(5):
            lg.append(t, "k", b"record-%d" % i)
    seg = tmp_path / "t" / "0" / SEGMENT_FILE
    size = seg.stat().st_size
    os.truncate(seg, size - chop)
    with PartitionedLog(tmp_path) as lg:
        recs = lg.read("t", 0, 0, 10)
        assert [r.payload for r in recs] == [b"record-%d" % i for i in range(4)]
        assert lg.end_offset("t", 0) == 4
        assert lg.append("t", "k", b"next").offset == 4
    with PartitionedLog(tmp_path) as lg:
        assert [r.payload for r in lg.read("t", 0, 3, 10)] == [b"record-3", b"next"]


def test_garbage_tail_truncated_on_open(tmp_path):
    with PartitionedLog(tmp_path) as lg:
        t = lg.create_topic("t", 1)
        for i in range(3):
            lg.append(t, "k", b"r%d" % i)
    with open(tmp_path / "t" / "0" / SEGMENT_FILE, "ab") as fh:
        fh.write(b"\x10\x00\x00\x00garbage-garbage")
    with open(tmp_path / "t" / "0" / INDEX_FILE, "ab") as fh:
        fh.write(b"\x00" * 5)
    with PartitionedLog(tmp_path) as lg:
        assert [r.payload for r in lg.read("t", 0, 0, 10)] == [b"r0", b"r1", b"r2"]


def test_concurrent_appenders(tmp_path):
    with PartitionedLog(tmp_path) as lg:
        t = lg.create_topic("t", 2)

        def work(n):
            for i in range(500):
                lg.append(t, f"w{n}", b"%d:%d" % (n, i))

        threads = [threading.Thread(target=work, args=(n,)) for n in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        lg.flush()
        recs = list(itertools.chain.from_iterable(lg.read(t, p, 0, 5000) for p in range(2)))
    assert len(recs) == 2000
    for n in range(4):
        mine = [int(r.payload.split(b":")[1]) for r in recs if r.payload.startswith(b"%d:" % n)]
        assert mine == list(range(500))


# -- properties ------------------------------------------------------------------

appends = st.lists(
    st.tuples(st.sampled_from(properties.KEYS), st.binary(max_size=24), st.booleans()),
    max_size=12,
)


@settings(max_examples=HYPOTHESIS_CASES)
@given(st.integers(1, 3), appends, st.tuples(st.integers(0, 2), st.integers(0, 13), st.integers(0, 13)))
def test_replayability_property(partitions, ops, pick):
    properties.check_replay(partitions, ops, pick)


@settings(max_examples=HYPOTHESIS_CASES)
@given(st.integers(1, 3), appends)
def test_durability_property(partitions, ops):
    properties.check_durability(partitions, ops)
