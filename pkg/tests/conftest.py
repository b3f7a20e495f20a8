from __future__ import annotations

import string

import pytest
from hypothesis import strategies as st

from fabmon.core import MetricSample, ResourcePath, SimClock

EPOCH_MS = 1_600_000_000_000

_FIRST = string.ascii_lowercase + string.digits
_REST = _FIRST + "._-"


@pytest.fixture
def clock() -> SimClock:
    return SimClock(EPOCH_MS)


def make_sample(path="bnl/farm/n1", metric="cpu.load1", ts=EPOCH_MS, value=0.5, ttl=60):
    return MetricSample(ResourcePath.parse(path), metric, ts, value, ttl)


# -- hypothesis strategies ---------------------------------------------------

def tokens(max_size: int = 12) -> st.SearchStrategy[str]:
    return st.builds(
        lambda first, rest: first + rest,
        st.sampled_from(_FIRST),
        st.text(alphabet=_REST, max_size=max_size - 1),
    )


def paths() -> st.SearchStrategy[ResourcePath]:
    return st.builds(
        lambda segs: ResourcePath(tuple(segs)),
        st.lists(tokens(), min_size=1, max_size=8),
    )


def sample_values() -> st.SearchStrategy:
    return st.one_of(
        st.integers(min_value=-(2**53), max_value=2**53),
        st.floats(allow_nan=False, allow_infinity=False, width=64),
        st.text(max_size=40),
    )


def samples() -> st.SearchStrategy[MetricSample]:
    return st.builds(
        MetricSample,
        path=paths(),
        metric=tokens(),
        timestamp=st.integers(min_value=1, max_value=2**53),
        value=sample_values(),
        ttl=st.integers(min_value=0, max_value=10**6),
    )
