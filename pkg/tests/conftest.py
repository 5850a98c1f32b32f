import numpy as np
import pytest
from hypothesis import settings, strategies as st

from capture_mse.tables import StratifiedTable

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

counts = st.integers(min_value=0, max_value=500)
positive = st.integers(min_value=1, max_value=500)


@st.composite
def dual_tables(draw, min_strata=1, max_strata=6, n11_positive=False, all_positive=False):
    r = draw(st.integers(min_strata, max_strata))
    first = positive if (n11_positive or all_positive) else counts
    other = positive if all_positive else counts
    rows = [(draw(first), draw(other), draw(other)) for _ in range(r)]
    return StratifiedTable.dual(rows)


@st.composite
def triple_tables(draw, min_strata=1, max_strata=4, all_positive=True):
    r = draw(st.integers(min_strata, max_strata))
    cell = st.integers(1, 300) if all_positive else st.integers(0, 300)
    return StratifiedTable.triple([tuple(draw(cell) for _ in range(7)) for _ in range(r)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
