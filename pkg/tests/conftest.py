import pytest

import fredmc as fm


@pytest.fixture(scope="session")
def const_spec():
    return fm.fixture_constant_half()


@pytest.fixture(scope="session")
def ts_spec():
    return fm.fixture_ts()


@pytest.fixture(scope="session")
def gauss_spec():
    return fm.fixture_gauss()


@pytest.fixture(scope="session")
def const_pnt(const_spec):
    return fm.power_norms(const_spec, m_max=10)


@pytest.fixture(scope="session")
def ts_pnt(ts_spec):
    return fm.power_norms(ts_spec, m_max=12)


@pytest.fixture(scope="session")
def gauss_pnt(gauss_spec):
    return fm.power_norms(gauss_spec, m_max=12)
