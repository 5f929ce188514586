import pytest

from multilm import autograd as ag


@pytest.fixture(autouse=True)
def fresh_graph():
    # a test that builds a graph without calling backward must not leak it
    ag.discard_graph()
    yield
    ag.discard_graph()
