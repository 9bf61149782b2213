import numpy as np
import pytest

from nonmarkov_q.oracle import build_joint_chain
from nonmarkov_q.presets import get_preset


@pytest.fixture(scope="session")
def presets():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = get_preset(name)
        return cache[name]

    return get


@pytest.fixture(scope="session")
def oracles(presets):
    cache = {}

    def get(name):
        if name not in cache:
            p = presets(name)
            cache[name] = build_joint_chain(p.env, p.rcass, p.policy)
        return cache[name]

    return get
