import numpy as np
import pytest

from fedkge.kg import partition_by_relation, split_federation
from fedkge.synthetic import SyntheticConfig, generate

TOY = SyntheticConfig(entities=150, relations=9, triples=1200, clusters=5, seed=3)


@pytest.fixture(scope="session")
def toy_store():
    return generate(TOY)


@pytest.fixture(scope="session")
def toy_spec(toy_store):
    return split_federation(partition_by_relation(toy_store, 3, seed=11), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_tsv(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path
