import pytest

from pva_inpaint.dataset import BuilderConfig, build_dataset
from pva_inpaint.evaluator import train_recognizer
from pva_inpaint.trainer import DatasetView


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "ds"
    build_dataset(BuilderConfig(n_identities=16, n_renders=6, seed=123), str(out))
    return str(out)


@pytest.fixture(scope="session")
def data(small_ds):
    return DatasetView(small_ds)


@pytest.fixture(scope="session")
def rec_a(data):
    return train_recognizer("encoder_A", data, seed=11)


@pytest.fixture(scope="session")
def rec_b(data):
    return train_recognizer("eval_B", data, seed=22)
