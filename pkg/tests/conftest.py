import numpy as np
import pytest

from dynsel import dataset as ds
from dynsel import harness as hx
from dynsel.metric import build_bank
from dynsel.model import FusionModel, ModelConfig
from dynsel.training import TrainConfig, train


@pytest.fixture(scope="session")
def toy_data():
    return ds.generate(hx.toy_spec())


@pytest.fixture(scope="session")
def toy_trained(toy_data):
    """Model + bank on the equal-relevance toy dataset (the training-sanity setup)."""
    model = FusionModel(ModelConfig(dims=tuple(toy_data.spec.dims), n_classes=4))
    result = train(model, toy_data.train, toy_data.val, TrainConfig(max_epochs=15))
    bank = build_bank(model, toy_data.train, "squared-euclidean")
    return model, bank, result


@pytest.fixture(scope="session")
def micro_data():
    spec = ds.DatasetSpec(
        2, (ds.ModalitySpec(3, 1.0), ds.ModalitySpec(2, 0.8)), n_train=60, n_val=20, n_test=30, seed=5
    )
    return ds.generate(spec)


@pytest.fixture(scope="session")
def micro_model(micro_data):
    cfg = ModelConfig(dims=(3, 2), n_classes=2, encoder_hidden=6, width=8, layers=1, heads=2, latent=4)
    model = FusionModel(cfg)
    train(model, micro_data.train, micro_data.val, TrainConfig(max_epochs=3, batch_size=32))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[1:])):
            terminalreporter.write_line(results[key])
