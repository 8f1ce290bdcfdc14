import pytest
import torch

from advdetect.data import generate_synthetic_dataset
from advdetect.detectors import DetectorConfig, train_toy_detector

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_train_set():
    return generate_synthetic_dataset(150, 3, seed=1, split="train")


@pytest.fixture(scope="session")
def small_val_set():
    return generate_synthetic_dataset(30, 3, seed=2, split="val")


@pytest.fixture(scope="session")
def trained_pair(small_train_set, small_val_set):
    """Proposal and regression detectors sharing one backbone."""
    cfg = DetectorConfig(epochs=25, eval_every=4, seed=0)
    proposal = train_toy_detector("proposal", small_train_set, small_val_set, cfg)
    regression = train_toy_detector(
        "regression", small_train_set, small_val_set, cfg, backbone=proposal.backbone
    )
    return proposal, regression


@pytest.fixture(scope="session")
def proposal_detector(trained_pair):
    return trained_pair[0]


@pytest.fixture(scope="session")
def regression_detector(trained_pair):
    return trained_pair[1]
