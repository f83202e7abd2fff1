"""Shared small-scale models for the module tests: a two-blob dataset with
a preprocessor, black-box, guidance classifier, and a compact denoiser.
Session-scoped so the training cost is paid once."""

import pytest

from cfnids import classifier, data, diffusion
from cfnids.synthetic import two_blob_dataset


@pytest.fixture(scope="session")
def blob_world():
    ds = two_blob_dataset(3000, seed=0)
    train, test, pool = data.split_and_pool(ds, 0.2, 30, seed=0)
    pp = data.fit_preprocessor(train)
    return {"dataset": ds, "train": train, "test": test, "pool": pool, "pp": pp}


@pytest.fixture(scope="session")
def blackbox(blob_world):
    return classifier.train_blackbox(
        blob_world["train"], blob_world["pp"],
        classifier.TrainConfig(hidden=(32, 16), epochs=30), seed=1,
    )


@pytest.fixture(scope="session")
def schedule():
    return diffusion.scaled_schedule(200)


@pytest.fixture(scope="session")
def denoiser(blob_world, schedule):
    return diffusion.train_denoiser(
        blob_world["train"], blob_world["pp"], schedule,
        diffusion.DenoiserConfig(hidden=(128, 128), epochs=150), seed=2,
    )


@pytest.fixture(scope="session")
def guidance(blob_world, schedule):
    return classifier.train_guidance(
        schedule, blob_world["train"], blob_world["pp"],
        classifier.TrainConfig(hidden=(64, 32), epochs=60), seed=3,
    )
