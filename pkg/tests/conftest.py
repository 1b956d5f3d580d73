import pytest

from divrank import backbone as bb
from divrank import data, distill


@pytest.fixture(scope="session")
def small_dataset():
    spec = data.SyntheticSpec(seed=17, num_users=8, num_requests=24,
                              catalog_size=60, num_categories=4,
                              candidates_per_request=25, latent_dim=8)
    return data.generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_config():
    return bb.TrainConfig(d=8, k=3, K_teacher=5, warm_epochs=1,
                          joint_epochs=2, batch_size=4, lr=0.2,
                          max_context_pool=32, seed=1).validate()


@pytest.fixture(scope="session")
def small_model_and_data(small_dataset, small_config):
    model = distill.CDMModel.from_dataset(small_dataset, small_config)
    return model, small_dataset


@pytest.fixture(scope="session")
def trained_small(small_dataset, small_config):
    model, history = distill.train(small_dataset, small_config)
    return model, history, small_dataset
