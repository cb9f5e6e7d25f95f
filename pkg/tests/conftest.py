import pytest

from driftadapt import backend


@pytest.fixture(params=backend.available_backends())
def any_backend(request):
    """Run a test once per available kernel backend."""
    prev = backend.active()
    backend.use(request.param)
    yield request.param
    backend.use(prev)


@pytest.fixture
def smoke_suite():
    from driftadapt.data import SyntheticSuiteConfig, generate_synthetic_suite

    cfg = SyntheticSuiteConfig(
        n_classes=5, dim=8, class_separation=3.0, samples_per_domain=96,
        n_domains=3, severity=5, seed=11, batch_size=32, source_samples_per_class=40,
    )
    return generate_synthetic_suite(cfg)
