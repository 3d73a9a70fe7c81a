import numpy as np
import pytest

from flimcl import _backend, sim


@pytest.fixture(params=["cython", "python"])
def kernels(request):
    """Both kernel implementations; the compiled one is skipped when unavailable."""
    if request.param == "cython":
        if _backend.BACKEND != "cython":
            pytest.skip("compiled kernels not built")
        return _backend.kernels
    return _backend.python_kernels


@pytest.fixture(scope="session")
def small_dataset():
    """Six patients, four classes, clean labels; features from the real extractor."""
    from flimcl import features

    cfg = sim.SimConfig(n_patients=6, n_margins=24, points_per_margin=(8, 12),
                        class_names=["a", "b", "c", "d"],
                        class_models=sim.ladder_class_models(4), heterogeneity=0.1, seed=3)
    manifest, waves = sim.synth_dataset(cfg)
    irf = sim.gaussian_irf(cfg.irf_fwhm, cfg.dt, cfg.n_samples)
    x = features.FeatureExtractor(irf, cfg.n_samples, cfg.dt).transform(waves)
    return manifest, x


def random_posteriors(rng, n, c):
    p = rng.dirichlet(np.full(c, 0.5), size=n)
    return p / p.sum(axis=1, keepdims=True)
