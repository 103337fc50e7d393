import numpy as np
import pytest

from psoctseg.phantom import PhantomConfig, generate, generate_dataset


@pytest.fixture(scope="session")
def phantom_64():
    """One deterministic 64x128 phantom (image, labels, annotation)."""
    return generate(PhantomConfig(seed=1234))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Tiny labeled dataset: 24 records (6 patients) on a 32x64 grid."""
    out = tmp_path_factory.mktemp("ds") / "phantoms"
    generate_dataset(out, 24, seed=11, r_samples=32, a_lines=64, noise_level=0.8)
    return out


def random_probmap(rng: np.random.Generator, r: int = 64, a: int = 128) -> np.ndarray:
    return rng.dirichlet(np.ones(6), size=(r, a)).astype(np.float32)
