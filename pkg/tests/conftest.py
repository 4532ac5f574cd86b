import numpy as np
import pytest

from rpmia.transform_models import ModelKind, apply

# generic parameter vectors for each family (a mild rotation/scale/shift)
PHI = {
    ModelKind.SIMILARITY2D: np.array([0.8, 0.5, 0.3, -0.2]),
    ModelKind.AFFINE2D: np.array([1.1, 0.2, -0.3, 0.9, 0.4, -0.1]),
    ModelKind.SCALE_TRANSLATE3D: np.array([1.2, 0.7, 0.9, 0.1, -0.4, 0.2]),
    ModelKind.ZROT_SCALE3D: np.array([0.6, -0.7, 1.3, 0.2, 0.1, -0.3]),
}


def random_pair(kind, n_x, n_y, seed=0, noise=0.05):
    """Model points and a scene whose first ``min(n_x, n_y)`` points are a
    noisy transform of the model."""
    kind = ModelKind.parse(kind)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_x, kind.n_d))
    Y = rng.normal(size=(n_y, kind.n_d))
    m = min(n_x, n_y)
    Y[:m] = apply(kind, PHI[kind], X[:m]) + noise * rng.normal(size=(m, kind.n_d))
    return X, Y


def random_matching(rng, n_x, n_y, k):
    rows = rng.choice(n_x, size=k, replace=False)
    cols = rng.choice(n_y, size=k, replace=False)
    return np.column_stack([rows, cols])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ALL_KINDS = list(ModelKind)
