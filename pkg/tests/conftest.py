import numpy as np
import pytest

from srinet.geom import PointCloud, center_cloud


def random_centered_cloud(seed, n=50, scale=1.0):
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = rng.standard_normal((n, 3)) * scale
    cloud, _ = center_cloud(PointCloud(pts))
    return cloud


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240901))
