import numpy as np
import pytest

from lobavqa.corpus import SceneConfig, generate_corpus
from lobavqa.geometry import ANATOMIES, SceneAnnotation, rle_encode


def blank_scene(scene_id="x", size=16, diseases=(), regions=None):
    """Scene whose anatomies are given boolean grids (default: all empty)."""
    regions = regions or {}
    anatomies = {a: rle_encode(regions.get(a, np.zeros((size, size), bool))) for a in ANATOMIES}
    return SceneAnnotation(scene_id, np.zeros((size, size)), anatomies, list(diseases))


def rect(size, x0, y0, x1, y1):
    g = np.zeros((size, size), bool)
    g[y0:y1, x0:x1] = True
    return g


@pytest.fixture(scope="session")
def small_shard():
    return generate_corpus(SceneConfig(), 40, master_seed=5)
