import numpy as np
import pytest
import torch

from style3d.mvdiff.backend import ToyBackend


@pytest.fixture(scope="session")
def toy_backend():
    return ToyBackend(view_resolution=32, seed=0)


@pytest.fixture(scope="session")
def zero_backend():
    return ToyBackend(view_resolution=32, seed=0, noise_net="zero")


def _checker(rng, res, palette):
    img = np.zeros((res, res, 3), dtype=np.uint8)
    block = max(res // 8, 1)
    for i in range(0, res, block):
        for j in range(0, res, block):
            img[i : i + block, j : j + block] = palette[rng.integers(len(palette))]
    return img


@pytest.fixture(scope="session")
def content_array():
    rng = np.random.default_rng(11)
    return _checker(rng, 32, [(200, 60, 40), (40, 80, 200), (230, 230, 230)])


@pytest.fixture(scope="session")
def style_array():
    rng = np.random.default_rng(22)
    return _checker(rng, 32, [(250, 210, 40), (30, 30, 30), (90, 190, 90)])


@pytest.fixture()
def image_pair(tmp_path, content_array, style_array):
    from PIL import Image

    c = tmp_path / "content.png"
    s = tmp_path / "style.png"
    Image.fromarray(content_array).save(c)
    Image.fromarray(style_array).save(s)
    return str(c), str(s)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    yield
