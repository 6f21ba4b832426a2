import warnings

import numpy as np
import pytest

from partbilinear.core import FeatureMap
from partbilinear.errors import DimensionError, EmptyInputError
from partbilinear.viz import (
    normalized_descriptors,
    principal_projection,
    read_ppm,
    render_maps,
    viz_export,
)


def test_identical_descriptors_uniform(tmp_path):
    fmap = FeatureMap(np.tile([1.0, 2.0, 3.0, 4.0], (3, 2, 1)))
    with pytest.warns(UserWarning):
        paths = viz_export([fmap], tmp_path, ["flat"])
    img = read_ppm(paths[0])
    assert img.shape == (3, 2, 3)
    assert np.all(img == img[0, 0])


def test_rank_one_single_channel():
    # normalized descriptors alternate between two directions: one varying component
    data = np.zeros((4, 3, 3))
    data[..., 0] = 1.0
    data[::2, :, 1] = 1.0
    with pytest.warns(UserWarning):
        (img,) = render_maps([FeatureMap(data)])
    flat = img.reshape(-1, 3)
    assert set(np.unique(flat[:, 0])) == {0, 255}
    assert np.all(flat[:, 1:] == 128)


def test_reconstruction_matches_svd_oracle(rng):
    maps = [FeatureMap(rng.normal(size=(4, 5, 7))) for _ in range(3)]
    X = normalized_descriptors(maps)
    scores, comps, mean, n_valid = principal_projection(X)
    assert n_valid == 3
    # independent oracle: right singular vectors of the centered data
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    oracle = Xc @ Vt[:3].T @ Vt[:3]
    np.testing.assert_allclose(scores @ comps, oracle, atol=1e-6)
    np.testing.assert_allclose(np.abs(comps @ Vt[:3].T), np.eye(3), atol=1e-6)


def test_each_channel_spans_full_range(rng, tmp_path):
    maps = [FeatureMap(rng.normal(size=(3, 3, 5))) for _ in range(2)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        paths = viz_export(maps, tmp_path)
    imgs = [read_ppm(p) for p in paths]
    stacked = np.concatenate([i.reshape(-1, 3) for i in imgs])
    assert np.all(stacked.min(axis=0) == 0) and np.all(stacked.max(axis=0) == 255)
    assert [p.name for p in paths] == ["map0000.ppm", "map0001.ppm"]


def test_ppm_header(tmp_path, rng):
    (path,) = viz_export([FeatureMap(rng.normal(size=(2, 5, 4)))], tmp_path, ["x"])
    assert path.read_bytes().startswith(b"P6\n5 2\n255\n")


def test_too_few_descriptors():
    with pytest.raises(EmptyInputError):
        render_maps([FeatureMap(np.ones((1, 2, 3)))])


def test_mixed_channels(rng):
    with pytest.raises(DimensionError):
        render_maps([FeatureMap(rng.normal(size=(2, 2, 3))), FeatureMap(rng.normal(size=(2, 2, 4)))])
