import math

import numpy as np
import pytest

from ditic.data import FAMILIES, MIXTURE, gen_dataset, read_dataset, to_uint8, write_dataset


def test_deterministic_and_bounded():
    a, ka = gen_dataset(5, 12, 32)
    b, kb = gen_dataset(5, 12, 32)
    assert np.array_equal(a, b) and ka == kb
    assert a.shape == (12, 3, 32, 32)
    assert np.isfinite(a).all() and a.min() >= 0 and a.max() <= 1


def test_errors():
    with pytest.raises(ValueError):
        gen_dataset(0, 0, 64)
    with pytest.raises(ValueError):
        gen_dataset(0, 3, 60)


def test_family_mixture_within_3_sigma():
    n = 1000
    _, keys = gen_dataset(2024, n, 8)
    fams = [k.split()[0] for k in keys]
    for fam, p in zip(FAMILIES, MIXTURE):
        count = fams.count(fam)
        assert abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p)), (fam, count)


def test_caption_keys_describe_family():
    _, keys = gen_dataset(1, 50, 16)
    assert all(k.split()[0] in FAMILIES for k in keys)
    assert len(set(keys)) > 1


def test_uint8_rounding():
    img = np.array([0.5 / 255, 1.5 / 255, 1.0, 2.0, -1.0]).reshape(1, 1, 5).repeat(3, 0)
    assert to_uint8(img)[0, :, 0].tolist() == [1, 2, 255, 255, 0]


def test_dataset_io_roundtrip(tmp_path):
    imgs, keys = gen_dataset(3, 4, 16)
    write_dataset(tmp_path, imgs, keys)
    names, back = read_dataset(tmp_path)
    assert len(names) == 4
    for a, b in zip(imgs, back):
        assert np.array_equal(to_uint8(a), to_uint8(b))
    lines = (tmp_path / "captions.tsv").read_text().splitlines()
    assert [l.split("\t")[1] for l in lines] == keys
