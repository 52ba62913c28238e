import filecmp
import os
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from centerseg import data
from centerseg.errors import ConfigError, DataError, DatasetIOError


@pytest.fixture(scope="module")
def small_spec():
    return data.DatasetSpec(num_classes=4, modes_per_class=3, height=32, width=32, n_train=6, n_val=2, n_test=2,
                            seed=5)


@pytest.fixture(scope="module")
def dataset(small_spec, tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return data.generate_dataset(small_spec, root)


def test_mode_count(dataset):
    assert len(dataset.modes) == 12
    assert len({(m.color, m.texture) for m in dataset.modes}) == 12


def test_layout(dataset):
    assert (dataset.root / "manifest.txt").exists()
    assert (dataset.root / "train" / "img_0.ppm").exists()
    assert (dataset.root / "test" / "lbl_1.pgm").exists()


def test_byte_identical(small_spec, dataset, tmp_path):
    again = data.generate_dataset(small_spec, tmp_path)
    for split in data.SPLITS:
        for (img, lbl) in again.files[split]:
            assert filecmp.cmp(tmp_path / img, dataset.root / img, shallow=False)
            assert filecmp.cmp(tmp_path / lbl, dataset.root / lbl, shallow=False)
    assert (tmp_path / "manifest.txt").read_text().replace(str(tmp_path), "") == \
        (dataset.root / "manifest.txt").read_text().replace(str(dataset.root), "")


def test_manifest_round_trip(dataset):
    back = data.read_manifest(dataset.root)
    assert back.spec == dataset.spec
    assert back.modes == dataset.modes
    assert back.files == dataset.files


def test_load_round_trip(small_spec, dataset):
    for split in data.SPLITS:
        for i in range(dataset.size(split)):
            image_u8, labels = data.generate_sample(small_spec, split, i)
            s = data.load_sample(dataset, split, i)
            np.testing.assert_array_equal(s.image, data.to_sample(image_u8, labels).image)
            np.testing.assert_array_equal(s.labels, labels)
            assert 0 <= s.image.min() and s.image.max() <= 1
            assert set(np.unique(s.labels)) <= set(range(4)) | {255}


def test_out_of_range_index(dataset):
    with pytest.raises(IndexError):
        data.load_sample(dataset, "train", 99)


def test_missing_file(small_spec, tmp_path):
    m = data.generate_dataset(replace(small_spec, n_train=1, n_val=0, n_test=0), tmp_path)
    os.remove(tmp_path / m.files["train"][0][0])
    with pytest.raises(DatasetIOError):
        data.load_sample(m, "train", 0)


def test_bad_label(small_spec, tmp_path):
    spec = data.DatasetSpec(height=8, width=8, n_train=1, n_val=0, n_test=0)
    m = data.generate_dataset(spec, tmp_path)
    Image.fromarray(np.full((8, 8), 7, np.uint8)).save(tmp_path / m.files["train"][0][1], format="PPM")
    with pytest.raises(DataError):
        data.load_sample(m, "train", 0)


def test_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    with pytest.raises(DatasetIOError):
        data.generate_dataset(data.DatasetSpec(height=8, width=8, n_train=1, n_val=0, n_test=0), blocker / "x")


def test_labels_match_regions(small_spec):
    for i in range(4):
        _, labels = data.generate_sample(small_spec, "train", i)
        regions, classes, _, _ = data.regenerate_regions(small_spec, "train", i)
        np.testing.assert_array_equal(labels, classes[regions])
        assert small_spec.min_regions <= len(classes) <= small_spec.max_regions


def test_single_mode_noiseless_is_constant_per_class():
    spec = data.DatasetSpec(num_classes=3, modes_per_class=1, height=16, width=16, noise=0.0)
    image, labels = data.generate_sample(spec, "train", 0)
    for k in np.unique(labels):
        assert len(np.unique(image[labels == k], axis=0)) == 1


def test_multimodal_classes():
    spec = data.DatasetSpec(num_classes=4, modes_per_class=3, height=32, width=32)
    by_class, by_mode = {}, {}
    for i in range(40):
        image, _ = data.generate_sample(spec, "train", i)
        regions, classes, modes, _ = data.regenerate_regions(spec, "train", i)
        for r in range(len(classes)):
            mask = regions == r
            if mask.sum() < 4:
                continue
            mean = image[mask].mean(axis=0) / 255
            by_class.setdefault(classes[r], []).append(mean)
            by_mode.setdefault((classes[r], modes[r]), []).append(mean)
    within_class = np.mean([np.var(np.stack(v), axis=0).sum() for v in by_class.values()])
    within_mode = np.mean([np.var(np.stack(v), axis=0).sum() for v in by_mode.values() if len(v) > 1])
    assert within_class >= 4 * within_mode


def test_ignore_boundary():
    spec = data.DatasetSpec(height=16, width=16, ignore_boundary=True)
    _, labels = data.generate_sample(spec, "train", 0)
    assert (labels == 255).any()


@pytest.mark.parametrize("kw", [{"num_classes": 1}, {"modes_per_class": 0}, {"height": 30}, {"noise": -1.0}])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        data.DatasetSpec(**kw)


class TestRender:
    def test_uniform(self):
        rgb = data.render_prediction(np.full((3, 3), 1))
        assert len(np.unique(rgb.reshape(-1, 3), axis=0)) == 1

    def test_checkerboard(self):
        lab = np.indices((4, 4)).sum(axis=0) % 2
        rgb = data.render_prediction(lab, palette=[(0, 0, 0), (255, 255, 255)])
        np.testing.assert_array_equal(rgb[..., 0], lab * 255)

    def test_deterministic_bytes(self, tmp_path):
        lab = np.random.default_rng(0).integers(0, 4, (8, 8))
        data.render_prediction(lab, path=tmp_path / "a.png")
        data.render_prediction(lab, path=tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "a.png")), data.render_prediction(lab))

    def test_short_palette(self):
        with pytest.raises(ConfigError):
            data.render_prediction(np.array([[0, 2]]), palette=[(0, 0, 0), (1, 1, 1)])

    def test_label_map_file(self, tmp_path):
        lab = np.array([[0, 3], [255, 1]])
        data.save_label_map(lab, tmp_path / "l.pgm")
        np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "l.pgm")), lab)
