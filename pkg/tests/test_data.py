import hashlib

import numpy as np
import pytest
import torch
from PIL import Image

from difftok.data import ImageDataset, augment, load_folder, synth_corpus
from difftok.errors import ConfigurationError, ShapeError


def write_images(folder, specs):
    folder.mkdir(exist_ok=True)
    for name, size, color in specs:
        Image.new("RGB", size, color).save(folder / name)


class TestLoadFolder:
    def test_eval_split_center_crop_stable_order(self, tmp_path):
        write_images(tmp_path / "imgs", [(f"{i:02d}.png", (40, 40), (i * 20, 0, 0)) for i in range(10)])
        ds = load_folder(tmp_path / "imgs", 32, "eval")
        assert len(ds) == 10
        assert ds.images.shape == (10, 3, 32, 32)
        assert ds.ids == [f"{i:02d}.png" for i in range(10)]

    def test_non_square_shorter_side_resize(self, tmp_path):
        write_images(tmp_path / "imgs", [("wide.png", (100, 50), (10, 20, 30))])
        ds = load_folder(tmp_path / "imgs", 32, "eval")
        # 100x50 -> 64x32 -> center crop 32x32
        assert ds.images.shape == (1, 3, 32, 32)

    def test_same_path_same_order_and_bytes(self, tmp_path):
        write_images(tmp_path / "imgs", [(f"{c}.png", (40, 40), (0, ord(c), 0)) for c in "dbca"])
        a = load_folder(tmp_path / "imgs", 32, "eval")
        b = load_folder(tmp_path / "imgs", 32, "eval")
        assert a.ids == b.ids == ["a.png", "b.png", "c.png", "d.png"]
        assert torch.equal(a.images, b.images)

    def test_eval_stream_hash_run_invariant(self, tmp_path):
        write_images(tmp_path / "imgs", [(f"{i}.png", (48, 36), (i, i, i)) for i in range(4)])

        def stream_hash():
            ds = load_folder(tmp_path / "imgs", 32, "eval")
            return hashlib.sha256(ds.images.numpy().tobytes()).hexdigest()

        assert stream_hash() == stream_hash()

    def test_empty_folder_error(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        with pytest.raises(ConfigurationError):
            load_folder(tmp_path / "imgs", 32, "eval")

    def test_undecodable_skipped_with_warning(self, tmp_path):
        write_images(tmp_path / "imgs", [("ok.png", (40, 40), (1, 2, 3))])
        (tmp_path / "imgs" / "bad.png").write_bytes(b"not a png")
        with pytest.warns(UserWarning, match="bad.png"):
            ds = load_folder(tmp_path / "imgs", 32, "eval")
        assert ds.ids == ["ok.png"]

    def test_all_undecodable_error(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        (tmp_path / "imgs" / "bad.jpg").write_bytes(b"nope")
        with pytest.warns(UserWarning):
            with pytest.raises(ConfigurationError):
                load_folder(tmp_path / "imgs", 32, "eval")

    def test_train_split_deterministic_given_seed(self, tmp_path):
        write_images(tmp_path / "imgs", [("a.png", (64, 48), (5, 10, 15))])
        a = load_folder(tmp_path / "imgs", 32, "train", seed=3)
        b = load_folder(tmp_path / "imgs", 32, "train", seed=3)
        assert torch.equal(a.images, b.images)


class TestAugment:
    def test_identity_crop_on_target_size(self):
        img = synth_corpus("shapes", 1, 32, seed=0).images[0]
        g = torch.Generator().manual_seed(0)
        out = augment(img, g, 32)
        assert out.shape == img.shape

    def test_forced_flip_mirrors_exactly(self):
        img = torch.arange(3 * 32 * 32, dtype=torch.float32).reshape(3, 32, 32) / 2000 - 1
        for seed in range(50):
            g = torch.Generator().manual_seed(seed)
            out = augment(img, g, 32)
            if not torch.equal(out, img):
                assert torch.equal(out, img.flip(-1))
                break
        else:
            pytest.fail("no flip observed in 50 seeds")

    def test_too_small_image(self):
        with pytest.raises(ShapeError):
            augment(torch.zeros(3, 16, 16), torch.Generator(), 32)

    def test_flip_rate_monte_carlo(self):
        img = torch.zeros(3, 16, 16)
        img[0, 0, 0] = 1.0
        g = torch.Generator().manual_seed(7)
        flips = sum(1 for _ in range(10_000) if not torch.equal(augment(img, g, 16), img))
        assert 0.47 <= flips / 10_000 <= 0.53


class TestSynthCorpus:
    def test_bit_identical_given_seed(self):
        a = synth_corpus("glyphs", 8, 32, seed=5)
        b = synth_corpus("glyphs", 8, 32, seed=5)
        assert torch.equal(a.images, b.images)
        assert a.ids == b.ids

    def test_different_seed_differs(self):
        a = synth_corpus("shapes", 8, 32, seed=1)
        b = synth_corpus("shapes", 8, 32, seed=2)
        assert not torch.equal(a.images, b.images)

    def test_checkerboard_cells(self):
        ds = synth_corpus("checkerboard", 4, 32, seed=0, cell_size=4)
        img = ds.images[0].numpy()
        cells = img.reshape(3, 8, 4, 8, 4).mean(axis=(2, 4))
        # every cell is constant
        flat = img.reshape(3, 8, 4, 8, 4)
        assert np.allclose(flat, cells[:, :, None, :, None], atol=1e-6)
        # neighbors alternate
        assert not np.allclose(cells[:, :, :-1], cells[:, :, 1:], atol=1e-3)
        assert np.allclose(cells[:, :-2], cells[:, 2:], atol=1e-6)

    def test_shapes_label_histogram(self):
        ds = synth_corpus("shapes", 100, 32, seed=3, num_classes=2)
        counts = torch.bincount(ds.labels, minlength=2)
        # binomial(100, 0.5): 4-sigma bounds
        assert 30 <= int(counts[0]) <= 70

    @pytest.mark.parametrize("kind", ["glyphs", "checkerboard", "shapes", "gradients"])
    def test_range_and_shape(self, kind):
        ds = synth_corpus(kind, 4, 32, seed=0)
        assert ds.images.shape == (4, 3, 32, 32)
        assert float(ds.images.min()) >= -1.0 and float(ds.images.max()) <= 1.0

    def test_resolution_guard(self):
        with pytest.raises(ConfigurationError):
            synth_corpus("shapes", 4, 8, seed=0)

    def test_bad_kind_and_size(self):
        with pytest.raises(ConfigurationError):
            synth_corpus("noise", 4, 32)
        with pytest.raises(ConfigurationError):
            synth_corpus("shapes", 0, 32)

    def test_subset(self):
        ds = synth_corpus("shapes", 10, 32, seed=0)
        sub = ds.subset([3, 1])
        assert len(sub) == 2
        assert torch.equal(sub.images[0], ds.images[3])
        assert sub.ids == [ds.ids[3], ds.ids[1]]
