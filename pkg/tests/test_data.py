import numpy as np
import pytest

from pani.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from pani.data import (IMAGES_MAGIC, LABELS_MAGIC, class_templates, encode_idx, generate_synthetic, load_idx,
                       parse_idx, save_idx, split_ssl)
from pani.errors import ConfigError, FormatError, TruncatedFileError

GOLDEN_HEADER = bytes.fromhex("00000803 00000002 0000001C 0000001C".replace(" ", ""))

# every magic byte flipped four different ways
CORRUPTIONS = [(pos, mask) for pos in range(4) for mask in (0x01, 0x02, 0x80, 0xFF)]


def idx_blob(array):
    return encode_idx(np.asarray(array, dtype=np.uint8))


class TestIdx:
    def test_golden_header(self):
        raw = GOLDEN_HEADER + bytes(2 * 28 * 28)
        assert parse_idx(raw, IMAGES_MAGIC).shape == (2, 28, 28)

    def test_encoder_header(self):
        assert idx_blob(np.zeros((2, 28, 28)))[:16] == GOLDEN_HEADER

    def test_pixel_scaling(self, tmp_path):
        save_idx(tmp_path / "img", np.array([[[255, 0], [51, 1]]], dtype=np.uint8))
        save_idx(tmp_path / "lab", np.array([4], dtype=np.uint8))
        ds = load_idx(tmp_path / "img", tmp_path / "lab")
        assert ds.images.shape == (1, 1, 2, 2)
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 0, 1, 0] == 0.2
        assert ds.labels.tolist() == [4]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(5, 7, 6), dtype=np.uint8)
        labels = rng.integers(0, 10, size=5, dtype=np.uint8)
        save_idx(tmp_path / "i", images)
        save_idx(tmp_path / "l", labels)
        ds = load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(np.rint(ds.images[:, 0] * 255).astype(np.uint8), images)
        np.testing.assert_array_equal(ds.labels, labels)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        np.testing.assert_array_equal(parse_idx(idx_blob(images), IMAGES_MAGIC), images)

    @pytest.mark.parametrize("pos,mask", CORRUPTIONS)
    def test_corrupted_magic(self, pos, mask):
        raw = bytearray(idx_blob(np.zeros((1, 2, 2))))
        raw[pos] ^= mask
        with pytest.raises(FormatError, match=f"byte offset {pos}"):
            parse_idx(bytes(raw), IMAGES_MAGIC)

    def test_label_magic_on_image_file(self):
        with pytest.raises(FormatError, match="byte offset 3"):
            parse_idx(idx_blob(np.zeros((1, 2, 2))), LABELS_MAGIC)

    @pytest.mark.parametrize("cut", [2, 10, 16 + 7])
    def test_truncated(self, cut):
        raw = idx_blob(np.zeros((2, 2, 2)))
        with pytest.raises(TruncatedFileError):
            parse_idx(raw[:cut], IMAGES_MAGIC)

    def test_writer_rejects_non_bytes(self):
        with pytest.raises(FormatError):
            encode_idx(np.zeros(3))


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(4, 10, (1, 8, 8), 1.0, np.random.default_rng(3))
        b = generate_synthetic(4, 10, (1, 8, 8), 1.0, np.random.default_rng(3))
        assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_zero_separation_identical_templates(self):
        t = class_templates(5, (1, 8, 8), 0.0, np.random.default_rng(0))
        assert np.all(t == t[0])

    def test_range_and_counts(self):
        ds = generate_synthetic(3, 20, (2, 4, 4), 2.0, np.random.default_rng(1))
        assert ds.images.shape == (60, 2, 4, 4)
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert np.bincount(ds.labels).tolist() == [20, 20, 20]

    def test_nearest_template_oracle(self):
        rng = np.random.default_rng(2)
        ds = generate_synthetic(10, 100, (1, 16, 16), 5.0, rng)
        templates = class_templates(10, (1, 16, 16), 5.0, np.random.default_rng(2))
        dist = ((ds.images[:, None] - templates[None]) ** 2).sum(axis=(2, 3, 4))
        err = np.mean(dist.argmin(axis=1) != ds.labels)
        assert err < 0.05

    def test_negative_separation(self):
        with pytest.raises(ConfigError):
            generate_synthetic(2, 2, (1, 2, 2), -1.0, np.random.default_rng(0))


class TestSplit:
    def dataset(self, per_class=30):
        return generate_synthetic(10, per_class, (1, 4, 4), 1.0, np.random.default_rng(0))

    def test_stratified(self):
        ds = self.dataset()
        split = split_ssl(ds, 100, 50, np.random.default_rng(1))
        assert np.bincount(ds.labels[split.labeled], minlength=10).tolist() == [10] * 10

    def test_remainder(self):
        ds = self.dataset()
        split = split_ssl(ds, 23, 0, np.random.default_rng(1))
        counts = np.bincount(ds.labels[split.labeled], minlength=10)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 23

    def test_disjoint_partition(self):
        ds = self.dataset()
        split = split_ssl(ds, 100, 50, np.random.default_rng(2))
        sets = [set(split.labeled.tolist()), set(split.unlabeled.tolist()), set(split.test.tolist())]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert sets[0] | sets[1] | sets[2] == set(range(len(ds)))

    def test_deterministic(self):
        ds = self.dataset()
        a = split_ssl(ds, 40, 30, np.random.default_rng(3))
        b = split_ssl(ds, 40, 30, np.random.default_rng(3))
        assert all(np.array_equal(x, y) for x, y in zip((a.labeled, a.unlabeled, a.test),
                                                        (b.labeled, b.unlabeled, b.test)))

    def test_unlabeled_cap(self):
        split = split_ssl(self.dataset(), 20, 10, np.random.default_rng(4), n_unlabeled=15)
        assert len(split.unlabeled) == 15

    @pytest.mark.parametrize("n_labeled,n_test", [(250, 60), (200, 1), (210, 0)])
    def test_insufficient(self, n_labeled, n_test):
        with pytest.raises(ConfigError):
            split_ssl(self.dataset(20), n_labeled, n_test, np.random.default_rng(0))


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"conv1.w": rng.normal(size=(2, 1, 3, 3)), "b": rng.normal(size=4), "s": np.array(1.5)}
        save_checkpoint(tmp_path / "c.pani", params)
        back = load_checkpoint(tmp_path / "c.pani")
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes() and back[k].shape == params[k].shape

    def test_layout(self):
        raw = encode_checkpoint({"ab": np.array([1.0, 2.0])})
        assert raw[:4] == b"PANI"
        assert raw[4:8] == (1).to_bytes(4, "little")
        assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:14] == b"ab"
        assert raw[14:18] == (1).to_bytes(4, "little") and raw[18:26] == (2).to_bytes(8, "little")
        np.testing.assert_array_equal(np.frombuffer(raw[26:], "<f8"), [1.0, 2.0])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"PANX" + bytes(4))

    def test_truncated(self):
        raw = encode_checkpoint({"w": np.ones(3)})
        with pytest.raises(TruncatedFileError):
            decode_checkpoint(raw[:-1])
