import numpy as np
import pytest

from priordet.encoder import (
    EMBED_DIM,
    FileWeightsEncoder,
    Patch,
    PATCH_SIZE,
    ToyProjectionEncoder,
    augment,
    crop_resize,
    flip_horizontal,
    make_encoder,
    read_manifest_blob,
    write_manifest_blob,
    _FEAT_DIM,
)
from priordet.errors import BackendError, CropError
from priordet.geometry import BoxXYXY


def block_image(size=256):
    """2x2 grid of distinct constant color blocks."""
    img = np.zeros((size, size, 3), dtype=np.float32)
    half = size // 2
    img[:half, :half] = [0.9, 0.1, 0.1]
    img[:half, half:] = [0.1, 0.9, 0.1]
    img[half:, :half] = [0.1, 0.1, 0.9]
    img[half:, half:] = [0.9, 0.9, 0.1]
    return img


class TestCropResize:
    def test_identity_crop(self):
        rng = np.random.default_rng(0)
        img = rng.random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32)
        patch = crop_resize(img, BoxXYXY(0, 0, 1, 1))
        np.testing.assert_allclose(patch.pixels, img, atol=1e-6)

    def test_constant_resize(self):
        img = np.full((256, 256, 3), 0.37, dtype=np.float32)
        patch = crop_resize(img, BoxXYXY(0, 0, 1, 1))
        np.testing.assert_allclose(patch.pixels, 0.37, atol=1e-6)

    def test_corner_quarter_block(self):
        img = block_image(256)
        patch = crop_resize(img, BoxXYXY(0, 0, 0.5, 0.5))
        expect = np.broadcast_to([0.9, 0.1, 0.1], patch.pixels.shape)
        np.testing.assert_allclose(patch.pixels, expect, atol=1e-6)

    def test_degenerate_box_expanded(self):
        img = block_image(64)
        patch = crop_resize(img, BoxXYXY(0.25, 0.25, 0.25, 0.25))
        assert patch.pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3)

    def test_out_of_frame_rejected(self):
        img = block_image(64)
        with pytest.raises(CropError):
            crop_resize(img, BoxXYXY(1.0, 1.0, 1.0, 1.0))


class TestAugment:
    def test_deterministic(self):
        rng = np.random.default_rng(1)
        patch = Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32))
        a = augment(patch, seed=42)
        b = augment(patch, seed=42)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_values_clamped(self):
        patch = Patch(np.ones((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.float32))
        for seed in range(20):
            out = augment(patch, seed)
            assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_flip_involution(self):
        rng = np.random.default_rng(2)
        patch = Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32))
        np.testing.assert_array_equal(
            flip_horizontal(flip_horizontal(patch)).pixels, patch.pixels
        )


class TestToyEncoder:
    def test_deterministic(self):
        enc = ToyProjectionEncoder(seed=0)
        rng = np.random.default_rng(3)
        patch = Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3)))
        np.testing.assert_array_equal(enc.encode(patch), enc.encode(patch))

    def test_unit_norm(self):
        enc = ToyProjectionEncoder(seed=0)
        rng = np.random.default_rng(4)
        for _ in range(10):
            z = enc.encode(Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3))))
            assert abs(np.linalg.norm(z) - 1.0) < 1e-6
        # all-black patch still yields a unit embedding (bias feature)
        z0 = enc.encode(Patch(np.zeros((PATCH_SIZE, PATCH_SIZE, 3))))
        assert abs(np.linalg.norm(z0) - 1.0) < 1e-6

    def test_distinct_patches_distinct_embeddings(self):
        enc = ToyProjectionEncoder(seed=0)
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = rng.random((PATCH_SIZE, PATCH_SIZE, 3))
            b = a.copy()
            r, c = rng.integers(0, PATCH_SIZE - 8, 2)
            b[r : r + 8, c : c + 8] = rng.random(3)
            za, zb = enc.encode(Patch(a)), enc.encode(Patch(b))
            assert np.abs(za - zb).sum() > 0

    def test_frozen_across_calls(self):
        enc = ToyProjectionEncoder(seed=7)
        before = enc.state_bytes()
        rng = np.random.default_rng(6)
        for _ in range(5):
            enc.encode(Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3))))
        assert enc.state_bytes() == before

    def test_batch_equals_singles(self):
        enc = ToyProjectionEncoder(seed=0)
        rng = np.random.default_rng(7)
        patches = [Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3))) for _ in range(6)]
        batch = enc.encode_batch(patches)
        for i, p in enumerate(patches):
            np.testing.assert_array_equal(batch[i], enc.encode(p))

    def test_output_dim(self):
        enc = ToyProjectionEncoder()
        assert enc.output_dim == EMBED_DIM == 512


class TestFileWeights:
    def test_roundtrip_matches_toy(self, tmp_path):
        toy = ToyProjectionEncoder(seed=11)
        prefix = str(tmp_path / "weights")
        write_manifest_blob(prefix, {"projection": toy._weight})
        enc = FileWeightsEncoder(prefix)
        rng = np.random.default_rng(8)
        patch = Patch(rng.random((PATCH_SIZE, PATCH_SIZE, 3)))
        # float32 storage perturbs the projection slightly
        np.testing.assert_allclose(enc.encode(patch), toy.encode(patch), atol=1e-5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BackendError):
            FileWeightsEncoder(str(tmp_path / "nope"))

    def test_dim_mismatch(self, tmp_path):
        prefix = str(tmp_path / "bad")
        write_manifest_blob(prefix, {"projection": np.zeros((4, 4))})
        with pytest.raises(BackendError):
            FileWeightsEncoder(prefix)

    def test_make_encoder_dispatch(self, tmp_path):
        assert make_encoder("toy_projection", seed=1).kind == "toy_projection"
        prefix = str(tmp_path / "w")
        write_manifest_blob(prefix, {"projection": np.ones((_FEAT_DIM, EMBED_DIM))})
        assert make_encoder("file_weights", weights_path=prefix).kind == "file_weights"
        with pytest.raises(BackendError):
            make_encoder("nope")


class TestManifestBlob:
    def test_roundtrip(self, tmp_path):
        tensors = {
            "a.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
            "b": np.array([1.5], dtype=np.float32),
        }
        prefix = str(tmp_path / "t")
        write_manifest_blob(prefix, tensors)
        loaded = read_manifest_blob(prefix)
        assert list(loaded) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(loaded[k], tensors[k])

    def test_truncated_blob_rejected(self, tmp_path):
        prefix = str(tmp_path / "t")
        write_manifest_blob(prefix, {"x": np.ones((4, 4), dtype=np.float32)})
        blob = open(prefix + ".bin", "rb").read()
        open(prefix + ".bin", "wb").write(blob[:-4])
        with pytest.raises(BackendError):
            read_manifest_blob(prefix)
