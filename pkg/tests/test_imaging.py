import numpy as np
import pytest

from docir_lab.imaging import (HELDOUT_PALETTE, TRAIN_PALETTE, Frame,
                               apply_mask, binary_mask, palettes_disjoint,
                               write_ppm, write_stack_ppm)


def random_scene(rng, h=12, w=12, n_ids=4):
    ids = rng.integers(0, n_ids + 1, size=(h, w))
    rgb = rng.random((h, w, 3))
    return rgb, ids


class TestBinaryMask:
    def test_direct_definition(self):
        ids = np.array([[0, 5], [5, 7]])
        np.testing.assert_array_equal(binary_mask(ids, {5}), [[0, 1], [1, 0]])

    def test_empty_group_is_zero_mask(self):
        ids = np.array([[0, 5], [5, 7]])
        np.testing.assert_array_equal(binary_mask(ids, set()), np.zeros((2, 2)))

    def test_all_nonzero_group_is_foreground(self):
        ids = np.array([[0, 3], [9, 3], [0, 9]])
        np.testing.assert_array_equal(binary_mask(ids, {3, 9}), (ids != 0).astype(np.uint8))

    def test_background_id_rejected(self):
        with pytest.raises(ValueError):
            binary_mask(np.zeros((2, 2), dtype=int), {0, 3})


class TestApplyMask:
    def test_all_ones_mask_is_identity(self):
        rng = np.random.default_rng(0)
        rgb, _ = random_scene(rng)
        stack = apply_mask(rgb, np.ones(rgb.shape[:2], dtype=np.uint8))
        np.testing.assert_array_equal(stack.rgb, np.moveaxis(rgb, -1, 0))
        np.testing.assert_array_equal(stack.mask, 1)

    def test_all_zeros_mask_is_white(self):
        rng = np.random.default_rng(1)
        rgb, _ = random_scene(rng)
        stack = apply_mask(rgb, np.zeros(rgb.shape[:2], dtype=np.uint8))
        np.testing.assert_array_equal(stack.rgb, 1.0)
        np.testing.assert_array_equal(stack.mask, 0)

    def test_white_object_disambiguated_by_mask_channel(self):
        rgb = np.ones((2, 2, 3))  # a pure-white object everywhere
        mask = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        stack = apply_mask(rgb, mask)
        # RGB identical everywhere (white in, white masking) ...
        np.testing.assert_array_equal(stack.rgb, 1.0)
        # ... but the mask channel still tells object from background
        np.testing.assert_array_equal(stack.mask, mask)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(np.zeros((3, 3, 3)), np.zeros((2, 3)))

    def test_remask_is_idempotent(self):
        rng = np.random.default_rng(2)
        rgb, ids = random_scene(rng)
        mask = binary_mask(ids, {1, 2})
        s1 = apply_mask(rgb, mask)
        s2 = apply_mask(np.moveaxis(s1.rgb, 0, -1), mask)
        np.testing.assert_array_equal(s1.channels, s2.channels)


class TestPartitionProperties:
    def test_disjoint_groups_partition_foreground(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            rgb, ids = random_scene(rng, n_ids=6)
            present = sorted(set(ids.ravel()) - {0})
            rng.shuffle(present)
            cut = len(present) // 2
            groups = [set(present[:cut]), set(present[cut:])]
            masks = [binary_mask(ids, g) for g in groups]
            total = sum(m.astype(int) for m in masks)
            assert total.max() <= 1  # pairwise disjoint
            np.testing.assert_array_equal(total, (ids != 0).astype(int))

    def test_overlay_reconstructs_foreground(self):
        rng = np.random.default_rng(4)
        rgb, ids = random_scene(rng, n_ids=5)
        groups = [{1, 2}, {3}, {4, 5}]
        stacks = [apply_mask(rgb, binary_mask(ids, g)) for g in groups]
        recon = np.zeros_like(rgb)
        for s in stacks:
            m = s.mask.astype(bool)
            recon[m] = np.moveaxis(s.rgb, 0, -1)[m]
        fg = ids != 0
        np.testing.assert_array_equal(recon[fg], rgb[fg])


class TestFrameAndPalettes:
    def test_frame_shape_validation(self):
        with pytest.raises(ValueError):
            Frame(np.zeros((4, 4, 3)), np.zeros((3, 4), dtype=int), "base")

    def test_frame_view_validation(self):
        with pytest.raises(ValueError):
            Frame(np.zeros((4, 4, 3)), np.zeros((4, 4), dtype=int), "overhead")

    def test_train_heldout_palettes_disjoint(self):
        assert palettes_disjoint(TRAIN_PALETTE, HELDOUT_PALETTE)


class TestPPMExport:
    def test_p6_header_and_payload(self, tmp_path):
        rgb = np.zeros((2, 3, 3))
        rgb[0, 0] = (1.0, 0.5, 0.0)
        path = tmp_path / "frame.ppm"
        write_ppm(path, rgb)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n3 2\n255\n")
        pixels = raw.split(b"255\n", 1)[1]
        assert len(pixels) == 2 * 3 * 3
        assert pixels[:3] == bytes([255, 128, 0])

    def test_stack_export(self, tmp_path):
        rng = np.random.default_rng(5)
        rgb, ids = random_scene(rng, h=4, w=4)
        stack = apply_mask(rgb, binary_mask(ids, {1}))
        write_stack_ppm(tmp_path / "stack.ppm", stack)
        assert (tmp_path / "stack.ppm").read_bytes().startswith(b"P6\n4 4\n255\n")
