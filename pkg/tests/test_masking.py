import numpy as np
import pytest

from fusionlab.core.errors import MaskError
from fusionlab.core.masking import (GridParams, Mask, MaskKind, MaskPolicy, SceneInputs, apply_complementary,
                                    apply_policy, curriculum_prob, gridmask, make_masker, point_pixels,
                                    random_mask, reconcile_visibility, visible_fraction)
from fusionlab.core.scenesim import SimConfig, generate_scene
from fusionlab.core.types import Box2D

from conftest import axis_camera

GRID = GridParams(unit_range=(8, 16), keep_ratio=0.5)


def cloud(rng, n=400):
    xyz = np.column_stack([rng.uniform(-8, 8, n), rng.uniform(-8, 8, n), rng.uniform(-3, 25, n)])
    return np.column_stack([xyz, rng.uniform(0, 1, n)])


class TestGridMask:
    def test_deterministic_binary(self):
        a, b = gridmask(48, 80, GRID, 3), gridmask(48, 80, GRID, 3)
        assert np.array_equal(a.grid, b.grid)
        assert a.shape == (48, 80)
        assert set(np.unique(a.grid)) <= {0, 1}
        assert 0.0 < a.masked_fraction < 1.0

    def test_random_mask_shape(self):
        m = random_mask(48, 80, GRID, 3)
        assert m.shape == (48, 80)

    def test_rejects_empty_image(self):
        with pytest.raises(MaskError):
            gridmask(0, 10, GRID, 1)

    def test_rejects_bad_keep_ratio(self):
        with pytest.raises(MaskError):
            gridmask(10, 10, GridParams(keep_ratio=1.0), 1)

    def test_mask_must_be_binary(self):
        with pytest.raises(MaskError):
            Mask(np.full((2, 2), 2))

    def test_masked_fraction_near_half(self):
        params = GridParams(unit_range=(32, 32), keep_ratio=0.5)
        fractions = [gridmask(128, 128, params, seed).masked_fraction for seed in range(100)]
        assert np.mean(fractions) == pytest.approx(0.5, abs=0.05)


class TestCurriculum:
    def test_endpoints_exact(self):
        assert curriculum_prob(0, 100, 0.7) == 0.0
        assert curriculum_prob(100, 100, 0.7) == 0.7

    def test_linear(self):
        for step in range(101):
            assert curriculum_prob(step, 100, 0.7) == pytest.approx(0.7 * step / 100, abs=1e-12)

    @pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
    def test_rejects_bad_steps(self, step, total):
        with pytest.raises(MaskError):
            curriculum_prob(step, total, 0.7)


class TestComplementary:
    def test_partition(self):
        rng = np.random.default_rng(0)
        cam = axis_camera(f=40.0, w=80, h=48)
        for seed in range(100):
            mask = gridmask(48, 80, GRID, seed)
            points = cloud(rng)
            image = np.ones((48, 80))
            masked, kept = apply_complementary(image, points, cam, mask)
            assert np.array_equal(masked, mask.grid)
            pix, valid = point_pixels(cam, points)
            visible = mask.grid[pix[valid, 1], pix[valid, 0]] == 1
            kept_rows = {tuple(p) for p in kept}
            retained = np.array([tuple(p) in kept_rows for p in points[valid]], dtype=bool)
            # every projectable point is on exactly one side
            assert np.array_equal(retained, ~visible)
            outside = [tuple(p) for p in points[~valid]]
            assert all(p in kept_rows for p in outside)

    def test_invert_swaps_sides(self):
        rng = np.random.default_rng(1)
        cam = axis_camera(f=40.0, w=80, h=48)
        mask = gridmask(48, 80, GRID, 2)
        points = cloud(rng)
        image = np.ones((48, 80))
        img_a, pts_a = apply_complementary(image, points, cam, mask)
        img_b, pts_b = apply_complementary(image, points, cam, mask, invert=True)
        assert np.array_equal(img_a + img_b, image)
        _, valid = point_pixels(cam, points)
        assert len(pts_a) + len(pts_b) == len(points) + (~valid).sum()

    def test_shape_mismatch(self):
        cam = axis_camera(f=40.0, w=80, h=48)
        with pytest.raises(MaskError):
            apply_complementary(np.ones((48, 80)), np.zeros((0, 4)), cam, Mask.full(10, 10))


class TestPolicies:
    def inputs(self):
        cam = axis_camera(f=40.0, w=80, h=48)
        return SceneInputs.unmasked([cam], cloud(np.random.default_rng(4)))

    def test_none_is_identity(self):
        inputs = self.inputs()
        assert apply_policy(inputs, MaskPolicy(kind=MaskKind.NONE), 5, 10, 0) is inputs

    def test_curriculum_start_leaves_inputs(self):
        inputs = self.inputs()
        assert apply_policy(inputs, MaskPolicy(grid=GRID), 0, 10, 0) is inputs

    def test_always_masks_at_full_probability(self):
        inputs = self.inputs()
        out = apply_policy(inputs, MaskPolicy(grid=GRID, p_max=1.0, curriculum=False), 0, 10, 0)
        assert out.applied is MaskKind.COMPLEMENTARY_GRID
        assert len(out.points) < len(inputs.points)

    def test_image_grid_keeps_points(self):
        inputs = self.inputs()
        policy = MaskPolicy(kind=MaskKind.IMAGE_GRID, grid=GRID, p_max=1.0, curriculum=False)
        out = apply_policy(inputs, policy, 0, 10, 0)
        assert np.array_equal(out.points, inputs.points)
        assert out.images[0].mean() < 1.0

    def test_consistent_grid_keeps_visible_points(self):
        inputs = self.inputs()
        mask = gridmask(48, 80, GRID, 9)
        policy = MaskPolicy(kind=MaskKind.CONSISTENT_GRID, grid=GRID, p_max=1.0, curriculum=False)
        out = apply_policy(inputs, policy, 0, 10, 0, masks=[mask])
        pix, valid = point_pixels(inputs.cameras[0], out.points)
        assert np.all(mask.grid[pix[valid, 1], pix[valid, 0]] == 1)

    def test_modal_drops_one_modality(self):
        inputs = self.inputs()
        policy = MaskPolicy(kind=MaskKind.MODAL, grid=GRID, p_max=1.0, curriculum=False)
        out = apply_policy(inputs, policy, 0, 10, 0)
        assert len(out.points) == 0 or out.images[0].sum() == 0

    def test_supplied_mask_shape_checked(self):
        policy = MaskPolicy(grid=GRID, p_max=1.0, curriculum=False)
        with pytest.raises(MaskError):
            apply_policy(self.inputs(), policy, 0, 10, 0, masks=[Mask.full(4, 4)])

    def test_every_kind_has_a_masker(self):
        for kind in MaskKind:
            assert make_masker(MaskPolicy(kind=kind)).policy.kind is kind

    def test_policy_rejects_bad_probability(self):
        with pytest.raises(MaskError):
            MaskPolicy(p_max=1.5)


class TestVisibleFraction:
    def test_full_and_half(self):
        image = np.ones((10, 10))
        box = Box2D(0.0, 0.0, 10.0, 10.0)
        assert visible_fraction(image, box) == 1.0
        image[:, :5] = 0
        assert visible_fraction(image, box) == 0.5

    def test_box_outside_image(self):
        assert visible_fraction(np.ones((10, 10)), Box2D(20.0, 20.0, 30.0, 30.0)) == 0.0


class TestOverlappingCameras:
    def masked_rig(self, kind, seed):
        scene = generate_scene(SimConfig(), seed)
        points = scene.points.copy()
        points[:, 3] = np.arange(len(points))
        masks = [gridmask(cam.height, cam.width, GRID, seed * 10 + ci) for ci, cam in enumerate(scene.cameras)]
        inputs = SceneInputs.unmasked(scene.cameras, points)
        policy = MaskPolicy(kind=kind, grid=GRID, p_max=1.0, curriculum=False)
        out = apply_policy(inputs, policy, 0, 1, seed, masks=masks)
        kept = np.isin(np.arange(len(points)), out.points[:, 3].astype(np.int64))
        return scene.cameras, points, masks, out, kept

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_complementary_is_exact_in_every_camera(self, seed):
        cameras, points, masks, out, kept = self.masked_rig(MaskKind.COMPLEMENTARY_GRID, seed)
        n_views = np.zeros(len(points), dtype=int)
        for ci, cam in enumerate(cameras):
            pix, valid = point_pixels(cam, points)
            n_views += valid
            visible = out.images[ci][pix[valid, 1], pix[valid, 0]] == 1
            assert np.array_equal(kept[valid], ~visible)
            assert np.all(out.images[ci] <= masks[ci].grid)
        assert np.any(n_views >= 2)
        assert np.all(kept[n_views == 0])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_consistent_grid_agrees_in_every_camera(self, seed):
        cameras, points, masks, out, kept = self.masked_rig(MaskKind.CONSISTENT_GRID, seed)
        for ci, cam in enumerate(cameras):
            pix, valid = point_pixels(cam, points)
            visible = out.images[ci][pix[valid, 1], pix[valid, 0]] == 1
            assert np.array_equal(kept[valid], visible)

    def test_single_camera_grid_unchanged(self):
        cam = axis_camera(f=40.0, w=96, h=64)
        grid = gridmask(64, 96, GRID, 4).grid
        points = cloud(np.random.default_rng(4))
        grids, hidden, seen = reconcile_visibility([cam], [grid], points)
        pix, valid = point_pixels(cam, points)
        assert np.array_equal(grids[0], grid)
        assert np.array_equal(seen, valid)
        assert np.array_equal(hidden[valid], grid[pix[valid, 1], pix[valid, 0]] == 0)
        assert not np.any(hidden[~valid])
