import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdcreid import fen
from pdcreid.errors import ConfigError, DegeneratePartError, NoMassError, ShapeError


def brute_centroid(v):
    h, w = v.shape
    sx = sy = m = 0.0
    for y in range(h):
        for x in range(w):
            m += v[y, x]
            sx += v[y, x] * x
            sy += v[y, x] * y
    return sx / m, sy / m


def maps_with(single=None, shape=(8, 8)):
    maps = np.ones((14,) + shape)
    if single is not None:
        i, v = single
        maps[i] = v
    return maps


class TestLocalize:
    def test_delta(self):
        v = np.zeros((8, 8))
        v[5, 3] = 2.0
        assert fen.localize_joints(maps_with((0, v)))[0].tolist() == [3.0, 5.0]

    def test_uniform_block(self):
        v = np.zeros((6, 6))
        v[:2, :2] = 1.0
        assert fen.localize_joints(maps_with((4, v), (6, 6)))[4].tolist() == [0.5, 0.5]

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        maps = rng.uniform(0, 1, (14, 8, 8))
        got = fen.localize_joints(maps)
        for i in range(14):
            assert np.max(np.abs(got[i] - brute_centroid(maps[i]))) < 1e-12

    def test_no_mass_names_joint(self):
        maps = maps_with((6, np.zeros((8, 8))))
        with pytest.raises(NoMassError) as e:
            fen.localize_joints(maps)
        assert e.value.joint == 7 and "joint 7" in str(e.value)

    def test_wrong_count(self):
        with pytest.raises(ShapeError):
            fen.localize_joints(np.ones((13, 4, 4)))

    def test_negative_rejected(self):
        maps = np.ones((14, 4, 4))
        maps[0, 0, 0] = -1
        with pytest.raises(ValueError):
            fen.localize_joints(maps)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(0, 4), st.integers(0, 4))
    def test_translation_equivariant(self, seed, dx, dy):
        rng = np.random.default_rng(seed)
        base = np.zeros((14, 12, 12))
        base[:, :6, :6] = rng.uniform(0, 1, (14, 6, 6))
        base[:, 0, 0] += 0.1
        shifted = np.zeros_like(base)
        shifted[:, dy:, dx:] = base[:, :12 - dy, :12 - dx]
        d = fen.localize_joints(shifted) - fen.localize_joints(base)
        assert np.allclose(d, [dx, dy], rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, c):
        maps = np.random.default_rng(seed).uniform(0, 1, (14, 7, 9))
        assert np.allclose(fen.localize_joints(maps * c), fen.localize_joints(maps), rtol=0, atol=1e-12)


def ref_joints():
    j = np.full((14, 2), 128.0)
    j[:, 1] = 256.0
    return j


class TestBoxes:
    def test_head_box(self):
        j = ref_joints()
        j[0] = (100, 100)
        assert fen.part_boxes(j, (512, 256)).boxes[0].tolist() == [70, 130, 70, 130]

    def test_left_arm_box(self):
        j = ref_joints()
        j[5], j[6], j[7] = (50, 60), (55, 80), (60, 100)
        assert fen.part_boxes(j, (512, 256)).boxes[2].tolist() == [40, 70, 50, 110]

    def test_corner_clamp(self):
        j = ref_joints()
        j[0] = (0, 0)
        assert fen.part_boxes(j, (512, 256)).boxes[0].tolist() == [0, 30, 0, 30]

    def test_margins_scale(self):
        j = ref_joints() / 8
        j[0] = (10, 20)
        assert fen.part_boxes(j, (64, 32)).boxes[0].tolist() == [10 - 3.75, 10 + 3.75, 20 - 3.75, 20 + 3.75]

    def test_degenerate(self):
        j = ref_joints()
        j[0] = (-100, 50)
        with pytest.raises(DegeneratePartError) as e:
            fen.part_boxes(j, (512, 256))
        assert e.value.part == 1

    def test_contains_members_before_clamp(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            j = rng.uniform(0, 256, (14, 2))
            raw = fen.raw_boxes(j, (512, 256))
            for i in range(1, 6):
                pts = j[[k - 1 for k in fen.PART_JOINTS[i]]]
                assert np.all(pts[:, 0] - raw[i, 0] >= 10 - 1e-12) and np.all(raw[i, 1] - pts[:, 0] >= 10 - 1e-12)
                assert np.all(pts[:, 1] - raw[i, 2] >= 10 - 1e-12) and np.all(raw[i, 3] - pts[:, 1] >= 10 - 1e-12)

    def test_angles(self):
        j = ref_joints()
        j[5], j[7] = (50, 50), (50, 90)  # left arm hanging straight down
        j[2], j[4] = (50, 50), (90, 50)  # right arm pointing along +x
        a = fen.part_boxes(j, (512, 256)).angles
        assert a[0] == 0.0 and a[2] == 0.0 and a[3] == pytest.approx(math.pi / 2)

    def test_part_sets(self):
        assert fen.PART_JOINTS == ((1,), (2, 3, 6, 9, 12), (6, 7, 8), (3, 4, 5), (9, 10, 11), (12, 13, 14))


class TestNormalize:
    def test_identity_crop(self):
        img = np.random.default_rng(0).normal(size=(3, 20, 12))
        out = fen.normalize_part(img, (2, 9, 4, 15), 0.0, (12, 8))
        assert np.array_equal(out, img[:, 4:16, 2:10])

    def test_constant(self):
        img = np.full((1, 30, 20), 0.7)
        out = fen.normalize_part(img, (3, 15, 5, 25), 0.6, (11, 7))
        inside = out != 0
        assert inside.sum() > 0.3 * out.size
        assert np.allclose(out[inside], 0.7, rtol=0, atol=1e-12)

    def test_quarter_turn_permutation(self):
        img = np.zeros((1, 6, 6))
        img[0, 2:4, 2:4] = [[1.0, 2.0], [3.0, 4.0]]
        out = fen.normalize_part(img, (2, 3, 2, 3), math.pi / 2, (2, 2))
        # turning the crop by -90 degrees about its center
        assert out[0].tolist() == [[3.0, 1.0], [4.0, 2.0]]

    def test_box_outside_image(self):
        with pytest.raises(ShapeError):
            fen.normalize_part(np.zeros((1, 5, 5)), (0, 5, 0, 4), 0.0, (2, 2))


class TestCanvas:
    layout = fen.default_layout((64, 32))

    def parts(self, rng):
        return [rng.normal(size=(3,) + e) for e in self.layout.extents]

    def test_default_extents(self):
        assert self.layout.extents == ((16, 16), (32, 16), (32, 8), (32, 8), (32, 8), (32, 8))

    def test_zero(self):
        zero = [np.zeros((3,) + e) for e in self.layout.extents]
        assert not fen.assemble_canvas(zero, self.layout).any()

    def test_sum_and_energy(self):
        parts = self.parts(np.random.default_rng(2))
        canvas = fen.assemble_canvas(parts, self.layout)
        assert canvas.sum() == pytest.approx(sum(p.sum() for p in parts), rel=1e-12)
        assert (canvas ** 2).sum() == pytest.approx(sum((p ** 2).sum() for p in parts), rel=1e-12)

    def test_round_trip(self):
        parts = self.parts(np.random.default_rng(3))
        canvas = fen.assemble_canvas(parts, self.layout)
        for i, p in enumerate(parts):
            assert np.array_equal(fen.extract_slot(canvas, self.layout, i), p)

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError, match="overlaps"):
            fen.CanvasLayout((8, 8), origins=((0, 0),) * 6, extents=((2, 2),) * 6)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ConfigError, match="outside"):
            fen.CanvasLayout((4, 4), origins=((0, 0), (0, 2), (2, 0), (2, 2), (4, 0), (0, 4)),
                             extents=((2, 2),) * 6)

    def test_wrong_part_shape(self):
        parts = self.parts(np.random.default_rng(4))
        parts[3] = parts[3][:, :-1]
        with pytest.raises(ShapeError):
            fen.assemble_canvas(parts, self.layout)

    def test_unscalable_extent(self):
        with pytest.raises(ConfigError):
            fen.default_layout((60, 30))


class TestExtract:
    def test_pipeline_from_maps_and_joints(self, tmp_path):
        from pdcreid import synth
        s = synth.generate_sample(synth.SynthSpec(), 0, 0)
        p1, j1, b1 = fen.extract_parts(s.image, s.response_maps)
        p2, _, _ = fen.extract_parts(s.image, j1)
        assert all(np.array_equal(a, b) for a, b in zip(p1, p2))
        assert [p.shape[1:] for p in p1] == list(fen.default_layout((64, 32)).extents)
        fen.write_joints_csv(tmp_path / "j.csv", j1)
        assert np.array_equal(fen.read_joints_csv(tmp_path / "j.csv"), j1)
        fen.write_boxes_csv(tmp_path / "b.csv", b1)
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "part,xlo,xhi,ylo,yhi" and len(lines) == 7

    def test_unrotated_parts_are_plain_crops(self):
        from pdcreid import synth
        s = synth.generate_sample(synth.SynthSpec(), 1, 2)
        rot, _, _ = fen.extract_parts(s.image, s.joints, rotate=True)
        flat, _, boxes = fen.extract_parts(s.image, s.joints, rotate=False)
        assert np.array_equal(rot[0], flat[0])  # the head is never turned
        assert any(not np.array_equal(a, b) for a, b in zip(rot[2:], flat[2:]))

    def test_joints_csv_bad_rows(self, tmp_path):
        (tmp_path / "j.csv").write_text("joint,x,y\n1,0,0\n")
        with pytest.raises(ShapeError):
            fen.read_joints_csv(tmp_path / "j.csv")
