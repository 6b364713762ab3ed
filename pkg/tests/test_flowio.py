"""Codec tests: byte-level goldens, round trips, and error diagnostics.

The golden files under tests/golden/ were constructed from struct.pack
literals, independent of the writers; the same constructions are repeated
inline here so the files and the writers are checked against each other.
"""

import colorsys
import pathlib
import struct

import numpy as np
import pytest

from miniflow import flowio, synth

GOLDEN = pathlib.Path(__file__).parent / "golden"


class TestFlo:
    def golden_bytes(self):
        return (struct.pack("<f", 202021.25) + struct.pack("<ii", 2, 1)
                + struct.pack("<ffff", 0.5, 1.5, -0.25, 3.0))

    def golden_flow(self):
        return np.array([[[0.5, -0.25]], [[1.5, 3.0]]], dtype=np.float32)

    def test_golden_file_matches_inline_construction(self):
        assert (GOLDEN / "flow_2x1.flo").read_bytes() == self.golden_bytes()

    def test_writer_reproduces_golden_bytes(self, tmp_path):
        p = tmp_path / "out.flo"
        flowio.write_flo(p, self.golden_flow())
        assert p.read_bytes() == (GOLDEN / "flow_2x1.flo").read_bytes()

    def test_reader_parses_golden_file(self):
        flow = flowio.read_flo(GOLDEN / "flow_2x1.flo")
        assert flow.dtype == np.float32
        assert np.array_equal(flow, self.golden_flow())

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        flow = (rng.standard_normal((2, 7, 5)) * 50.0).astype(np.float32)
        p = tmp_path / "rt.flo"
        flowio.write_flo(p, flow)
        back = flowio.read_flo(p)
        assert back.tobytes() == flow.tobytes()

    def test_single_pixel_file_size(self, tmp_path):
        p = tmp_path / "one.flo"
        flowio.write_flo(p, np.zeros((2, 1, 1)))
        assert p.stat().st_size == 12 + 8

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"JUNK" + self.golden_bytes()[4:])
        with pytest.raises(ValueError, match="bad magic"):
            flowio.read_flo(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.flo"
        p.write_bytes(self.golden_bytes()[:-4])
        with pytest.raises(ValueError, match="truncated payload"):
            flowio.read_flo(p)

    def test_nonpositive_dims(self, tmp_path):
        p = tmp_path / "dims.flo"
        p.write_bytes(flowio.FLO_MAGIC + struct.pack("<ii", 0, 3))
        with pytest.raises(ValueError, match="nonpositive dimensions"):
            flowio.read_flo(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "long.flo"
        p.write_bytes(self.golden_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            flowio.read_flo(p)


class TestKittiFlow:
    def golden_flow(self):
        u = np.array([[0.0, 1.5], [-1.5, 100.0]])
        v = np.array([[0.0, -0.25], [511.984375, -512.0]])
        return np.stack((u, v)), np.array([[1, 1], [0, 1]], dtype=np.uint8)

    def test_golden_file_matches_inline_construction(self):
        vals = [(32768, 32768, 1), (32864, 32752, 1),
                (32672, 65535, 0), (39168, 0, 1)]
        raw = b"P6\n2 2\n65535\n" + b"".join(struct.pack("<HHH", *t) for t in vals)
        assert (GOLDEN / "kitti_2x2.pnm").read_bytes() == raw

    def test_writer_reproduces_golden_bytes(self, tmp_path):
        flow, valid = self.golden_flow()
        p = tmp_path / "out.pnm"
        flowio.write_kitti_flow(p, flow, valid)
        assert p.read_bytes() == (GOLDEN / "kitti_2x2.pnm").read_bytes()

    def test_reader_parses_golden_file(self):
        flow, valid = flowio.read_kitti_flow(GOLDEN / "kitti_2x2.pnm")
        expect, expect_valid = self.golden_flow()
        assert np.array_equal(flow, expect.astype(np.float32))
        assert np.array_equal(valid, expect_valid)

    def test_offset_convention(self, tmp_path):
        # encoded 2^15 in both channels means zero flow
        p = tmp_path / "zero.pnm"
        p.write_bytes(b"P6\n1 1\n65535\n" + struct.pack("<HHH", 32768, 32768, 1))
        flow, valid = flowio.read_kitti_flow(p)
        assert flow[0, 0, 0] == 0.0 and flow[1, 0, 0] == 0.0
        assert valid[0, 0] == 1

    def test_scaling_convention(self, tmp_path):
        # 1.5 px encodes as 2^15 + 96
        p = tmp_path / "scale.pnm"
        flowio.write_kitti_flow(p, np.full((2, 1, 1), 1.5))
        payload = p.read_bytes()[-6:]
        assert struct.unpack("<HHH", payload) == (32768 + 96, 32768 + 96, 1)

    def test_quantization_aligned_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        flow = np.rint(rng.uniform(-500, 500, size=(2, 4, 6)) * 64.0) / 64.0
        valid = (rng.random((4, 6)) < 0.8).astype(np.uint8)
        p = tmp_path / "rt.pnm"
        flowio.write_kitti_flow(p, flow, valid)
        back, back_valid = flowio.read_kitti_flow(p)
        assert np.array_equal(back, flow.astype(np.float32))
        assert np.array_equal(back_valid, valid)

    def test_out_of_range_values_clip(self, tmp_path):
        p = tmp_path / "clip.pnm"
        flowio.write_kitti_flow(p, np.full((2, 1, 1), 1000.0))
        back, _ = flowio.read_kitti_flow(p)
        assert back[0, 0, 0] == pytest.approx((65535 - 32768) / 64.0)

    def test_wrong_bit_depth_rejected(self, tmp_path):
        p = tmp_path / "depth.pnm"
        p.write_bytes(b"P6\n1 1\n255\n" + bytes(3))
        with pytest.raises(ValueError, match="bit depth"):
            flowio.read_kitti_flow(p)

    def test_wrong_channel_count_rejected(self, tmp_path):
        p = tmp_path / "gray.pnm"
        p.write_bytes(b"P5\n1 1\n65535\n" + bytes(2))
        with pytest.raises(ValueError, match="P6"):
            flowio.read_kitti_flow(p)


class TestImages:
    def test_ppm_golden(self, tmp_path):
        img = np.array([[[10, 200]], [[20, 100]], [[30, 50]]], dtype=np.uint8)
        p = tmp_path / "img.ppm"
        flowio.write_ppm(p, img)
        assert p.read_bytes() == (GOLDEN / "image_2x1.ppm").read_bytes()
        assert np.array_equal(flowio.read_ppm(GOLDEN / "image_2x1.ppm"), img)

    def test_pgm_golden(self, tmp_path):
        img = np.array([[0, 255], [128, 7]], dtype=np.uint8)
        p = tmp_path / "img.pgm"
        flowio.write_pgm(p, img)
        assert p.read_bytes() == (GOLDEN / "mask_2x2.pgm").read_bytes()
        assert np.array_equal(flowio.read_pgm(GOLDEN / "mask_2x2.pgm"), img)

    def test_round_trips(self, tmp_path):
        rng = np.random.default_rng(2)
        color = rng.integers(0, 256, size=(3, 9, 4), dtype=np.uint8)
        gray = rng.integers(0, 256, size=(5, 8), dtype=np.uint8)
        flowio.write_ppm(tmp_path / "c.ppm", color)
        flowio.write_pgm(tmp_path / "g.pgm", gray)
        assert np.array_equal(flowio.read_ppm(tmp_path / "c.ppm"), color)
        assert np.array_equal(flowio.read_pgm(tmp_path / "g.pgm"), gray)

    def test_header_comments_tolerated(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x01\x02")
        assert np.array_equal(flowio.read_pgm(p), np.array([[1, 2]], dtype=np.uint8))

    def test_kind_mismatch_rejected(self, tmp_path):
        flowio.write_pgm(tmp_path / "g.pgm", np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError, match="P6"):
            flowio.read_ppm(tmp_path / "g.pgm")

    def test_wrong_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="uint8"):
            flowio.write_ppm(tmp_path / "f.ppm", np.zeros((3, 2, 2)))

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_bytes(b"P5\n2 2\n255\n\x00\x00")
        with pytest.raises(ValueError, match="truncated payload"):
            flowio.read_pgm(p)


class TestFlowToColor:
    def test_zero_flow_is_white(self):
        img = flowio.flow_to_color(np.zeros((2, 4, 4)))
        assert img.shape == (3, 4, 4)
        assert np.array_equal(img, np.ones((3, 4, 4)))

    def test_output_range(self):
        rng = np.random.default_rng(3)
        img = flowio.flow_to_color(rng.standard_normal((2, 16, 16)) * 5.0)
        assert img.min() >= 0.0 and img.max() <= 1.0

    @pytest.mark.parametrize("direction", [(1.0, 0.0), (0.0, 1.0), (0.7, -0.7)])
    def test_antipodal_directions_oppose_in_hue(self, direction):
        u, v = direction
        flow = np.array([[[u, -u]], [[v, -v]]]) * 3.0
        img = flowio.flow_to_color(flow, max_norm=3.0 * np.hypot(u, v))
        h1 = colorsys.rgb_to_hsv(*img[:, 0, 0])[0]
        h2 = colorsys.rgb_to_hsv(*img[:, 0, 1])[0]
        delta = abs(h1 - h2)
        delta = min(delta, 1.0 - delta)
        assert abs(delta - 0.5) < 0.12

    def test_magnitude_controls_saturation(self):
        flow = np.array([[[1.0, 2.0]], [[0.0, 0.0]]])
        img = flowio.flow_to_color(flow, max_norm=2.0)
        # same hue, the shorter vector is paler (closer to white)
        assert img[:, 0, 0].min() > img[:, 0, 1].min()

    def test_above_max_norm_darkens(self):
        flow = np.array([[[4.0]], [[0.0]]])
        img = flowio.flow_to_color(flow, max_norm=1.0)
        assert img.max() <= 0.75


class TestSequenceDirs:
    def test_save_load_round_trip(self, tmp_path):
        seq = synth.render_sequence(synth.random_scene(3))
        synth.save_sequence(tmp_path / "seq", seq)
        names = sorted(p.name for p in (tmp_path / "seq").iterdir())
        assert names == ["flow_00.flo", "flow_01.flo",
                         "frame_00.ppm", "frame_01.ppm", "frame_02.ppm",
                         "occ_00.pgm", "occ_01.pgm"]
        back = synth.load_sequence(tmp_path / "seq")
        assert np.array_equal(back.occ_mask, seq.occ_mask)
        assert np.array_equal(back.noc_mask, seq.noc_mask)
        assert np.array_equal(back.gt_flow, seq.gt_flow.astype(np.float32))
        assert np.abs(back.frames - seq.frames).max() <= 0.5 / 255.0 + 1e-7

    def test_save_dataset_layout(self, tmp_path):
        seqs = synth.generate_dataset(2, 50)
        synth.save_dataset(tmp_path, seqs)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["seq_00000", "seq_00001"]

    def test_load_missing_frames_rejected(self, tmp_path):
        (tmp_path / "seq").mkdir()
        with pytest.raises(ValueError, match="at least 3"):
            synth.load_sequence(tmp_path / "seq")
