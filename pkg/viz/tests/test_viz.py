"""Reader, renderer, and plot tests against primary-produced fixtures."""

from pathlib import Path

import numpy as np
import pytest

from pcnclaws_viz.format import BadFile, read_trajectory
from pcnclaws_viz.plots import ParseError, parse_log, plot_logs
from pcnclaws_viz.render import ColorBy, EmptyRange, RenderSpec, render_trajectory

FIXTURES = Path(__file__).parent / "fixtures"


class TestFormat:
    def test_reads_2d_fixture(self):
        t = read_trajectory(FIXTURES / "drop2d_501.pcnc")
        assert t.n_frames == 501
        assert t.particle_count == 25
        assert t.dim == 2
        assert t.velocities is not None
        assert t.frame_dt == pytest.approx(2e-3)
        assert 0.0 <= t.positions.min() and t.positions.max() <= 1.0

    def test_reads_3d_fixture(self):
        t = read_trajectory(FIXTURES / "drop3d_6.pcnc")
        assert t.n_frames == 6
        assert t.dim == 3

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.pcnc"
        p.write_bytes(b"WRONGSTUFF" * 10)
        with pytest.raises(BadFile):
            read_trajectory(p)

    def test_corrupted_checksum(self, tmp_path):
        raw = bytearray((FIXTURES / "drop3d_6.pcnc").read_bytes())
        raw[50] ^= 0xFF
        p = tmp_path / "c.pcnc"
        p.write_bytes(bytes(raw))
        with pytest.raises(BadFile):
            read_trajectory(p)

    def test_truncated(self, tmp_path):
        raw = (FIXTURES / "drop3d_6.pcnc").read_bytes()
        p = tmp_path / "t.pcnc"
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(BadFile):
            read_trajectory(p)


class TestRender:
    def test_single_frame_shows_lattice(self, tmp_path):
        spec = RenderSpec(input_path=str(FIXTURES / "drop2d_501.pcnc"),
                          out_dir=str(tmp_path), frame_range=(0, 1))
        written = render_trajectory(spec)
        assert len(written) == 1
        assert written[0].name == "frame_00000.png"
        assert written[0].stat().st_size > 0

    def test_3d_projection(self, tmp_path):
        spec = RenderSpec(input_path=str(FIXTURES / "drop3d_6.pcnc"),
                          out_dir=str(tmp_path), axis="z",
                          color_by=ColorBy.HEIGHT)
        written = render_trajectory(spec)
        assert len(written) == 6

    def test_side_by_side_gt(self, tmp_path):
        spec = RenderSpec(input_path=str(FIXTURES / "drop3d_6.pcnc"),
                          out_dir=str(tmp_path / "pair"),
                          gt_path=str(FIXTURES / "drop3d_6.pcnc"),
                          frame_range=(0, 2))
        written = render_trajectory(spec)
        assert len(written) == 2
        # paired panels are wider than single ones
        single = RenderSpec(input_path=str(FIXTURES / "drop3d_6.pcnc"),
                            out_dir=str(tmp_path / "single"),
                            frame_range=(0, 1))
        s = render_trajectory(single)
        assert written[0].stat().st_size > s[0].stat().st_size

    def test_empty_range(self, tmp_path):
        spec = RenderSpec(input_path=str(FIXTURES / "drop3d_6.pcnc"),
                          out_dir=str(tmp_path), frame_range=(4, 4))
        with pytest.raises(EmptyRange):
            render_trajectory(spec)

    def test_speed_coloring(self, tmp_path):
        spec = RenderSpec(input_path=str(FIXTURES / "drop2d_501.pcnc"),
                          out_dir=str(tmp_path), frame_range=(100, 102),
                          color_by=ColorBy.SPEED)
        assert len(render_trajectory(spec)) == 2


class TestPlots:
    def test_training_log(self, tmp_path):
        out = tmp_path / "loss.png"
        data = plot_logs(FIXTURES / "train.log", out)
        assert data.kind == "train"
        assert len(data.steps) == 12
        assert out.stat().st_size > 0

    def test_estimation_log_has_two_parameter_curves(self, tmp_path):
        out = tmp_path / "est.png"
        data = plot_logs(FIXTURES / "estimate.log", out)
        assert data.kind == "estimate"
        assert data.params.shape[1] == 2
        assert out.stat().st_size > 0

    def test_empty_log_is_parse_error(self, tmp_path):
        p = tmp_path / "empty.log"
        p.write_text("")
        with pytest.raises(ParseError):
            plot_logs(p, tmp_path / "x.png")

    def test_garbage_line_reports_lineno(self, tmp_path):
        p = tmp_path / "bad.log"
        p.write_text("step=0 lr=1 loss=2 diverged=0\nwhat even is this\n")
        with pytest.raises(ParseError) as exc:
            parse_log(p)
        assert exc.value.line == 2

    def test_mixed_kinds_rejected(self, tmp_path):
        p = tmp_path / "mixed.log"
        p.write_text("step=0 lr=1 loss=2 diverged=0\niter=0 loss=1 params=1,2\n")
        with pytest.raises(ParseError):
            parse_log(p)


class TestCli:
    def test_render_command(self, tmp_path):
        from pcnclaws_viz.cli import main
        code = main(["render", "--in", str(FIXTURES / "drop3d_6.pcnc"),
                     "--out", str(tmp_path), "--frames", "0:3"])
        assert code == 0
        assert len(list(tmp_path.glob("frame_*.png"))) == 3

    def test_plot_command(self, tmp_path):
        from pcnclaws_viz.cli import main
        out = tmp_path / "p.png"
        assert main(["plot", "--log", str(FIXTURES / "train.log"),
                     "--out", str(out)]) == 0
        assert out.exists()

    def test_bad_file_exit_code(self, tmp_path):
        from pcnclaws_viz.cli import main
        bad = tmp_path / "bad.pcnc"
        bad.write_bytes(b"junk")
        assert main(["render", "--in", str(bad), "--out", str(tmp_path)]) == 2


@pytest.mark.acceptance
class TestAcceptance:
    def test_criterion_10_full_render_and_estimation_plot(self, tmp_path):
        # 501-frame fixture renders to 501 PNGs without error
        spec = RenderSpec(input_path=str(FIXTURES / "drop2d_501.pcnc"),
                          out_dir=str(tmp_path / "frames"), dpi=40,
                          point_size=2.0)
        written = render_trajectory(spec)
        assert len(written) == 501
        assert all(p.stat().st_size > 0 for p in written)
        # estimation log plots loss plus two parameter curves
        out = tmp_path / "estimation.png"
        data = plot_logs(FIXTURES / "estimate.log", out)
        assert data.kind == "estimate"
        assert data.params.shape[1] == 2
        assert out.stat().st_size > 0
        print("PASS criterion 10: 501 frames rendered, estimation plot with "
              f"{data.params.shape[1]} parameter curves")
