"""
Tests for the command-line entry point
Every subcommand through main(), exit codes and layered configuration
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path so imports work
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import main, parse_args
from src.pipelines.gradcheck_pipeline import parameter_coords
from src.tools.geometry_tools import RigidTransform, rotation_angle
from src.tools.kitti_io_tools import read_poses, write_velodyne_bin
from src.tools.report_tools import read_report
from src.tools.weight_tools import N_PARAMS, WeightModel, load_checkpoint
from src.utils.cloud_cache import cache_stats
from src.utils.consts import FRAME_CACHE_ENTRIES, ReportKeys, TimingKeys
from src.utils.schemas import GradcheckConfig


def parse_pose(line):
    values = np.array([float(v) for v in line.split()])
    return RigidTransform.from_matrix(values.reshape(3, 4), check=False)


def output_lines(capsys):
    return capsys.readouterr().out.splitlines()


@pytest.fixture
def cloud_files(tmp_path, scene, known_motion):
    source = tmp_path / "source.bin"
    target = tmp_path / "target.bin"
    write_velodyne_bin(source, scene.points)
    write_velodyne_bin(target, known_motion.apply(scene.points))
    return str(source), str(target)


class TestRegister:
    """register subcommand"""

    @pytest.mark.smoke
    def test_identical_files(self, cloud_files, capsys):
        source, _ = cloud_files
        assert main(["register", "--source", source, "--target", source]) == 0
        lines = output_lines(capsys)
        assert parse_pose(lines[0]).almost_equal(RigidTransform.identity(), tol=1e-9)
        assert lines[1].startswith("objective\t")
        assert lines[2] == "iterations\t0"

    @pytest.mark.integration
    def test_known_motion(self, cloud_files, known_motion, capsys, tmp_path):
        source, target = cloud_files
        out = tmp_path / "out" / "pose.txt"
        assert main(["register", "--source", source, "--target", target, "--out", str(out)]) == 0
        estimate = parse_pose(output_lines(capsys)[0])
        err = known_motion.inverse() @ estimate
        assert np.linalg.norm(err.translation) < 1e-3
        assert np.degrees(rotation_angle(err.rotation)) < 0.1
        assert read_poses(out).poses[0].almost_equal(estimate, tol=1e-9)

    def test_icp_backend(self, cloud_files, capsys):
        source, _ = cloud_files
        assert main(["register", "--source", source, "--target", source, "--backend", "icp"]) == 0

    def test_resolved_config_printed_at_any_log_level(self, cloud_files, capsys):
        source, _ = cloud_files
        assert main(["register", "--source", source, "--target", source, "--log-level", "ERROR", "--kd", "3"]) == 0
        captured = capsys.readouterr()
        assert "config command=register " in captured.err
        assert '"k_d":3' in captured.err
        assert "config" not in captured.out

    def test_missing_file(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.bin")
        assert main(["register", "--source", missing, "--target", missing]) == 1
        assert missing in capsys.readouterr().err

    def test_unknown_flag(self, cloud_files, capsys):
        source, _ = cloud_files
        assert main(["register", "--source", source, "--target", source, "--bogus"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["fly"]) == 1


class TestConfigFile:
    """key=value files layered under explicit flags"""

    def test_file_values_become_defaults(self, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text("# odometry defaults\nbackend = wgicp\nvoxel=0.25\nout-traj=traj.txt\n", encoding="utf-8")
        args = parse_args(["odometry", "--data", "seq", "--config", str(config)])
        assert args.backend == "wgicp"
        assert args.voxel == 0.25
        assert args.out_traj == "traj.txt"

    def test_flags_override_file(self, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text("voxel=0.25\n", encoding="utf-8")
        args = parse_args(["odometry", "--data", "seq", "--config", str(config), "--voxel", "1.5"])
        assert args.voxel == 1.5

    def test_boolean_key(self, tmp_path):
        config = tmp_path / "check.conf"
        config.write_text("corrupt-adjoint=yes\n", encoding="utf-8")
        assert parse_args(["gradcheck", "--config", str(config)]).corrupt_adjoint is True

    def test_unknown_key(self, tmp_path, cloud_files):
        source, _ = cloud_files
        config = tmp_path / "bad.conf"
        config.write_text("flux=3\n", encoding="utf-8")
        assert main(["register", "--source", source, "--target", source, "--config", str(config)]) == 1

    def test_invalid_value_from_file(self, tmp_path, cloud_files):
        source, _ = cloud_files
        config = tmp_path / "kd.conf"
        config.write_text("kd=0\n", encoding="utf-8")
        argv = ["register", "--source", source, "--target", source, "--config", str(config)]
        assert main(argv) == 1
        assert main(argv + ["--kd", "1"]) == 0


class TestOdometry:
    """odometry subcommand"""

    @pytest.mark.integration
    def test_report_keys(self, mini_sequence, tmp_path, capsys):
        report = tmp_path / "report.tsv"
        traj = tmp_path / "traj.txt"
        argv = ["odometry", "--data", str(mini_sequence), "--out-report", str(report), "--out-traj", str(traj)]
        assert main(argv) == 0
        metrics = read_report(report)
        assert list(metrics) == [k.value for k in ReportKeys]
        assert metrics["frames"] == "2"
        assert metrics["flagged_frames"] == "0"
        assert metrics["t_rel"] == "nan"
        timing = read_report(tmp_path / "report.timing.tsv")
        assert list(timing) == [k.value for k in TimingKeys]
        assert len(read_poses(traj)) == 2
        assert output_lines(capsys)[0] == "frames\t2"

    @pytest.mark.integration
    def test_reports_are_reproducible(self, mini_sequence, tmp_path):
        first, second = tmp_path / "a.tsv", tmp_path / "b.tsv"
        for report in (first, second):
            assert main(["odometry", "--data", str(mini_sequence), "--out-report", str(report)]) == 0
        assert first.read_bytes() == second.read_bytes()

    def test_plot_dir(self, mini_sequence, tmp_path):
        plots = tmp_path / "plots"
        assert main(["odometry", "--data", str(mini_sequence), "--plot-dir", str(plots)]) == 0
        assert (plots / "trajectory.png").is_file()
        assert (plots / "timing.png").is_file()

    def test_rejection_needs_model(self, mini_sequence):
        assert main(["odometry", "--data", str(mini_sequence), "--rejection", "0.5"]) == 1

    def test_missing_sequence(self, tmp_path):
        assert main(["odometry", "--data", str(tmp_path / "nothing")]) == 1


class TestTrain:
    """train subcommand"""

    @pytest.mark.integration
    def test_loss_history_rows(self, mini_sequence, tmp_path, capsys):
        model = tmp_path / "model.wgt"
        argv = [
            "train", "--data", str(mini_sequence), "--epochs", "5", "--out-model", str(model),
            "--max-points", "64", "--iters", "3", "--kd", "2",
        ]
        assert main(argv) == 0
        history = (tmp_path / "model.wgt.loss.tsv").read_text(encoding="utf-8").splitlines()
        assert history[0] == "epoch\tloss"
        assert len(history) == 6
        assert output_lines(capsys)[0] == "epochs\t5"
        assert len(load_checkpoint(model).params) == len(WeightModel.init(0).params)

    def test_zero_epochs_saves_initial_model(self, mini_sequence, tmp_path):
        model = tmp_path / "model.wgt"
        argv = [
            "train", "--data", str(mini_sequence), "--epochs", "0", "--out-model", str(model),
            "--max-points", "64", "--iters", "2", "--seed", "4",
        ]
        assert main(argv) == 0
        np.testing.assert_array_equal(load_checkpoint(model).params, WeightModel.init(4).params)

    def test_needs_ground_truth(self, mini_sequence, tmp_path):
        (mini_sequence / "poses.txt").unlink()
        assert main(["train", "--data", str(mini_sequence), "--out-model", str(tmp_path / "m.wgt")]) == 1


class TestGradcheck:
    """gradcheck subcommand"""

    @pytest.mark.integration
    def test_small_problem_passes(self, capsys):
        argv = ["gradcheck", "--points", "12", "--iters", "2", "--kd", "2", "--param-samples", "8"]
        assert main(argv) == 0
        lines = output_lines(capsys)
        assert lines[0].startswith("max_rel_error\t")
        assert lines[2] == "checked\t32"

    def test_single_point(self):
        assert main(["gradcheck", "--points", "1", "--iters", "1", "--kd", "1", "--param-samples", "4"]) == 0

    def test_defaults_check_every_parameter(self):
        assert parse_args(["gradcheck"]).param_samples == 0
        assert GradcheckConfig().param_samples == 0
        np.testing.assert_array_equal(parameter_coords(0, np.random.default_rng(0)), np.arange(N_PARAMS))

    def test_parameter_sample_is_seeded(self):
        a = parameter_coords(8, np.random.default_rng(5))
        np.testing.assert_array_equal(a, parameter_coords(8, np.random.default_rng(5)))
        assert len(a) == 8
        assert np.all(np.diff(a) > 0)

    @pytest.mark.integration
    def test_corrupted_adjoint_fails(self, capsys):
        argv = ["gradcheck", "--points", "12", "--iters", "2", "--kd", "2", "--param-samples", "8", "--corrupt-adjoint"]
        assert main(argv) == 3
        assert "tolerance" in capsys.readouterr().err


class TestSweep:
    """sweep subcommand"""

    @pytest.mark.integration
    def test_single_ratio_without_model(self, mini_sequence, tmp_path, capsys):
        out = tmp_path / "sweep.tsv"
        argv = ["sweep", "--data", str(mini_sequence), "--rejections", "0", "--backend", "gicp", "--out", str(out)]
        assert main(argv) == 0
        rows = out.read_text(encoding="utf-8").splitlines()
        assert rows[0] == "voxel_size\trejection\tsurviving_pct\tt_rel\tr_rel\talignment_ms\tms_per_iteration"
        assert len(rows) == 2
        assert rows[1].split("\t")[:4] == ["0.500000", "0.000000", "100.000000", "nan"]
        assert output_lines(capsys)[0] == rows[0]
        assert cache_stats() == {"entries": 0, "capacity": FRAME_CACHE_ENTRIES, "hits": 0, "misses": 0}

    def test_positive_ratio_needs_model(self, mini_sequence):
        assert main(["sweep", "--data", str(mini_sequence), "--rejections", "0,0.5"]) == 1

    def test_bad_ratio_list(self, mini_sequence):
        assert main(["sweep", "--data", str(mini_sequence), "--rejections", "a,b"]) == 1
