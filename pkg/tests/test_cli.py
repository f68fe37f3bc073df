import subprocess
import sys

import numpy as np
import pytest

from uwbcal import delaycal, pipeline, powercal
from uwbcal.cli import main
from uwbcal.config import parse_config
from uwbcal.dataset import parse_dataset, write_dataset
from uwbcal.spline import ClampedSpline

CONFIG = """
simulation.seed = 0
simulation.duration_s = 90
evaluation.robots = 0
evaluation.test_seeds = 1
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """Simulate, calibrate and localise once through the command line."""
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.txt").write_text(CONFIG, encoding="utf-8")
    c = str(d / "cfg.txt")
    steps = [
        ["simulate", "--config", c, "--out", str(d / "train.csv"), "--tracks", str(d / "tracks.csv")],
        ["simulate", "--config", c, "--seed", "1", "--out", str(d / "test.csv")],
        ["calibrate-delays", "--config", c, "--dataset", str(d / "train.csv"), "--out", str(d / "delays.csv"),
         "--histogram", str(d / "hist.csv"), "--report", str(d / "diag.txt")],
        ["calibrate-power", "--config", c, "--dataset", str(d / "train.csv"), "--delays", str(d / "delays.csv"),
         "--out", str(d / "power.csv"), "--curves", str(d / "curves.csv")],
        ["apply", "--config", c, "--dataset", str(d / "test.csv"), "--delays", str(d / "delays.csv"),
         "--calibration", str(d / "power.csv"), "--out", str(d / "corrected.csv"), "--report", str(d / "stats.csv")],
        ["localize", "--config", c, "--delays", str(d / "delays.csv"), "--calibration", str(d / "power.csv"),
         "--out", str(d / "rmse.csv"), "--trajectories", str(d / "traj")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


def _stats(path):
    rows = [ln.split(",") for ln in path.read_text().splitlines()[2:]]
    return {r[0]: dict(mean=float(r[2]), mean_abs=float(r[3]), std=float(r[4])) for r in rows}


class TestPipeline:
    def test_matches_in_process_run(self, run_dir):
        files = pipeline.full_run(parse_config(CONFIG))
        assert (run_dir / "train.csv").read_text() == files["dataset"]
        assert (run_dir / "delays.csv").read_text() == files["delays"]
        assert (run_dir / "power.csv").read_text() == files["calibration"]
        assert (run_dir / "rmse.csv").read_text() == files["rmse"]

    def test_simulate_is_byte_identical(self, run_dir, tmp_path):
        assert main(["simulate", "--config", str(run_dir / "cfg.txt"), "--out", str(tmp_path / "again.csv")]) == 0
        assert (tmp_path / "again.csv").read_bytes() == (run_dir / "train.csv").read_bytes()

    def test_apply_orders_stages(self, run_dir):
        s = _stats(run_dir / "stats.csv")
        assert list(s) == ["raw", "delay_only", "full"]
        assert s["raw"]["mean_abs"] > s["delay_only"]["mean_abs"] > s["full"]["mean_abs"]

    def test_apply_does_not_touch_input(self, run_dir, tmp_path):
        before = (run_dir / "test.csv").read_bytes()
        main(["apply", "--dataset", str(run_dir / "test.csv"), "--delays", str(run_dir / "delays.csv"),
              "--calibration", str(run_dir / "power.csv"), "--out", str(tmp_path / "c.csv")])
        assert (run_dir / "test.csv").read_bytes() == before

    def test_histogram_and_diagnostics(self, run_dir):
        hist = (run_dir / "hist.csv").read_text().splitlines()
        assert hist[:2] == ["# uwbcal-histogram v1", "bin_centre_ns,pre_count,post_count"]
        rows = np.array([[float(v) for v in ln.split(",")] for ln in hist[2:]])
        assert rows[np.argmax(rows[:, 2]), 0] == 0.0
        assert rows[:, 1].sum() == rows[:, 2].sum()
        assert "residual_mode_bin_ns: 0.000000" in (run_dir / "diag.txt").read_text()

    def test_curves_table(self, run_dir):
        lines = (run_dir / "curves.csv").read_text().splitlines()
        pairs = {ln.split(",")[0] for ln in lines[2:]}
        assert "all" in pairs and len(pairs) > 1

    def test_trajectory_files(self, run_dir):
        files = sorted(p.name for p in (run_dir / "traj").iterdir())
        assert files == [f"traj_s1_r0_{m}.csv" for m in ("calibrated", "calibrated_with_variance", "raw")]

    def test_tracks_give_same_delays(self, run_dir, tmp_path):
        args = ["calibrate-delays", "--config", str(run_dir / "cfg.txt"), "--dataset", str(run_dir / "train.csv"),
                "--tracks", str(run_dir / "tracks.csv"), "--out", str(tmp_path / "d.csv")]
        assert main(args) == 0
        a = delaycal.parse_delays((tmp_path / "d.csv").read_text())
        b = delaycal.parse_delays((run_dir / "delays.csv").read_text())
        assert max(abs(a[t] - b[t]) for t in a) < 0.01

    def test_report(self, run_dir, tmp_path, capsys):
        arts = [str(run_dir / n) for n in ("train.csv", "delays.csv", "power.csv", "rmse.csv", "stats.csv", "hist.csv")]
        assert main(["report", *arts, "--out", str(tmp_path / "summary.csv")]) == 0
        out = capsys.readouterr().out
        assert "reduction_vs_raw[calibrated]" in out
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[:2] == ["# uwbcal-summary v1", "artifact,kind,key,value"]
        assert {ln.split(",")[1] for ln in lines[2:]} == {"dataset", "delays", "powercal", "rmse", "biasstats", "histogram"}


class TestGateFlag:
    def test_confidence_changes_rejection(self, run_dir, tmp_path):
        base = ["apply", "--dataset", str(run_dir / "test.csv"), "--delays", str(run_dir / "delays.csv"),
                "--calibration", str(run_dir / "power.csv"), "--out", str(tmp_path / "c.csv")]
        rej = {}
        for conf in (0.9, 0.999):
            assert main(base + ["--report", str(tmp_path / f"s{conf}.csv"), "--gate-confidence", str(conf)]) == 0
            rows = [ln.split(",") for ln in (tmp_path / f"s{conf}.csv").read_text().splitlines()[2:]]
            rej[conf] = {r[0]: float(r[5]) for r in rows}
        assert all(rej[0.9][k] > rej[0.999][k] for k in rej[0.9])

    def test_bad_confidence(self, run_dir, tmp_path):
        argv = ["apply", "--dataset", str(run_dir / "test.csv"), "--delays", str(run_dir / "delays.csv"),
                "--calibration", str(run_dir / "power.csv"), "--out", str(tmp_path / "c.csv"), "--gate-confidence", "1.5"]
        assert main(argv) == 3


class TestZeroCorruption:
    def test_identity_calibration_leaves_ranges(self, run_dir, tmp_path):
        ds = parse_dataset((run_dir / "test.csv").read_text())
        (tmp_path / "d.csv").write_text(
            "# uwbcal-delays v1\ntag_id,delay_ns\n" + "".join(f"{t},0\n" for t in ds.tag_ids)
        )
        zero = ClampedSpline(np.r_[[0.1] * 4, [10.0] * 4], np.zeros(4), 0.1, 10.0)
        unit = ClampedSpline(zero.knots, np.full(4, 0.2), 0.1, 10.0)
        powercal.write_calibration(powercal.PowerCalibration(-82.0, zero, unit, (0.1, 10.0)), tmp_path / "p.csv")
        assert main(["apply", "--dataset", str(run_dir / "test.csv"), "--delays", str(tmp_path / "d.csv"),
                     "--calibration", str(tmp_path / "p.csv"), "--out", str(tmp_path / "c.csv")]) == 0
        rows = np.array([[float(v) for v in ln.split(",")[3:6]] for ln in (tmp_path / "c.csv").read_text().splitlines()[2:]])
        np.testing.assert_allclose(rows[:, 1], rows[:, 0], atol=1e-9, rtol=0)
        np.testing.assert_allclose(rows[:, 2], rows[:, 0], atol=1e-9, rtol=0)


class TestEdgeCases:
    def test_noiseless_delays_match_truth(self, tmp_path, capsys):
        cfg = "simulation.seed = 0\nsimulation.duration_s = 20\nsimulation.channels = delay\n"
        (tmp_path / "c.txt").write_text(cfg)
        main(["simulate", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "t.csv")])
        main(["calibrate-delays", "--dataset", str(tmp_path / "t.csv"), "--out", str(tmp_path / "d.csv")])
        got = delaycal.parse_delays((tmp_path / "d.csv").read_text())
        truth = parse_config(cfg).simulation.delays_ns
        np.testing.assert_allclose([got[t] for t in sorted(got)], truth, atol=1e-6)

    def test_zero_duration_gives_header_only(self, tmp_path):
        (tmp_path / "c.txt").write_text("simulation.seed = 0\nsimulation.duration_s = 0\n")
        assert main(["simulate", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "t.csv")]) == 0
        assert (tmp_path / "t.csv").read_text().splitlines() == [
            "# uwbcal-dataset v1",
            "t_s,initiator,responder,dt41_ns,dt32_ns,dt53_ns,dt64_ns,fpp2_dbm,fpp4_dbm,truth_tof_ns,truth_range_m",
        ]

    def test_l2_mode_report(self, run_dir, tmp_path, capsys):
        args = ["calibrate-delays", "--dataset", str(run_dir / "train.csv"), "--out", str(tmp_path / "d.csv")]
        assert main(args + ["--loss", "l2"]) == 0
        assert "loss: l2" in capsys.readouterr().out


class TestExitCodes:
    @pytest.mark.parametrize(
        "case,code",
        [
            ("missing_seed", 3),
            ("bad_config_key", 3),
            ("bad_dataset", 4),
            ("version", 5),
            ("two_tags", 8),
            ("missing_cal", 16),
            ("missing_config", 16),
        ],
    )
    def test_codes(self, run_dir, tmp_path, case, code):
        d = run_dir
        (tmp_path / "noseed.txt").write_text("simulation.duration_s = 10\n")
        (tmp_path / "badkey.txt").write_text("simulation.colour = red\n")
        (tmp_path / "bad.csv").write_text("hello\n")
        if case == "two_tags":
            ds = parse_dataset((d / "train.csv").read_text())
            write_dataset(ds.subset((ds.initiator == 0) & (ds.responder == 2)), tmp_path / "two.csv")
        (tmp_path / "v9.csv").write_text("# uwbcal-dataset v9\n" + (d / "train.csv").read_text().splitlines()[1] + "\n")
        argv = {
            "missing_seed": ["simulate", "--config", str(tmp_path / "noseed.txt"), "--out", str(tmp_path / "o.csv")],
            "bad_config_key": ["simulate", "--config", str(tmp_path / "badkey.txt"), "--out", str(tmp_path / "o.csv")],
            "bad_dataset": ["calibrate-delays", "--dataset", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o.csv")],
            "version": ["calibrate-delays", "--dataset", str(tmp_path / "v9.csv"), "--out", str(tmp_path / "o.csv")],
            "two_tags": ["calibrate-delays", "--dataset", str(tmp_path / "two.csv"), "--out", str(tmp_path / "o.csv")],
            "missing_cal": ["apply", "--dataset", str(d / "test.csv"), "--delays", str(d / "delays.csv"),
                            "--calibration", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")],
            "missing_config": ["simulate", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o.csv")],
        }[case]
        assert main(argv) == code

    def test_report_mixed_versions(self, run_dir, tmp_path):
        (tmp_path / "old.csv").write_text("# uwbcal-rmse v2\nscenario,robot,mode,rmse_m\n")
        assert main(["report", str(run_dir / "delays.csv"), str(tmp_path / "old.csv")]) == 5

    def test_report_unknown_artifact(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        assert main(["report", str(tmp_path / "x.csv")]) == 4

    def test_report_needs_inputs(self):
        with pytest.raises(SystemExit) as info:
            main(["report"])
        assert info.value.code == 2

    def test_distinct_codes_per_class(self):
        from uwbcal import errors

        classes = [c for c in vars(errors).values() if isinstance(c, type) and issubclass(c, errors.UwbCalError)]
        by_code = {}
        for c in classes:
            by_code.setdefault(c.exit_code, []).append(c.__name__)
        # the only shared codes are documented aliases
        shared = sorted(sorted(v) for v in by_code.values() if len(v) > 1)
        assert shared == [["DegenerateDomain", "InsufficientData"], ["DegenerateInterval", "NoPositiveRoot"]]
        assert all(code != 0 for code in by_code)


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "uwbcal.cli", "report", str(tmp_path / "nope.csv")],
                         capture_output=True, text=True)
    assert out.returncode == 16 and "IoError" in out.stderr
