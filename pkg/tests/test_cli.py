import json
from pathlib import Path

import numpy as np
import pytest

from gridpatch.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_FLAGGED,
    EXIT_NO_SIDECAR,
    EXIT_OK,
    build_parser,
    main,
)
from gridpatch.grid import GridShape, TrialGrid, format_trial


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    """One small simulated trial produced through the real CLI."""
    out = tmp_path_factory.mktemp("sims")
    priors = out / "priors.json"
    priors.write_text(
        json.dumps(
            {
                "mu": ["uniform", -8.0, 8.0],
                "sigma": ["point", 1.0],
                "rho_r": ["point", 0.0],
                "rho_c": ["point", 0.0],
                "phi": ["point", 0.0],
                "families": {"iid": 1.0},
            }
        )
    )
    code = main([
        "simulate", "--shape", "5x8", "--n", "1", "--seed", "17",
        "--priors", str(priors), "--out", str(out / "trials"),
    ])
    assert code == EXIT_OK
    return out


def write_two_block_trial(path, seed=54, gap=9.0):
    rng = np.random.default_rng(seed)
    shape = GridShape.full(6, 10)
    values = {
        c: (gap if c[1] >= 5 else 0.0) + rng.standard_normal()
        for c in sorted(shape.present)
    }
    path.write_text(format_trial(TrialGrid(shape, values)))


def write_flat_trial(path, seed=59):
    rng = np.random.default_rng(seed)
    shape = GridShape.full(6, 10)
    values = {c: float(rng.standard_normal()) for c in sorted(shape.present)}
    path.write_text(format_trial(TrialGrid(shape, values)))


class TestParser:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["--help"])
        assert exc.value.code == 0
        assert "exit codes" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["detect", "--bogus"])
        assert exc.value.code == 2

    def test_detect_defaults(self):
        args = build_parser().parse_args(["detect", "--input", "x.csv"])
        assert args.score == "cv_nll"
        assert args.tree == "binary"
        assert args.threshold == "decisive"
        assert args.families == "iid,ar1r,ar1c,ar1rc"


class TestSimulate:
    def test_writes_csv_and_sidecar(self, sim_dir):
        trials = sim_dir / "trials"
        assert (trials / "trial_0000.csv").exists()
        assert (trials / "trial_0000.truth.json").exists()
        doc = json.loads((trials / "trial_0000.truth.json").read_text())
        assert set(doc["true_partition"].keys()) == {"0", "1"}

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        priors = sim_dir / "priors.json"
        code = main([
            "simulate", "--shape", "5x8", "--n", "1", "--seed", "17",
            "--priors", str(priors), "--out", str(tmp_path / "again"),
        ])
        assert code == EXIT_OK
        a = (sim_dir / "trials" / "trial_0000.csv").read_bytes()
        b = (tmp_path / "again" / "trial_0000.csv").read_bytes()
        assert a == b
        ta = (sim_dir / "trials" / "trial_0000.truth.json").read_bytes()
        tb = (tmp_path / "again" / "trial_0000.truth.json").read_bytes()
        assert ta == tb

    def test_zero_trials_is_usage_error(self, tmp_path):
        code = main(["simulate", "--shape", "4x4", "--n", "0", "--out", str(tmp_path)])
        assert code == 2

    def test_bad_shape_is_config_error(self, tmp_path):
        code = main(["simulate", "--shape", "4by4", "--n", "1", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG


class TestDetect:
    def test_flagged_two_block_trial(self, tmp_path, capsys):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        report = tmp_path / "report.json"
        code = main([
            "detect", "--input", str(trial_csv), "--families", "iid",
            "--out", str(report), "--seed", "0",
        ])
        assert code == EXIT_FLAGGED
        line = capsys.readouterr().out.strip().splitlines()[-1]
        assert line.startswith("trial=trial.csv patches=")
        assert "flag=true" in line
        doc = json.loads(report.read_text())
        assert doc["flagged"] is True
        assert doc["m"] >= 2
        assert set(doc["stages"]) == {"identified", "cycle1", "cycle2", "final"}

    def test_stationary_trial_exit_zero(self, tmp_path):
        trial_csv = tmp_path / "flat.csv"
        write_flat_trial(trial_csv)
        code = main(["detect", "--input", str(trial_csv), "--families", "iid"])
        assert code == EXIT_OK

    def test_missing_input_is_data_error(self, tmp_path):
        code = main(["detect", "--input", str(tmp_path / "nope.csv")])
        assert code == EXIT_DATA

    def test_report_bytes_deterministic(self, tmp_path):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        outs = []
        for name in ("a.json", "b.json"):
            path = tmp_path / name
            main(["detect", "--input", str(trial_csv), "--families", "iid",
                  "--out", str(path)])
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_dump_tree_writes_sidecar(self, tmp_path):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        report = tmp_path / "report.json"
        main(["detect", "--input", str(trial_csv), "--families", "iid",
              "--out", str(report), "--dump-tree"])
        tree_doc = json.loads((tmp_path / "report.tree.json").read_text())
        assert tree_doc["kind"] == "binary"


class TestEvaluate:
    def test_end_to_end_rows(self, sim_dir, tmp_path):
        out = tmp_path / "bench"
        code = main([
            "evaluate", "--trials", str(sim_dir / "trials"),
            "--variants", "top_down,binary_oracle",
            "--families", "iid", "--out", str(out), "--seed", "0",
        ])
        assert code == EXIT_OK
        lines = (out / "summary.csv").read_text().splitlines()
        assert len(lines) == 3  # header + 1 trial x 2 variants
        assert (out / "aggregates.json").exists()
        assert (out / "timings.csv").exists()

    def test_missing_sidecar_exit(self, tmp_path):
        trials = tmp_path / "trials"
        trials.mkdir()
        write_flat_trial(trials / "trial_0000.csv")
        code = main([
            "evaluate", "--trials", str(trials), "--variants", "top_down",
            "--out", str(tmp_path / "bench"),
        ])
        assert code == EXIT_NO_SIDECAR

    def test_unknown_variant_is_config_error(self, sim_dir, tmp_path):
        code = main([
            "evaluate", "--trials", str(sim_dir / "trials"),
            "--variants", "sideways", "--out", str(tmp_path / "bench"),
        ])
        assert code == EXIT_CONFIG


class TestRender:
    def test_trial_svg(self, tmp_path):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        out = tmp_path / "trial.svg"
        assert main(["render", "--input", str(trial_csv), "--out", str(out)]) == EXIT_OK
        svg = out.read_text()
        assert svg.startswith("<svg ")
        assert svg.count("<rect") == 1 + 60

    def test_report_overlay_and_determinism(self, tmp_path):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        report = tmp_path / "report.json"
        main(["detect", "--input", str(trial_csv), "--families", "iid",
              "--out", str(report)])
        svg_a = tmp_path / "a.svg"
        svg_b = tmp_path / "b.svg"
        for out in (svg_a, svg_b):
            code = main([
                "render", "--input", str(trial_csv), "--report", str(report),
                "--out", str(out),
            ])
            assert code == EXIT_OK
        assert svg_a.read_bytes() == svg_b.read_bytes()
        assert "<line" in svg_a.read_text()

    def test_report_only_render(self, tmp_path):
        trial_csv = tmp_path / "trial.csv"
        write_two_block_trial(trial_csv)
        report = tmp_path / "report.json"
        main(["detect", "--input", str(trial_csv), "--families", "iid",
              "--out", str(report)])
        out = tmp_path / "patches.svg"
        assert main(["render", "--input", str(report), "--out", str(out)]) == EXIT_OK
        assert out.read_text().count("<rect") == 1 + 60
