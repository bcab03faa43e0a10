"""End-to-end CLI behavior: subcommands, config precedence, exit codes."""

import json

import numpy as np
import pytest

from isacfl.cli import main, read_metrics_csv, summarize
from isacfl.datagen import generate_dataset, build_scenario, write_dataset
from isacfl.svgplot import line_chart


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    rc = main(
        [
            "gen-data",
            "--scenario",
            "heterogeneous",
            "--seed",
            "4",
            "--samples",
            "80",
            "--n-t",
            "3",
            "--n-r",
            "3",
            "--out",
            str(root / "toy"),
        ]
    )
    assert rc == 0
    return root / "toy"


def run_toy(toy_dataset, out_dir, *extra):
    args = [
        "run",
        "--dataset",
        str(toy_dataset),
        "--out",
        str(out_dir),
        "--rounds",
        "2",
        "--local-epochs",
        "1",
        "--batch-size",
        "16",
        "--hidden",
        "6",
        "--seed",
        "4",
        "--quiet",
        *extra,
    ]
    return main(args)


class TestGenData:
    def test_files_written(self, toy_dataset):
        names = sorted(p.name for p in toy_dataset.glob("bs*.ds"))
        assert names == ["bs0.ds", "bs1.ds", "bs2.ds"]

    def test_bit_identical_regeneration(self, toy_dataset, tmp_path):
        rc = main(
            [
                "gen-data", "--scenario", "heterogeneous", "--seed", "4", "--samples", "80",
                "--n-t", "3", "--n-r", "3", "--out", str(tmp_path / "again"),
            ]
        )
        assert rc == 0
        for name in ("bs0.ds", "bs1.ds", "bs2.ds"):
            assert (tmp_path / "again" / name).read_bytes() == (toy_dataset / name).read_bytes()

    def test_invalid_variant_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--scenario", "banana"])
        assert exc.value.code == 2

    def test_help_lists_all_variants(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for variant in (
            "homogeneous",
            "heterogeneous",
            "equal_ue_homogeneous",
            "equal_ue_heterogeneous",
        ):
            assert variant in out


class TestRun:
    def test_csv_schema_and_rows(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "r") == 0
        rows = read_metrics_csv(tmp_path / "r" / "metrics.csv")
        assert len(rows) == 2 * 3  # rounds x cells
        assert all(np.isfinite(row["utility"]) for row in rows)
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary["rounds"] == 2 and summary["n_bs"] == 3

    def test_local_only_pi_column_zero(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "r", "--strategy", "local_only") == 0
        rows = read_metrics_csv(tmp_path / "r" / "metrics.csv")
        assert all(row["pi"] == 0.0 for row in rows)

    def test_missing_dataset_names_generator(self, tmp_path, capsys):
        rc = main(["run", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path / "o")])
        assert rc == 3
        err = capsys.readouterr().err
        assert "gen-data" in err

    def test_existing_output_needs_flag(self, toy_dataset, tmp_path, capsys):
        assert run_toy(toy_dataset, tmp_path / "r") == 0
        assert run_toy(toy_dataset, tmp_path / "r") == 2
        assert run_toy(toy_dataset, tmp_path / "r", "--force") == 0

    def test_summary_matches_csv_rederivation(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "r") == 0
        rows = read_metrics_csv(tmp_path / "r" / "metrics.csv")
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        re_derived = summarize(rows)
        assert abs(summary["final"]["system_utility"] - re_derived["final"]["system_utility"]) < 1e-9
        assert abs(summary["best"]["system_utility"] - re_derived["best"]["system_utility"]) < 1e-9
        assert abs(summary["max_pi_spread"] - re_derived["max_pi_spread"]) < 1e-9

    def test_resume_matches_uninterrupted(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "full", "--rounds", "4", "--checkpoint-every", "1") == 0
        assert run_toy(toy_dataset, tmp_path / "part", "--rounds", "2", "--checkpoint-every", "1") == 0
        assert run_toy(toy_dataset, tmp_path / "part", "--rounds", "4", "--checkpoint-every", "1", "--resume") == 0
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()

    def test_config_file_and_flag_precedence(self, toy_dataset, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(
            "strategy = fixed_pfl\n"
            "pi_fixed = 0.25   # kept\n"
            "rounds = 2\n"
            "local_epochs = 1\n"
            "batch_size = 16\n"
            "hidden = 6\n"
            "seed = 4\n"
            f"dataset = {toy_dataset}\n"
            f"out = {tmp_path / 'cfg_run'}\n"
        )
        # flag overrides the config's strategy; pi_fixed comes from the file
        rc = main(["run", "--config", str(cfg), "--strategy", "fixed_pfl", "--quiet"])
        assert rc == 0
        rows = read_metrics_csv(tmp_path / "cfg_run" / "metrics.csv")
        assert all(row["pi"] == 0.25 for row in rows)

    def test_bad_config_key(self, toy_dataset, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("flux_capacitor = 1\n")
        rc = main(
            ["run", "--config", str(cfg), "--dataset", str(toy_dataset), "--out", str(tmp_path / "x"), "--quiet"]
        )
        assert rc == 2

    def test_nan_dataset_exits_4(self, tmp_path):
        scn = build_scenario("heterogeneous", n_t=3, n_r=3)
        data = generate_dataset(scn, 40, seed=1)
        data[0].comm_direct[:] = np.nan
        write_dataset(tmp_path / "bad", data)
        rc = main(
            [
                "run", "--dataset", str(tmp_path / "bad"), "--out", str(tmp_path / "o"),
                "--rounds", "1", "--local-epochs", "1", "--batch-size", "16", "--hidden", "6", "--quiet",
            ]
        )
        assert rc == 4


class TestPlot:
    def test_polyline_counts_and_determinism(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "r") == 0
        csv_path = str(tmp_path / "r" / "metrics.csv")
        assert main(["plot", csv_path, "--labels", "em", "--out-dir", str(tmp_path / "p1")]) == 0
        assert main(["plot", csv_path, "--labels", "em", "--out-dir", str(tmp_path / "p2")]) == 0
        utility = (tmp_path / "p1" / "utility.svg").read_text()
        pi = (tmp_path / "p1" / "pi.svg").read_text()
        assert utility.count("<polyline") == 1       # one series
        assert pi.count("<polyline") == 3            # one per BS
        assert utility == (tmp_path / "p2" / "utility.svg").read_text()
        assert pi == (tmp_path / "p2" / "pi.svg").read_text()

    def test_overlay_two_runs(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "a") == 0
        assert run_toy(toy_dataset, tmp_path / "b", "--strategy", "fedavg") == 0
        rc = main(
            [
                "plot",
                str(tmp_path / "a" / "metrics.csv"),
                str(tmp_path / "b" / "metrics.csv"),
                "--labels",
                "em,fedavg",
                "--out-dir",
                str(tmp_path / "p"),
            ]
        )
        assert rc == 0
        assert (tmp_path / "p" / "utility.svg").read_text().count("<polyline") == 2

    def test_empty_csv_errors(self, tmp_path):
        empty = tmp_path / "metrics.csv"
        empty.write_text("round,bs,pi,loss,comm_rate,radar_rate,utility,system_utility\n")
        assert main(["plot", str(empty), "--out-dir", str(tmp_path)]) == 3

    def test_label_count_mismatch(self, toy_dataset, tmp_path):
        assert run_toy(toy_dataset, tmp_path / "r") == 0
        rc = main(["plot", str(tmp_path / "r" / "metrics.csv"), "--labels", "a,b", "--out-dir", str(tmp_path)])
        assert rc == 2


class TestCompare:
    def test_table_lists_all_runs(self, toy_dataset, tmp_path, capsys):
        assert run_toy(toy_dataset, tmp_path / "a") == 0
        assert run_toy(toy_dataset, tmp_path / "b", "--strategy", "local_only") == 0
        rc = main(
            [
                "compare",
                str(tmp_path / "a" / "metrics.csv"),
                str(tmp_path / "b" / "metrics.csv"),
                "--labels",
                "em,local",
                "--out",
                str(tmp_path / "table.txt"),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "em" in out and "local" in out and "best:" in out
        assert (tmp_path / "table.txt").is_file()


class TestSvgPlot:
    def test_requires_series(self):
        with pytest.raises(ValueError):
            line_chart([], "t", "x", "y")

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            line_chart([("a", [1, 2], [1.0])], "t", "x", "y")

    def test_basic_structure(self):
        svg = line_chart([("a", [0, 1, 2], [1.0, 4.0, 2.0])], "title", "x", "y", subtitle="sub")
        assert svg.startswith("<svg ") and svg.rstrip().endswith("</svg>")
        assert "title" in svg and "sub" in svg
        assert svg.count("<polyline") == 1
