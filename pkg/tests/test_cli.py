import json
import subprocess
import sys

import pandas as pd
import pytest

from conftest import write_site_files
from tiltgmm import simulation as sim
from tiltgmm.cli import main
from tiltgmm.protocol import decode_payload, decode_result


@pytest.fixture(scope="module")
def site_files(setting1_replicate, tmp_path_factory):
    _, data, _ = setting1_replicate
    return write_site_files(data, tmp_path_factory.mktemp("sites"))


def export_all(site_files, outdir, masks=("X1,X3", "X2,X3")):
    payloads = []
    for j, mask in zip((1, 2), masks):
        study, ref = site_files[j]
        out = outdir / f"site{j + 1}.fmpay"
        assert main(["site-export", "--study", str(study), "--ref", str(ref), "--mask", mask,
                     "--bounds", "X2=0:1", "--bounds", "X3=0:1", "--discrete", "X1",
                     "--out", str(out)]) == 0
        payloads.append(out)
    return payloads


def aggregate_args(site_files, payloads, out, *extra):
    study, ref = site_files[0]
    args = ["aggregate", "--study", str(study), "--ref", str(ref), "--bounds", "X2=0:1",
            "--bounds", "X3=0:1", "--discrete", "X1", "--out", str(out), *extra]
    for p in payloads:
        args += ["--payload", str(p)]
    return args


class TestFilePipeline:
    @pytest.mark.parametrize("method,flags", [("dist-GMM-C", []), ("GENMETA", ["--no-tilt"])])
    def test_matches_in_process_bit_for_bit(self, setting1_replicate, site_files, tmp_path,
                                            method, flags):
        setting, data, _ = setting1_replicate
        payloads = export_all(site_files, tmp_path)
        out = tmp_path / "result.fmres"
        assert main(aggregate_args(site_files, payloads, out, *flags)) == 0
        result = decode_result(out.read_bytes())
        expected = sim.run_method(method, data, setting)
        got = dict(zip(("beta1", "beta2", "beta3"), result.beta_hat[1:]))
        ses = dict(zip(("beta1", "beta2", "beta3"), result.standard_errors[1:]))
        for c in sim.COEFFICIENTS:
            assert got[c] == expected.estimates[c]
            assert ses[c] == expected.ses[c]

    def test_site_id_defaults_to_file_stem(self, site_files, tmp_path):
        payloads = export_all(site_files, tmp_path)
        assert [decode_payload(p.read_bytes()).site_id for p in payloads] == ["site2", "site3"]

    def test_prints_estimate_table(self, site_files, tmp_path, capsys):
        payloads = export_all(site_files, tmp_path)
        capsys.readouterr()
        main(aggregate_args(site_files, payloads, tmp_path / "r.fmres"))
        out = capsys.readouterr().out
        for name in ("(Intercept)", "X1", "X2", "X3"):
            assert name in out

    def test_unidentified_model_exit_2(self, site_files, tmp_path, capsys):
        payloads = export_all(site_files, tmp_path, masks=("X1", "X2"))
        code = main(aggregate_args(site_files, payloads, tmp_path / "r.fmres"))
        assert code == 2
        assert "model unidentified" in capsys.readouterr().err

    def test_corrupt_payload_is_usage_error(self, site_files, tmp_path, capsys):
        payloads = export_all(site_files, tmp_path)
        raw = payloads[0].read_bytes().replace(b'"schema_version":1', b'"schema_version":9')
        payloads[0].write_bytes(raw)
        assert main(aggregate_args(site_files, payloads, tmp_path / "r.fmres")) == 1
        assert "expected 1, found 9" in capsys.readouterr().err


class TestSimulate:
    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["simulate", "--settings", "1", "--reps", "2", "--seed", "1",
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        table = pd.read_csv(a)
        assert list(table.columns) == sim.METRIC_COLUMNS
        assert len(table) == 4 * 3

    def test_matches_library(self, tmp_path):
        out = tmp_path / "t.csv"
        main(["simulate", "--settings", "4", "--methods", "dist-GMM-C,Local", "--reps", "2",
              "--seed", "3", "--out", str(out)])
        lib = sim.run_study((4,), ("dist-GMM-C", "Local"), 2, 3)
        assert out.read_text() == sim.emit_report(lib)

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({"settings": [2], "methods": ["GENMETA"], "reps": 2,
                                   "seed": 5, "format": "markdown"}))
        a, b = tmp_path / "a.md", tmp_path / "b.csv"
        assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == 0
        assert a.read_text().startswith("| Setting |")
        assert main(["simulate", "--config", str(cfg), "--format", "csv", "--out", str(b)]) == 0
        assert b.read_text() == sim.emit_report(sim.run_study((2,), ("GENMETA",), 2, 5))

    def test_records_file(self, tmp_path):
        rec = tmp_path / "records.csv"
        main(["simulate", "--settings", "1", "--methods", "Local", "--reps", "2",
              "--out", str(tmp_path / "t.csv"), "--records", str(rec)])
        assert len(pd.read_csv(rec)) == 2 * 3


class TestSweepsAndReport:
    def test_sweep_grid(self, tmp_path):
        out = tmp_path / "g.csv"
        assert main(["sweep-grid", "--settings", "1", "--m-values", "20,40", "--reps", "2",
                     "--out", str(out)]) == 0
        assert len(pd.read_csv(out)) == 2 * 3

    def test_sweep_ref(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["sweep-ref", "--settings", "3", "--n-values", "100,200", "--reps", "2",
                     "--methods", "dist-GMM-C", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert len(table) == 2 * 4
        assert set(table.coefficient) == {"beta1", "beta2", "beta3", "joint"}

    def test_report_markdown(self, tmp_path, capsys):
        csv = tmp_path / "t.csv"
        sim.emit_report(sim.run_study((1,), sim.METHODS, 2, 1), csv)
        capsys.readouterr()
        assert main(["report", "--in", str(csv)]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 2 + 3


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["simulate", "--out", "x.csv", "--bogus"],
        ["simulate", "--settings", "5", "--out", "x.csv"],
        ["simulate", "--methods", "oracle", "--out", "x.csv"],
        ["simulate", "--reps", "0", "--out", "x.csv"],
        ["simulate", "--settings", "1,a", "--out", "x.csv"],
        ["simulate", "--out", "/no/such/dir/x.csv"],
        ["site-export", "--study", "missing.csv", "--ref", "missing.csv", "--out", "p.fmpay"],
        ["report", "--in", "missing.csv"],
        ["site-export", "--study", "s.csv", "--ref", "r.csv", "--out", "p.fmpay",
         "--bounds", "X2=1:0"],
    ])
    def test_exit_1(self, argv, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(argv) == 1
        assert capsys.readouterr().err.startswith("tiltgmm")

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"reps": 2, "replicates": 3}')
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o.csv")]) == 1

    def test_missing_mask_column(self, site_files, tmp_path, capsys):
        study, ref = site_files[1]
        code = main(["site-export", "--study", str(study), "--ref", str(ref), "--mask", "X1,X2",
                     "--out", str(tmp_path / "p.fmpay")])
        assert code == 1
        assert "missing column(s) X2" in capsys.readouterr().err

    def test_not_a_metrics_table(self, site_files, capsys):
        assert main(["report", "--in", str(site_files[0][0])]) == 1


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "tiltgmm", "--help"], capture_output=True,
                              text=True, check=False)
        assert proc.returncode == 0
        for cmd in ("site-export", "aggregate", "simulate", "sweep-ref", "sweep-grid", "report"):
            assert cmd in proc.stdout

    def test_usage_error_exit_status(self):
        proc = subprocess.run([sys.executable, "-m", "tiltgmm", "simulate"], capture_output=True,
                              text=True, check=False)
        assert proc.returncode == 1
        assert "--out" in proc.stderr
