"""End-to-end command-line flows against a temporary state directory."""

import json

import pytest
from click.testing import CliRunner

from biochain.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, out, *args, expect=0):
    result = runner.invoke(main, ["--out", str(out), *args], catch_exceptions=False)
    assert result.exit_code == expect, result.output
    return result


def bootstrap(runner, out, seed="3", size="40"):
    invoke(runner, out, "--seed", seed, "gen", "--gallery-size", size, "--template-dim", "8")
    invoke(runner, out, "enroll")


class TestGenEnroll:
    def test_gen_writes_gallery_and_config(self, runner, tmp_path):
        out = tmp_path / "run"
        result = invoke(runner, out, "--seed", "5", "gen", "--gallery-size", "12")
        assert "12 templates" in result.output
        assert (out / "gallery.txt").exists()
        config = json.loads((out / "config.json").read_text())
        assert config["seed"] == 5
        assert config["gallery_size"] == 12

    def test_gen_is_deterministic(self, runner, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        invoke(runner, a, "--seed", "5", "gen")
        invoke(runner, b, "--seed", "5", "gen")
        assert (a / "gallery.txt").read_bytes() == (b / "gallery.txt").read_bytes()

    def test_enroll_reports_shapes_and_hashes(self, runner, tmp_path):
        out = tmp_path / "run"
        invoke(runner, out, "--seed", "7", "gen", "--gallery-size", "120", "--template-dim", "16")
        result = invoke(runner, out, "enroll")
        assert "3 chiefs" in result.output
        assert "tree root hash:" in result.output
        for name in ("archive.txt", "snapshot.bin", "chain_params.bin"):
            assert (out / name).exists()

    def test_enroll_without_gallery_fails(self, runner, tmp_path):
        result = runner.invoke(main, ["--out", str(tmp_path / "none"), "enroll"])
        assert result.exit_code != 0


class TestIdentify:
    def test_archived_identity_scores_zero(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        result = invoke(runner, out, "identify", "--identity", "id0005")
        assert "identity: id0005" in result.output
        assert "score: 0 " in result.output

    def test_unknown_identity_rejected(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        result = runner.invoke(main, ["--out", str(out), "identify", "--identity", "ghost"])
        assert result.exit_code != 0

    def test_probe_file(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        gallery = (out / "gallery.txt").read_text().splitlines()
        probe_path = tmp_path / "probe.txt"
        probe_path.write_text(gallery[0].replace(" 40", " 1", 1) + "\n")
        # single-record gallery file: reuse record 3 under a fresh header
        header = gallery[0].split()
        record = gallery[3]
        probe_path.write_text(f"{header[0]} {header[1]} {header[2]} 1\n{record}\n")
        result = invoke(runner, out, "identify", "--probe-file", str(probe_path))
        assert f"identity: {record.split()[0]}" in result.output

    def test_wrong_dimension_probe_rejected(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        probe_path = tmp_path / "probe.txt"
        probe_path.write_text("biochain-gallery 1 3 1\nstray 1 2 3\n")
        result = runner.invoke(main, ["--out", str(out), "identify",
                                      "--probe-file", str(probe_path)])
        assert result.exit_code != 0

    def test_ledger_grows_across_queries(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        invoke(runner, out, "identify", "--identity", "id0001")
        size_one = (out / "ledger.bin").stat().st_size
        invoke(runner, out, "identify", "--identity", "id0002")
        assert (out / "ledger.bin").stat().st_size > size_one


class TestTamperAuditRestore:
    def test_clean_audit_exits_zero(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        result = invoke(runner, out, "audit")
        assert "chain: intact" in result.output
        assert "tree: intact" in result.output

    def test_template_tamper_cycle(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        invoke(runner, out, "tamper", "--fraction", "0.2")
        audit_result = runner.invoke(main, ["--out", str(out), "audit"])
        assert audit_result.exit_code == 1
        assert "tampered leaf" in audit_result.output
        restore_result = invoke(runner, out, "restore")
        assert "post-restore audit: clean" in restore_result.output
        invoke(runner, out, "audit")

    def test_chain_tamper_cycle(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        invoke(runner, out, "tamper", "--block", "0", "--epsilon", "0.001")
        audit_result = runner.invoke(main, ["--out", str(out), "audit"])
        assert audit_result.exit_code == 1
        assert "first tampered block index 0" in audit_result.output
        # a tampered chain refuses queries
        blocked = runner.invoke(main, ["--out", str(out), "identify", "--identity", "id0001"])
        assert blocked.exit_code != 0
        invoke(runner, out, "restore")
        invoke(runner, out, "identify", "--identity", "id0001")

    def test_tamper_requires_a_target(self, runner, tmp_path):
        out = tmp_path / "run"
        bootstrap(runner, out)
        result = runner.invoke(main, ["--out", str(out), "tamper"])
        assert result.exit_code != 0


class TestExperimentCommand:
    def test_experiment_writes_all_artifacts(self, runner, tmp_path):
        out = tmp_path / "exp"
        config = {
            "seed": 2,
            "gallery_size": 24,
            "template_dim": 8,
            "probes_per_identity": 2,
            "ranks": 5,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config))
        result = runner.invoke(
            main, ["--out", str(out), "--config", str(cfg_path), "experiment"],
            catch_exceptions=False,
        )
        assert result.exit_code == 0, result.output
        for name in ("report.txt", "summary.json", "timings.txt"):
            assert (out / name).exists()
        summary = json.loads((out / "summary.json").read_text())
        before = summary["results"]["before_tamper"]
        after = summary["results"]["after_tamper"]
        assert before["proposed"]["rank1"] == after["proposed"]["rank1"]
        assert after["traditional"]["rank1"] < before["traditional"]["rank1"]

    def test_report_command_prints_report(self, runner, tmp_path):
        out = tmp_path / "exp"
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({
            "seed": 2, "gallery_size": 12, "template_dim": 8,
            "probes_per_identity": 1, "ranks": 3,
        }))
        runner.invoke(main, ["--out", str(out), "--config", str(cfg_path), "experiment"],
                      catch_exceptions=False)
        result = invoke(runner, out, "report")
        assert "experiment report" in result.output
        assert "proposed | after_tamper" in result.output

    def test_report_without_experiment_fails(self, runner, tmp_path):
        result = runner.invoke(main, ["--out", str(tmp_path / "empty"), "report"])
        assert result.exit_code != 0
