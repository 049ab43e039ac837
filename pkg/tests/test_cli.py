import json
import subprocess
import sys

import pytest

from hotpatch_sim.cli import main
from hotpatch_sim.scenario import bundled
from hotpatch_sim.trace import read_trace


def write(tmp_path, cfg, **over):
    data = cfg.to_dict()
    data.update(over)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_run_pass_writes_trace(tmp_path, capsys):
    trace = tmp_path / "t.trace"
    assert main(["run", "recovery_torture", "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "verdict: PASS" in out and "profile: freertos" in out
    assert read_trace(trace)


def test_run_fail_exit_code(tmp_path, capsys):
    path = write(tmp_path, bundled("brake_conventional_erase"), duration_us=1_100_000)
    assert main(["run", path]) == 1
    out = capsys.readouterr().out
    assert "verdict: FAIL" in out
    misses = next(line for line in out.splitlines() if "DEADLINE_MISS" in line)
    assert int(misses.split()[-1]) >= 1


def test_profile_flag_and_env(tmp_path, capsys, monkeypatch):
    assert main(["run", "cve_2021_31571", "--profile", "zephyr"]) == 0
    assert "profile: zephyr" in capsys.readouterr().out
    monkeypatch.setenv("PATCHLINGS_PROFILE", "freertos")
    assert main(["run", "cve_2023_3725", "--profile", "zephyr"]) == 0
    assert "profile: freertos" in capsys.readouterr().out
    monkeypatch.setenv("PATCHLINGS_PROFILE", "nope")
    assert main(["run", "cve_2023_3725"]) == 2


def test_malformed_config(tmp_path, capsys):
    data = bundled("recovery_torture").to_dict()
    data["tasks"][0]["priority"] = "high"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    assert main(["run", str(path)]) == 2
    assert "scenario.tasks[0].priority" in capsys.readouterr().err


def test_json_error_position(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n "name": }')
    assert main(["validate", str(path)]) == 1
    assert f"{path}:2:" in capsys.readouterr().err


def test_validate_all_bundled(capsys):
    assert main(["validate"]) == 0
    assert "brake_append_only: ok" in capsys.readouterr().out


def test_missing_file(capsys):
    assert main(["run", "/no/such/file.json"]) == 2


def test_sweep_needs_delivery(capsys, tmp_path):
    assert main(["sweep-power-loss", "cve_2021_32020", "--out", str(tmp_path)]) == 2
    assert "exactly one" in capsys.readouterr().err


def test_report_command(tmp_path, capsys):
    trace = tmp_path / "t.trace"
    main(["run", "cve_2021_32020", "--trace", str(trace)])
    capsys.readouterr()
    assert main(["report", str(trace), str(trace)]) == 0
    out = capsys.readouterr().out
    assert "== response times (us) ==" in out and "== lookup probes ==" in out


def test_report_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.trace"
    bad.write_text("nonsense\n")
    assert main(["report", str(bad)]) == 2


def test_report_empty_trace(tmp_path, capsys):
    empty = tmp_path / "empty.trace"
    empty.write_text("")
    assert main(["report", str(empty)]) == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hotpatch_sim", "validate", "recovery_torture"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "recovery_torture: ok" in proc.stdout


def test_help_lists_commands():
    with pytest.raises(SystemExit):
        main(["--help"])
