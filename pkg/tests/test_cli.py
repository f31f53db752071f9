import json

import pytest

from bootkeeper.cli import main


@pytest.fixture(scope="module")
def corpus_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert main(["corpus", str(out)]) == 0
    return out


def test_validate_benign_exit_zero(corpus_files, tmp_path, capsys):
    report_path = tmp_path / "r.json"
    code = main(["validate", str(corpus_files / "b_o2.fw"), "--report", str(report_path)])
    assert code == 0
    payload = json.loads(report_path.read_text())
    assert payload["overall"] == "valid"
    out = capsys.readouterr().out
    assert "valid" in out


def test_validate_attack_exit_one(corpus_files, capsys):
    code = main(["validate", str(corpus_files / "a3.fw")])
    assert code == 1
    out = capsys.readouterr().out
    assert "P4=fail" in out


def test_validate_forced_timeout_exit_three(corpus_files):
    # a budget far below what the analysis needs forces "inconclusive"
    assert main(["validate", str(corpus_files / "b_o0.fw"), "--timeout", "0.05"]) == 3


def test_validate_timeout_honored(corpus_files):
    import time

    t0 = time.monotonic()
    code = main(["validate", str(corpus_files / "b_o0.fw"), "--timeout", "0.5"])
    elapsed = time.monotonic() - t0
    assert code in (0, 3)
    assert elapsed <= 0.5 * 1.1 + 0.4  # stage granularity slack


def test_validate_json_output(corpus_files, capsys):
    code = main(["validate", str(corpus_files / "a1.fw"), "--json"])
    assert code == 1
    payload = json.loads(capsys.readouterr().out)
    assert payload["overall"] == "invalid"


def test_validate_missing_file():
    assert main(["validate", "/nonexistent/x.fw"]) == 2


def test_run_prints_pcr0_and_log(corpus_files, capsys):
    code = main(["run", str(corpus_files / "b_os.fw"), "--tpm-log"])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    log_lines = [l for l in out if l.startswith("step=")]
    assert len(log_lines) == 5
    assert all("addr=0xfed40024" in l for l in log_lines)
    assert out[-1].startswith("PCR0=") and len(out[-1]) == len("PCR0=") + 40


def test_run_step_budget_exit_two(corpus_files, capsys):
    assert main(["run", str(corpus_files / "b_os.fw"), "--max-steps", "10"]) == 2
    assert "budget" in capsys.readouterr().err


def test_asm_roundtrip(tmp_path, capsys):
    src = tmp_path / "t.fasm"
    src.write_text(".entry start\nstart: MOVI r0, 42\nHALT\n")
    out = tmp_path / "t.fw"
    assert main(["asm", str(src), "-o", str(out)]) == 0
    assert main(["run", str(out)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PCR0=")


def test_asm_reports_syntax_errors(tmp_path, capsys):
    src = tmp_path / "bad.fasm"
    src.write_text("start: FROB r1\n")
    assert main(["asm", str(src), "-o", str(tmp_path / "x.fw")]) == 2
    assert "line 1" in capsys.readouterr().err


def test_cfg_dot_export(corpus_files, tmp_path):
    out = tmp_path / "g.dot"
    assert main(["cfg", str(corpus_files / "b_os.fw"), "--dot", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("digraph")
    assert "indirect" in text


def test_sigdb_export(tmp_path):
    out = tmp_path / "sigs.json"
    assert main(["sigdb", "export", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert "sha1-compression" in payload["composite"]


def test_validate_batch_reports_and_figures(corpus_files, tmp_path):
    outdir = tmp_path / "reports"
    figdir = tmp_path / "figs"
    code = main([
        "validate", str(corpus_files / "a5.fw"), str(corpus_files / "a1.fw"),
        "--report", str(outdir), "--figures", str(figdir),
    ])
    assert code == 1
    assert (outdir / "a5.report.json").exists()
    assert (outdir / "a1.report.json").exists()
    assert (figdir / "matrix.png").exists()
    assert (figdir / "summary.csv").exists()
    assert (figdir / "a5_coverage.png").exists()
    summary = (figdir / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("image,sha1,overall")
    assert len(summary) == 3
