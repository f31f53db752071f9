from bootkeeper.isa import serialize
from bootkeeper.report import render_all, save_coverage_figure, save_matrix_figure, write_summary_csv
from bootkeeper.validator import validate


def test_render_all_outputs(corpus_build, tmp_path):
    _, images = corpus_build
    reports = [
        ("b_o2.fw", validate(serialize(images["B-O2"]))),
        ("a4.fw", validate(serialize(images["A4"]))),
    ]
    written = render_all(reports, tmp_path)
    names = {p.name for p in written}
    assert {"b_o2_coverage.png", "a4_coverage.png", "matrix.png", "summary.csv"} <= names
    for p in written:
        assert p.stat().st_size > 0
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert rows[0] == "image,sha1,overall,P1,P2,P3,P4,total_ms"
    assert rows[1].split(",")[2] == "valid"
    assert rows[2].split(",")[2] == "invalid"


def test_coverage_figure_handles_missing_coverage(tmp_path):
    # inconclusive reports carry no coverage block; the figure still renders
    report = validate(b"FWIM truncated")
    assert report.coverage is None
    save_coverage_figure(report, tmp_path / "cov.png")
    assert (tmp_path / "cov.png").stat().st_size > 0


def test_matrix_figure_single_report(corpus_build, tmp_path):
    _, images = corpus_build
    report = validate(serialize(images["A1"]))
    save_matrix_figure([("a1.fw", report)], tmp_path / "m.png")
    write_summary_csv([("a1.fw", report)], tmp_path / "s.csv")
    assert (tmp_path / "m.png").stat().st_size > 0
    assert "invalid" in (tmp_path / "s.csv").read_text()
