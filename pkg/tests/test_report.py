import re

import pytest

from ssmd.report import ReportError, read_series, report_curves, svg_plot
from ssmd.training import LossCurve


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_point_csv_single_marker(tmp_path):
    p = write(tmp_path, "one.csv", "step,stage,loss\n1,0,0.5\n")
    svg = report_curves([p], tmp_path / "one.svg")
    assert svg.count('class="marker"') == 1 and 'class="series"' not in svg
    assert (tmp_path / "one.svg").read_text() == svg


def test_two_curve_overlay_labels_both(tmp_path):
    a = write(tmp_path, "a.csv", "step,loss\n1,0.9\n2,0.7\n3,0.6\n")
    b = write(tmp_path, "b.csv", "step,loss\n1,0.8\n2,0.5\n")
    svg = report_curves([a, b], labels=["transfer", "random init"])
    assert svg.count('class="series"') == 2
    legends = re.findall(r'class="legend"[^>]*>([^<]+)<', svg)
    assert legends == ["transfer", "random init"]


def test_stage_markers_from_staged_curve(tmp_path):
    c = LossCurve()
    for i in range(1, 7):
        c.add(i, 1 if i <= 3 else 2, 1.0 / i)
    p = write(tmp_path, "staged.csv", c.to_csv())
    svg = report_curves([p])
    assert svg.count('class="stage-marker"') == 1


def test_deterministic_output(tmp_path):
    p = write(tmp_path, "a.csv", "step,loss\n1,0.9\n2,0.7\n")
    assert report_curves([p]) == report_curves([p])


def test_setting_der_table():
    s = read_series("setting,DER\nn=2,12.5\nn=6,10.0\n", "der")
    assert s.ticks == ["n=2", "n=6"]
    svg = svg_plot([s], xlabel="setting", ylabel="DER")
    assert "n=6" in svg


@pytest.mark.parametrize("text", ["", "step,loss\n", "foo,bar\n1,2\n", "step,loss\n1,abc\n", "step,loss\n1,nan\n"])
def test_malformed_csv(text, tmp_path):
    p = write(tmp_path, "bad.csv", text)
    with pytest.raises(ReportError):
        report_curves([p])


def test_label_count_mismatch(tmp_path):
    p = write(tmp_path, "a.csv", "step,loss\n1,0.9\n")
    with pytest.raises(ReportError):
        report_curves([p], labels=["x", "y"])
