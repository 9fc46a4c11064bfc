import xml.etree.ElementTree as ET

from nanotune.experiments import write_rows
from nanotune.plots import line_chart, render_csv

SVG = "{http://www.w3.org/2000/svg}"


def rows():
    return [
        {"strategy": s, "set_size": n, "mae": m, "mae_ci_low": m - 0.02, "mae_ci_high": m + 0.02, "baseline_mae": 0.6}
        for s, base in (("AllWB", 0.3), ("FcWB", 0.45))
        for n, m in ((32, base + 0.1), (128, base + 0.05), (512, base))
    ]


def test_chart_has_one_line_and_band_per_series():
    root = ET.fromstring(line_chart(rows(), "set_size", "mae", "strategy", baseline=0.6, log_x=True))
    assert len(root.findall(f"{SVG}polyline")) == 2
    assert len(root.findall(f"{SVG}polygon")) == 2
    dashed = [l for l in root.findall(f"{SVG}line") if l.get("stroke-dasharray")]
    assert len(dashed) == 2  # baseline and its legend entry
    labels = {t.text for t in root.findall(f"{SVG}text")}
    assert {"AllWB", "FcWB", "baseline", "set_size", "mae"} <= labels


def test_render_from_csv(tmp_path):
    write_rows(tmp_path / "s.csv", rows())
    out = render_csv(tmp_path / "s.csv", tmp_path / "s.svg", "set_size", series="strategy", title="t")
    root = ET.parse(out).getroot()
    assert root.tag == f"{SVG}svg"


def test_empty_and_missing_values():
    ET.fromstring(line_chart([], "x", "y"))
    ET.fromstring(line_chart([{"x": 1, "y": ""}, {"x": 2, "y": 3}], "x", "y"))
