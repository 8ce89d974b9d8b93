import xml.etree.ElementTree as ET

from diffscale.svg import Chart


def test_chart_renders_valid_deterministic_svg():
    ch = Chart("t", "x", "y", logx=True, logy=True)
    ch.add([1, 10, 100], [3, 2, 1.5], "line")
    ch.add([5], [2.2], "pt", "points")
    a, b = ch.render(), ch.render()
    assert a == b
    root = ET.fromstring(a)
    assert root.tag.endswith("svg")
    assert "line" in a and "pt" in a


def test_log_axis_skips_non_positive_points():
    ch = Chart("t", "x", "y", logx=True)
    ch.add([0, 1, 10], [1, 2, 3], "partly positive")
    root = ET.fromstring(ch.render())
    assert "nan" not in ET.tostring(root, encoding="unicode").lower()
