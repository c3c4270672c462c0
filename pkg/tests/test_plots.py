import matplotlib.pyplot as plt
import numpy as np

from osimark import plots
from osimark.osinet import EpochStats
from osimark.wmcodec import LatentShape

PNG = b"\x89PNG"


def test_figures_render_to_png(tmp_path):
    rows = [
        {"method": m, "distortion": d, "acc": a, "fpr": 1e-6}
        for m, base in (("multistep-50", 0.9), ("osi", 0.95))
        for d, a in (("Clean", base), ("Jpeg", base - 0.1), ("Adv.", base - 0.2))
    ]
    curves = {("multistep-50", "Clean"): np.linspace(0.6, 0.9, 51)}
    paths = plots.render_report(tmp_path, rows, curves, LatentShape(4, 16, 16))
    assert [p.name for p in paths] == ["accuracy.png", "user_count.png", "step_accuracy.png"]
    for p in paths:
        assert p.read_bytes()[:4] == PNG
    hist = [EpochStats(1, 0.6, 0.01, 0.61), EpochStats(2, 0.4, 0.01, 0.41)]
    assert plots.plot_loss_history(hist, tmp_path / "loss.png").read_bytes()[:4] == PNG
    assert plt.get_fignums() == []  # every figure is closed


def test_empty_report_renders_nothing(tmp_path):
    assert plots.render_report(tmp_path, [], {}, LatentShape(4, 16, 16)) == []


def test_style_does_not_leak(tmp_path):
    before = plt.rcParams["font.size"]
    plots.plot_user_count({"a": 0.8}, LatentShape(4, 16, 16), tmp_path / "u.png")
    assert plt.rcParams["font.size"] == before
