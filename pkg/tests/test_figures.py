import numpy as np

from crossrf.figures import plot_comparison, plot_confusion, plot_stage_log
from crossrf.report import ComparisonReport, ConfusionMatrix
from crossrf.training import EpochRow, StageLog


def test_confusion_png_written(tmp_path):
    m = ConfusionMatrix(np.array([[8, 2], [1, 9]]))
    path = tmp_path / "confusion.png"
    plot_confusion(m, path, title="demo")
    assert path.stat().st_size > 0


def test_comparison_png_written(tmp_path):
    report = ComparisonReport("demo", 95.0, 30.0, 85.0, 0.85, 0.85, 0.85)
    path = tmp_path / "comparison.png"
    plot_comparison(report, path)
    assert path.stat().st_size > 0


def test_stage_log_png_written(tmp_path):
    log = StageLog(rows=[
        EpochRow(epoch=0, cls_loss=1.2, total_loss=1.2, val_accuracy=0.4),
        EpochRow(epoch=1, cls_loss=0.6, total_loss=0.6, val_accuracy=0.8),
    ])
    path = tmp_path / "curves.png"
    plot_stage_log(log, path, title="demo")
    assert path.stat().st_size > 0


def test_empty_log_still_renders(tmp_path):
    path = tmp_path / "empty.png"
    plot_stage_log(StageLog(), path)
    assert path.stat().st_size > 0
