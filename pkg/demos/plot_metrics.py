"""
Segmentation metrics
====================

The eight benchmark metrics from a confusion count, and a dataset report that
averages per-image values.
"""

import numpy as np

from lesionseg.metrics import ConfusionCounts, ImageMetrics, MetricsReport, compute_metrics, confusion_counts

counts = ConfusionCounts(tp=2, fp=1, tn=12, fn=1)
for name, value in compute_metrics(counts).items():
    print(f"{name:<15} {value:.4f}")

###############################################################################
# Empty prediction on an empty mask counts as perfect agreement.

empty = np.zeros((4, 4), dtype=np.uint8)
print(compute_metrics(confusion_counts(empty, empty))["dice"])

###############################################################################
# A report is the mean over images, not pooled counts.

g = np.random.default_rng(0)
rows = []
for i in range(3):
    pred, gt = g.integers(0, 2, size=(2, 8, 8))
    c = confusion_counts(pred, gt)
    rows.append(ImageMetrics(f"img{i}", c, compute_metrics(c)))
print(MetricsReport.from_images(rows).summary("random masks"))
