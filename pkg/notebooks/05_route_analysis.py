"""
Do concepts take their own paths?
=================================

Trace the expert chosen by a color word through every block, then see
whether a small classifier can tell the colors apart from routes alone.
Run 04_train_and_sample.py first to produce desk.pdc.
"""

from pathdiff.routes import (collect_route_dataset, cross_validate, route_report, shuffled_control,
                             write_feature_csv)
from pathdiff.text import COLORS
from pathdiff.train import load_checkpoint

model, _ = load_checkpoint("desk.pdc")
data, traces = collect_route_dataset(model, COLORS, 20)
acc, pred, _ = cross_validate(data)
print(f"route accuracy {acc:.3f}, shuffled labels {shuffled_control(data):.3f}, chance {1 / len(COLORS):.3f}")
print(route_report(data, pred))
write_feature_csv("routes.csv", data)
