"""Desk-scale open-world object detection toolkit.

Trains a small query-based detector on synthetic scenes, discovers
unlabeled objects through multi-view self-labeling, and evaluates with
open-world metrics (known mAP, unknown recall, wilderness impact,
open-set error count).
"""

__version__ = "0.1.0"
