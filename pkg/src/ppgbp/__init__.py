"""PPG to systolic blood pressure benchmark harness.

Preprocessing, BP-range segmentation, balanced dataset construction, a small
numpy 1D-CNN engine, pretraining/personalization and bin-based evaluation,
runnable end to end on a seeded synthetic corpus.
"""

__version__ = "0.1.0"
