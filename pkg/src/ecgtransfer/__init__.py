"""Transfer learning for single-abnormality 12-lead ECG classification.

Numpy-only pipeline: WFDB ingestion, resampling and normalisation, a tape
autodiff engine, a 1-D DenseNet, training with block freezing, and the
sensitivity/specificity/G-mean/F2 evaluation used to compare models.
"""

from .dataset import TARGETS

__version__ = "0.1.0"
__all__ = ["TARGETS", "__version__"]
