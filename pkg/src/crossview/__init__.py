"""Desk-scale cross-view geo-localization lab.

Synthetic flat-ground worlds rendered into aerial tiles and street
panoramas, a panorama-to-BEV projection, tile-grid decentrality
analytics, contrastive + position-regression training objectives with
hand-written gradients, and an exact retrieval evaluation harness.
"""

from crossview.tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "__version__"]
