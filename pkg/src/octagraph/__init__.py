"""Heterogeneous vessel/intercapillary graphs from retinal OCTA segmentations, with staging and attribution."""

__version__ = "0.1.0"
