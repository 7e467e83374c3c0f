"""Automatic segmentation of epicardial and mediastinal cardiac fat on CT
slices: atlas-driven retrosternal registration via weighted mutual
information, per-pixel texture classification with one-vs-rest learners,
label fusion, and quantitative evaluation."""

__version__ = "0.1.0"
