"""Synthetic data, augmentation, view correspondence and the dataset file format."""

from .augment import AugSpec, View, ViewSet, make_views, photometric
from .geometry import ViewGeometry, correspondence, correspondence_array
from .io import read_dataset, write_dataset
from .synthetic import DatasetSpec, GeoSample, class_signatures, generate_dataset, generate_sample

__all__ = [
    "AugSpec", "DatasetSpec", "GeoSample", "View", "ViewGeometry", "ViewSet",
    "class_signatures", "correspondence", "correspondence_array", "generate_dataset",
    "generate_sample", "make_views", "photometric", "read_dataset", "write_dataset",
]
