"""4D implicit cardiac-surface reconstruction from multi-view 2D silhouette masks."""

__version__ = "0.1.0"
