"""Few-view radiance fields initialized from silhouette-retrieved CAD shapes."""

__version__ = "0.1.0"
