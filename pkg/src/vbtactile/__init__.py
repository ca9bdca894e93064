"""Virtual-binocular tactile sensing: optics, elastic inversion and friction mapping."""

__version__ = "0.1.0"
