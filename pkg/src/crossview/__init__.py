"""Cross-view 3-DoF pose estimation from a ground panorama and an aerial patch."""

__version__ = "0.1.0"
