"""Desk-scale multi-view consistent 3D editing pipeline.

Subpackages are imported explicitly (``from tinker3d import synth_world``);
the top-level module stays light so CLI commands that never touch torch do
not pay its import cost.
"""

__version__ = "0.1.0"
