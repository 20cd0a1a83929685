"""Pixel/lesion/patient analysis of 3D multi-phase liver volumes.

A desk-scale, fully testable pipeline: synthetic phantom generation, a
mask-transformer network that jointly segments and types lesion instances and
scores patient-level labels, composite training objectives with bipartite
query-target matching, panoptic decoding, and a three-level (pixel / lesion /
patient) evaluation protocol.
"""

__version__ = "0.1.0"
