"""Neural RGB-D SLAM on the CPU.

A compact SLAM system that represents a scene as a truncated signed distance
field decoded from a joint coordinate / multiresolution hash-grid encoding,
renders it by SDF-weighted volume integration, tracks camera motion per
frame, and refines a keyframe pose graph with global bundle adjustment over
stored pixel samples.
"""

__version__ = "0.1.0"
