"""Pose estimation as navigation of a differentiable generator's input space.

A procedural soft-rasterized cuboid generator stands in as the simulator;
gradient descent, soft actor-critic, and imitation-learned policies all
navigate its pose and latent inputs until the synthesized image matches a
target.  Everything runs on dense float64 numpy arrays through a small
hand-written reverse-mode tape.
"""

__version__ = "0.1.0"
