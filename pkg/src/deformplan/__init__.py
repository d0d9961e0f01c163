"""Latent world-model learning and planning for a toy deformable-object setup.

The package is a desk-scale pipeline: multi-view RGB-D observations are
fused into point clouds, a permutation-invariant set encoder produces a
latent embedding split into shape and appearance halves, a conditional
radiance-field decoder supervises the embedding through image
reconstruction, a recurrent state-space model learns latent dynamics and
goal-conditioned rewards, and a gradient-refined cross-entropy planner
drives a closed-loop controller. Everything runs on a built-in particle
blob environment with known ground truth.
"""

__version__ = "0.1.0"
