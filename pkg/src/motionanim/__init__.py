"""Motion-conditioned image animation for video editing, at desk scale.

A small latent video diffusion model conditioned on text, a first frame and
optical flow, three-term classifier-free guidance, a synthetic moving-shapes
benchmark with analytic ground truth, and edit-quality metrics with
human-label alignment analysis.
"""

__version__ = "0.1.0"
