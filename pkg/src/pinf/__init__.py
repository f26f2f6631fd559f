"""pinf: conditional-prior variational classifier with two-stage training.

Stage 1 trains a convolutional variational classifier on globally labeled
images under a standard-normal latent prior; stage 2 fine-tunes the late
layers on a small annotated subset whose latent prior is conditioned on
rasterized object-level annotations (gaze maps, bounding boxes). The package
also ships the annotation rasterizer, a planted-pattern synthetic benchmark,
evaluation metrics with Grad-CAM similarity deltas, and a CLI.
"""

__version__ = "0.1.0"
