"""Desk-scale differentiable Gaussian splatting with dual-branch HDR reconstruction.

The package trains an explicit 3D Gaussian scene from multi-exposure LDR
views.  Per-Gaussian color is composed from an intrinsic reflectance feature
and a positive ambient-illumination scale by a small MLP; an image-exposure
branch scales the rendered HDR image by the shutter time while a relighting
branch swaps the illumination for a virtual one before compositing.  A
learned per-pixel tone mapper fuses both branches into the LDR prediction.
All gradients are hand-derived and verified against finite differences.
"""

__version__ = "0.1.0"
