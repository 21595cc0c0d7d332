"""turbvid: test-time optimization for turbulence-distorted video.

Fits a dual-field neural video representation (deformation field + canonical
content field) to an observed sequence and evaluates temporal consistency
with flow-based metrics. Pure numpy/scipy on the primary path; perceptual
and semantic losses arrive through an external oracle process.
"""

__version__ = "0.1.0"
