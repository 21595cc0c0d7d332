"""Candidate prompt pairs for semantic guidance.

Six (positive, negative) pairs; pair 3 is the default training pair, selected
by rank correlation against a perceptual-quality sequence (see quality.select_prompt).
Indices are 1-based to match the reporting convention.
"""

PROMPT_PAIRS = (
    ("a sharp image", "a blur image"),
    ("a sharp image", "a image with blur and turbulence distortion"),
    ("a clean and sharp natural image", "a degraded image with noise and turbulence distortion"),
    ("a clean and sharp natural image", "a degraded image with mosaic and turbulence distortion"),
    ("a clean and sharp natural image", "a low-resolution image with mosaic and turbulence distortion"),
    ("a clean and sharp natural image with table and alarm clock and books",
     "a low-resolution image with mosaic and turbulence distortion"),
)

DEFAULT_PAIR_INDEX = 3


def default_pair():
    return PROMPT_PAIRS[DEFAULT_PAIR_INDEX - 1]
