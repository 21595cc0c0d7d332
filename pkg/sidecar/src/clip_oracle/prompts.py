"""Candidate prompt pairs served by --list-prompts and the sweep command."""

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
