"""Vision-language loss oracle.

Serves semantic (prompt-contrast) and perceptual (patch-feature distance)
losses with pixel gradients over a framed stdio protocol, so the consumer
process never links any ML framework.
"""

__version__ = "0.1.0"

PROTOCOL_VERSION = "1"
