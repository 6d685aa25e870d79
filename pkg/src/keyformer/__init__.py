"""Free-text keystroke-dynamics verification engine.

Library layout:

- ``tensor``     dense tensors + reverse-mode autodiff + deterministic RNG
- ``data``       raw-log ingestion, timing features, splits, synthetic data
- ``model``      two-branch transformer encoder producing simplex embeddings
- ``training``   triplet sampling/loss, Adam, epoch loop, checkpoints
- ``evaluation`` genuine/impostor protocol, Average/Global EER, DET curves
- ``service``    HTTP enrolment/verification service over a template store
- ``cli``        operator command line covering the full pipeline
"""

__version__ = "0.1.0"

from .errors import KeyformerError  # noqa: F401
