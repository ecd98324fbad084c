"""embedforge: desk-scale two-stage contrastive bi-encoder toolkit."""

__version__ = "0.1.0"

from . import datamix, embedder, errors, evalkit, objectives, trainer, vecmath  # noqa: E402,F401
