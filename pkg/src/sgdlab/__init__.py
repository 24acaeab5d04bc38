"""sgdlab: desk-scale laboratory for SGD dynamics on small ReLU networks."""

__version__ = "0.1.0"

from . import datagen, genbound, harness, moments, netcore, optim, oracles, spectra  # noqa: F401
