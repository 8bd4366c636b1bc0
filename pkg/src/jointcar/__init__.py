"""Part-based car detector with a learned deformation layer and visibility head.

Subpackages and modules: ``image_io`` (PGM and input channels), ``dataset``,
``nn`` (kernels, layers, SGD, checkpoints, gradient check), ``deformation``,
``visibility``, ``model``, ``trainer``, ``evaluation`` and ``cli``.
"""
from .nn.kernels import BACKEND

__version__ = "0.1.0"
