"""A small single-stage object detector written against numpy.

Modules: ``tensor`` (gemm, im2col), ``netdef`` (darknet cfg and weights),
``layers`` (forward and backward passes), ``postprocess`` (decode, NMS),
``dataset``, ``metrics``, ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
