"""Return-oriented programming toolkit for AVR (ATmega128-class) firmware.

Modules: ``isa`` (decode/encode/assemble), ``firmware`` (Intel HEX images),
``gadgets`` (scanner and effect summaries), ``chains`` (meta-gadget
synthesis), ``fakestack``, ``emulator``, ``campaign`` (attacks, worm) and
``cli``.
"""

from .errors import AvrRopError

__version__ = "0.1.0"
__all__ = ["AvrRopError", "__version__"]
