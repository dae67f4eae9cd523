"""Toolchain for a small neural co-processor (NCP).

The package covers the full path from a quantized CNN graph down to
executed bytes:

* ``ir`` / ``blocks`` -- int8 graph IR and backbone builders
* ``isa`` / ``asm``   -- 128-bit instruction set, encoder and assembler
* ``compiler``        -- lowering, tensor-memory placement, weight images
* ``sim``             -- functional + cycle/energy model of the processor
* ``oracle``          -- independent scalar reference interpreter
* ``host``            -- MCU-side pre/post-processing and bus accounting
* ``cli``             -- the ``ncpkit`` command line front end
"""

__version__ = "0.1.0"
