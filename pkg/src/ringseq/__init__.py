"""Lesion classification from ordered sets of ring patches.

Modules: ``imageio`` (PGM/PPM, annotations, manifests), ``geometry`` (ring
partition and patch sampling), ``nn`` (layers with hand-written backward
passes), ``models`` (SOS/SOP/ROP/VOTE/IMAGE variants and checkpoints),
``train``, ``synth``, ``evaluation``, ``stats`` and ``cli``.
"""

__version__ = "0.1.0"
