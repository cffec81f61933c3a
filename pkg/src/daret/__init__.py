"""Domain-adversarial retrieval testbed.

A small, fully deterministic laboratory for studying zero-shot dense
retrieval under domain shift: a dual encoder trained with ranking loss and
hard negatives, a momentum-queue domain classifier, adversarial
domain-confusion objectives, synthetic paired corpora with controllable
shift, and the diagnostic suite (nDCG, neighborhood mixing, domain probes)
to watch representations become domain-invariant.
"""

from ._backend import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
