"""Energy-based attention toolkit.

Pairwise and global energies over token sets, their analytic gradients and
Hessians, every attention variant derived from them (vanilla, momentum,
Nesterov, Newton-preconditioned), energy-descent optimizers, a weight-shared
loop simulator, and mechanical verifiers for the underlying equivalences.
"""

from energy_attention import (  # noqa: F401
    attention,
    descent,
    energy,
    equivalence,
    loopsim,
    numkit,
)

__version__ = "0.1.0"
