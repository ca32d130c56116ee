"""Deterministic test potentials derived from the configured geometry.

Every command that needs a potential pair builds the same one from the
grid alone, so reruns hit the cache and sweeps are reproducible without
shipping field data in config files.
"""

from __future__ import annotations

import numpy as np

from ..errors import GeometryError
from ..geometry import AnnulusFamily, GridSpec, ScalarField, restrict_potential_support
from ..testfields import bump

# unit-box layout, scaled by the configured side length
_DIFFERENCE_BUMPS = (
    ((0.10, 0.08, -0.08), 0.07, 1.0),
    ((-0.10, -0.10, 0.08), 0.07, -0.9),
    ((-0.08, 0.10, 0.10), 0.07, 0.7),
)


def default_potentials(grid: GridSpec, family: AnnulusFamily):
    """Reference potential, measured potential, and their difference.

    The reference is a centered bump; the difference is a three-bump
    pattern zeroed on the outer collar (the measured side agrees with the
    reference near the boundary) and normalized to unit sup."""
    L = grid.box_side
    q2 = bump(grid, (0.0, 0.0, 0.0), 0.21 * L, 1.5)
    v = np.zeros(grid.shape)
    for center, radius, amp in _DIFFERENCE_BUMPS:
        scaled = tuple(L * c for c in center)
        v += bump(grid, scaled, radius * L, amp).values
    qd = restrict_potential_support(ScalarField(grid, v), family)
    top = qd.max_abs()
    if top == 0.0:
        raise GeometryError(
            "difference pattern vanishes after the collar restriction; "
            "the collar is too wide for this grid")
    qd = ScalarField(grid, qd.values / top)
    q1 = ScalarField(grid, q2.values + qd.values)
    return q1, q2, qd
