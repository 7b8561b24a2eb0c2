"""Oriented-box collision geometry.

The compiled kernel in ``_sat`` is used when the extension was built;
otherwise the numpy implementation in ``_sat_py`` is selected.  Set
``CLFORECAST_PURE_PYTHON=1`` to force the fallback.
"""

import os
from typing import NamedTuple

from . import _sat_py

if os.environ.get("CLFORECAST_PURE_PYTHON", "") not in ("", "0"):
    overlap_many = _sat_py.overlap_many
    BACKEND = "python"
else:
    try:
        from ._sat import overlap_many
        BACKEND = "compiled"
    except ImportError:
        overlap_many = _sat_py.overlap_many
        BACKEND = "python"


class OrientedBox(NamedTuple):
    center: tuple[float, float]
    heading: float
    length: float
    width: float

    def corners(self):
        import numpy as np

        c, s = np.cos(self.heading), np.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)


def boxes_collide(a: OrientedBox, b: OrientedBox) -> bool:
    """Exact SAT overlap of two rectangles; touching edges collide."""
    if a.length <= 0 or a.width <= 0 or b.length <= 0 or b.width <= 0:
        raise ValueError("box length and width must be positive")
    return bool(
        overlap_many(a.center[0], a.center[1], a.heading, a.length, a.width,
                     b.center[0], b.center[1], b.heading, b.length, b.width)
    )


__all__ = ["BACKEND", "OrientedBox", "boxes_collide", "overlap_many"]
