"""Vectorized numpy separating-axis test for oriented rectangles."""

import numpy as np


def overlap_many(ax, ay, ah, al, aw, bx, by, bh, bl, bw):
    """Row-wise overlap of rectangles ``a[i]`` and ``b[i]``.

    Rectangles are given by center, heading, length (along heading) and width.
    Touching edges count as overlap.
    """
    ax, ay, ah, al, aw, bx, by, bh, bl, bw = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (ax, ay, ah, al, aw, bx, by, bh, bl, bw))
    )
    dx = bx - ax
    dy = by - ay
    ca, sa = np.cos(ah), np.sin(ah)
    cb, sb = np.cos(bh), np.sin(bh)
    hal, haw, hbl, hbw = 0.5 * al, 0.5 * aw, 0.5 * bl, 0.5 * bw
    # a's long/short axes are (ca, sa), (-sa, ca); likewise for b
    dot_ll = np.abs(ca * cb + sa * sb)  # |a_long . b_long| == |a_short . b_short|
    dot_ls = np.abs(-ca * sb + sa * cb)  # |a_long . b_short| == |a_short . b_long|
    sep = np.abs(dx * ca + dy * sa) > hal + hbl * dot_ll + hbw * dot_ls
    sep |= np.abs(-dx * sa + dy * ca) > haw + hbl * dot_ls + hbw * dot_ll
    sep |= np.abs(dx * cb + dy * sb) > hbl + hal * dot_ll + haw * dot_ls
    sep |= np.abs(-dx * sb + dy * cb) > hbw + hal * dot_ls + haw * dot_ll
    return ~sep
