"""Multi-head attention with a relative-pose bias.

Every token carries a reference pose ``(x, y, heading)``.  For a query token
``i`` and key token ``j`` the pair feature is the key pose expressed in the
query's frame; it is embedded and added to the key and value projections.
Because only relative quantities enter, attention is invariant to rigid
motions of the whole scene.
"""

from __future__ import annotations

import math

import torch
from torch import nn

POSE_SCALE = 20.0


def relative_pose_features(q_pose: torch.Tensor, k_pose: torch.Tensor) -> torch.Tensor:
    """``(Nq, 3), (K, 3) -> (Nq, K, 5)``: [dx, dy, dist] / scale, cos/sin of heading difference."""
    d = k_pose[None, :, :2] - q_pose[:, None, :2]
    c = torch.cos(q_pose[:, 2])[:, None]
    s = torch.sin(q_pose[:, 2])[:, None]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    dist = torch.sqrt(lx * lx + ly * ly + 1e-12)
    dh = k_pose[None, :, 2] - q_pose[:, None, 2]
    return torch.stack([lx / POSE_SCALE, ly / POSE_SCALE, dist / POSE_SCALE, torch.cos(dh), torch.sin(dh)], -1)


def mlp(d_in: int, d_hidden: int, d_out: int, zero_last: bool = False) -> nn.Sequential:
    last = nn.Linear(d_hidden, d_out)
    if zero_last:
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), last)


class PoseAttention(nn.Module):
    """Attention where each query has its own key/value set of shape ``(Nq, K, H)``.

    ``rel`` (optional, ``(Nq, K, H)``) is the embedded relative pose.
    """

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads:
            raise ValueError(f"hidden_dim {hidden} not divisible by n_heads {heads}")
        self.h = heads
        self.dh = hidden // heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.rel = nn.Linear(hidden, 2 * hidden, bias=False)
        self.out = nn.Linear(hidden, hidden)

    def _rel(self, rel):
        if rel is None:
            return None, None
        return self.rel(rel).chunk(2, -1)

    def _scores(self, x, kv, rk, key_mask):
        nq, K, _ = kv.shape
        q = self.q(x).view(nq, 1, self.h, self.dh)
        k = self.k(kv)
        if rk is not None:
            k = k + rk
        s = (q * k.view(nq, K, self.h, self.dh)).sum(-1) / math.sqrt(self.dh)  # (nq, K, h)
        if key_mask is not None:
            s = s.masked_fill(~key_mask[..., None], float("-inf"))
        return s

    def scores(self, x, kv, rel=None, key_mask=None):
        """Pre-softmax attention logits, ``(Nq, K, heads)``."""
        return self._scores(x, kv, self._rel(rel)[0], key_mask)

    def forward(self, x, kv, rel=None, key_mask=None):
        nq, K, H = kv.shape
        if K == 0:
            return torch.zeros_like(x)
        rk, rv = self._rel(rel)
        a = torch.softmax(self._scores(x, kv, rk, key_mask), dim=1)
        v = self.v(kv)
        if rv is not None:
            v = v + rv
        o = (a[..., None] * v.view(nq, K, self.h, self.dh)).sum(1).reshape(nq, H)
        return self.out(o)


class DecoderLayer(nn.Module):
    """Context cross-attention, optional goal attention, query self-attention, feed-forward."""

    def __init__(self, hidden: int, heads: int, with_goal: bool = False):
        super().__init__()
        self.cross = PoseAttention(hidden, heads)
        self.norm_c = nn.LayerNorm(hidden)
        self.goal = PoseAttention(hidden, heads) if with_goal else None
        self.norm_g = nn.LayerNorm(hidden) if with_goal else None
        self.self_attn = PoseAttention(hidden, heads)
        self.norm_s = nn.LayerNorm(hidden)
        self.ffn = mlp(hidden, 2 * hidden, hidden)
        self.norm_f = nn.LayerNorm(hidden)

    def forward(self, q, ctx, ctx_rel, self_rel=None, goal=None):
        nq = q.shape[0]
        if ctx.shape[0]:
            q = q + self.cross(self.norm_c(q), ctx[None].expand(nq, -1, -1), ctx_rel)
        if self.goal is not None and goal is not None:
            q = q + self.goal(self.norm_g(q), goal[:, None, :])
        qs = self.norm_s(q)
        q = q + self.self_attn(qs, qs[None].expand(nq, -1, -1), self_rel)
        return q + self.ffn(self.norm_f(q))
