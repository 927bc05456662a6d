"""Input-dependent state-space scan and the single gated layer built around it.

Recurrence per channel e and state n (zero initial state)::

    h[t] = exp(delta[t] * A) * h[t-1] + delta[t] * B[t] * x[t]
    y[t] = <C[t], h[t]> + D * x[t]

``A = -exp(A_log)`` keeps the discretized decay inside (0, 1) for delta > 0.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import CheckError, Tensor, as_tensor, exp, is_checked, make_result
from .nn import Module, linear_weight, param


def selective_scan_core(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential scan.  Shapes: x, delta L×E; A E×N; B, C L×N; D E."""
    x, delta, A, B, C, D = map(as_tensor, (x, delta, A, B, C, D))
    L, E = x.shape
    N = A.shape[1]
    if delta.shape != (L, E) or A.shape != (E, N) or B.shape != (L, N) or C.shape != (L, N) or D.shape != (E,):
        raise CheckError(
            f"selective_scan: inconsistent shapes x{x.shape} delta{delta.shape} A{A.shape} "
            f"B{B.shape} C{C.shape} D{D.shape}"
        )
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    dA = np.exp(dd[:, :, None] * Ad[None])  # L×E×N
    dBx = dd[:, :, None] * Bd[:, None, :] * xd[:, :, None]
    hs = np.empty((L, E, N))
    h = np.zeros((E, N))
    for t in range(L):
        h = dA[t] * h + dBx[t]
        hs[t] = h
    y = np.einsum("len,ln->le", hs, Cd) + xd * D.data
    if is_checked() and not np.all(np.isfinite(hs)):
        raise CheckError("selective_scan: non-finite hidden state")

    def backward(gy):
        gC = np.einsum("le,len->ln", gy, hs)
        gD = (gy * xd).sum(axis=0)
        gdA = np.empty((L, E, N))
        gdBx = np.empty((L, E, N))
        gh = np.zeros((E, N))
        for t in range(L - 1, -1, -1):
            gh = gh + gy[t][:, None] * Cd[t][None, :]
            gdBx[t] = gh
            gdA[t] = gh * (hs[t - 1] if t > 0 else 0.0)
            gh = gh * dA[t]
        gexp = gdA * dA
        gA = np.einsum("len,le->en", gexp, dd)
        gdelta = np.einsum("len,en->le", gexp, Ad) + np.einsum("len,ln,le->le", gdBx, Bd, xd)
        gB = np.einsum("len,le->ln", gdBx, dd * xd)
        gx = np.einsum("len,ln->le", gdBx, Bd) * dd + gy * D.data
        return gx, gdelta, gA, gB, gC, gD

    return make_result(y, (x, delta, A, B, C, D), backward, "selective_scan")


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the sequence: x L×E, weight E×K, bias E."""
    L, E = x.shape
    K = weight.shape[1]
    xp = np.concatenate([np.zeros((K - 1, E)), x.data], axis=0)
    win = np.stack([xp[j : j + L] for j in range(K)], axis=2)  # L×E×K
    out = np.einsum("lek,ek->le", win, weight.data) + bias.data

    def backward(g):
        gw = np.einsum("lek,le->ek", win, g)
        gxp = np.zeros_like(xp)
        for j in range(K):
            gxp[j : j + L] += g * weight.data[:, j]
        return gxp[K - 1 :], gw, g.sum(axis=0)

    return make_result(out, (x, weight, bias), backward, "causal_conv1d")


class ScanParams(Module):
    """Parameters of one gated selective-scan layer over C-channel sequences."""

    def __init__(
        self,
        channel_dim: int,
        state_dim: int = 4,
        expand: int = 2,
        dt_rank: int | None = None,
        conv_kernel: int = 4,
        use_conv: bool = True,
        seed: int = 0,
        dt_range: tuple[float, float] = (0.01, 0.1),
    ):
        rng = np.random.default_rng(seed)
        self.channel_dim = channel_dim
        self.state_dim = state_dim
        self.inner_dim = E = expand * channel_dim
        self.dt_rank = dt_rank or max(1, -(-channel_dim // 4))
        self.use_conv = use_conv
        self.in_proj = linear_weight(rng, 2 * E, channel_dim)
        self.conv_w = param(rng.uniform(-1, 1, (E, conv_kernel)) / np.sqrt(conv_kernel)) if use_conv else None
        self.conv_b = param(np.zeros(E)) if use_conv else None
        self.x_proj = linear_weight(rng, self.dt_rank + 2 * state_dim, E)
        self.dt_proj_w = linear_weight(rng, E, self.dt_rank)
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), E))
        self.dt_proj_b = param(dt + np.log(-np.expm1(-dt)))  # softplus^-1(dt)
        self.A_log = param(np.log(np.tile(np.arange(1, state_dim + 1, dtype=float), (E, 1))))
        self.D_skip = param(np.ones(E))
        self.out_proj = linear_weight(rng, channel_dim, E, gain=0.5)
        self.out_b = param(np.zeros(channel_dim))


def scan_inputs(u: Tensor, params: ScanParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size (softplus, so > 0) and B, C projections for u L×E."""
    proj = F.linear(u, params.x_proj)
    r, n = params.dt_rank, params.state_dim
    delta = F.softplus(F.linear(proj[:, :r], params.dt_proj_w, params.dt_proj_b))
    return delta, proj[:, r : r + n], proj[:, r + n :]


def selective_scan(seq: Tensor, params: ScanParams) -> Tensor:
    """Scan an L×E sequence with parameters projected from the sequence itself."""
    delta, B, C = scan_inputs(seq, params)
    A = exp(params.A_log) * -1.0
    return selective_scan_core(seq, delta, A, B, C, params.D_skip)


def mamba_layer(seq: Tensor, params: ScanParams) -> Tensor:
    """in_proj -> causal conv -> silu -> scan -> silu gate -> out_proj, plus residual."""
    seq = as_tensor(seq)
    if seq.shape[0] == 0:
        return seq
    E = params.inner_dim
    xz = F.linear(seq, params.in_proj)
    u, z = xz[:, :E], xz[:, E:]
    if params.use_conv:
        u = causal_conv1d(u, params.conv_w, params.conv_b)
    u = F.silu(u)
    y = selective_scan(u, params)
    y = y * F.silu(z)
    return F.linear(y, params.out_proj, params.out_b) + seq
