"""Low-rank redundancy reduction of the encoder latent.

The flattened latent (channels x pixels) is factorised with a one-sided
Jacobi SVD, the singular values pass through a learnable soft threshold,
the matrix is rebuilt from the surviving components, and the result is
blended back with a learnable strength. The singular vectors are treated
as constants per call in the backward pass: gradients reach the latent
through the thresholded spectrum and the residual blend only, which
sidesteps the ill-conditioning of full SVD differentiation at repeated
singular values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 30


class SvdConvergenceError(T.TensorError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(
            f"one-sided Jacobi did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass
class SvdFactors:
    u: np.ndarray            # (C, r) orthonormal columns
    s: np.ndarray            # (r,) descending, non-negative
    v: np.ndarray            # (N, r) orthonormal columns

    @property
    def rank(self) -> int:
        return self.s.shape[0]


@dataclass
class RrmParams:
    """Learnable threshold (softplus storage keeps it non-negative) and blend."""
    theta_raw: Tensor
    alpha: Tensor

    @staticmethod
    def create(theta: float = 0.01, alpha: float = 0.1) -> "RrmParams":
        return RrmParams(theta_raw=Tensor(np.array(softplus_inv(theta)),
                                          requires_grad=True),
                         alpha=Tensor(np.array(alpha), requires_grad=True))

    def tensors(self):
        yield "theta_raw", self.theta_raw
        yield "alpha", self.alpha

    def theta_value(self) -> float:
        return float(np.logaddexp(0.0, self.theta_raw.data))


def softplus_inv(y: float) -> float:
    # inverse of log(1 + e^x); stable for small y
    return float(np.log(np.expm1(y))) if y > 1e-10 else float(np.log(y + 1e-300))


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: each round pairs all columns disjointly."""
    players = list(range(n)) + ([None] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a is not None and b is not None:
                left.append(a)
                right.append(b)
        rounds.append((np.array(left), np.array(right)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_orthogonalize(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Rotate column pairs of a tall matrix until columns are orthogonal.

    Returns (G, V, residual, sweeps) with G = A V and V orthogonal.
    Disjoint pairs within a round commute, so each round runs vectorised.
    """
    m, n = g.shape
    g = g.copy()
    v = np.eye(n)
    if n == 1:
        return g, v, 0.0, 0
    rounds = _round_robin_rounds(n)
    # column rotations preserve the Frobenius norm, so correlations below
    # this floor can never matter at the 1e-6 reconstruction level and do
    # not gate convergence (they arise between numerically dead columns)
    abs_floor = 1e-20 * float((g * g).sum())
    off = np.inf
    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for li, ri in rounds:
            gi = g[:, li]
            gj = g[:, ri]
            aii = np.einsum("ij,ij->j", gi, gi)
            ajj = np.einsum("ij,ij->j", gj, gj)
            aij = np.einsum("ij,ij->j", gi, gj)
            denom = np.sqrt(aii * ajj) + 1e-300
            rel = np.abs(aij) / denom
            rel[np.abs(aij) <= abs_floor] = 0.0
            off = max(off, float(rel.max()))
            # Rutishauser small-angle rotation (|theta| <= pi/4) zeroing
            # each pair's correlation; cyclic convergence is guaranteed
            safe = np.abs(aij) > abs_floor
            tau = np.where(safe, (ajj - aii) / np.where(safe, 2.0 * aij, 1.0), 0.0)
            t = np.where(safe,
                         np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau)),
                         0.0)
            t = np.where(safe & (tau == 0.0), 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            g[:, li] = gi * c - gj * s
            g[:, ri] = gi * s + gj * c
            vi = v[:, li]
            vj = v[:, ri]
            v[:, li] = vi * c - vj * s
            v[:, ri] = vi * s + vj * c
        if off < JACOBI_TOL:
            return g, v, off, sweep + 1
    raise SvdConvergenceError(off, JACOBI_MAX_SWEEPS)


def _complete_orthonormal(u: np.ndarray, dead: np.ndarray) -> np.ndarray:
    """Fill zero-norm columns with an orthonormal completion."""
    m = u.shape[0]
    live = [u[:, j] for j in range(u.shape[1]) if not dead[j]]
    for j in np.nonzero(dead)[0]:
        for k in range(m):
            cand = np.zeros(m)
            cand[k] = 1.0
            for q in live:
                cand -= (q @ cand) * q
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                cand /= norm
                u[:, j] = cand
                live.append(cand)
                break
        else:
            raise T.TensorError("failed to complete an orthonormal basis")
    return u


def svd(hbar: np.ndarray) -> SvdFactors:
    """One-sided Jacobi SVD on the thinner dimension of a C x N matrix."""
    hbar = np.asarray(hbar, dtype=T.DTYPE)
    if hbar.ndim != 2 or min(hbar.shape) < 1:
        raise T.ShapeError("svd expects a non-empty 2-D matrix")
    if not np.all(np.isfinite(hbar)):
        raise T.NonFiniteError("svd input has non-finite entries")
    c, n = hbar.shape
    transposed = c < n
    a = hbar.T if transposed else hbar          # tall: rows >= cols
    g, v, _, _ = _jacobi_orthogonalize(a)
    s = np.linalg.norm(g, axis=0)
    order = np.argsort(-s)
    s = s[order]
    g = g[:, order]
    v = v[:, order]
    # columns below rotation-noise level carry no signal; zero them and
    # rebuild an orthonormal completion instead of normalising noise
    dead = s <= s[0] * 1e-12 if s[0] > 0 else np.ones_like(s, dtype=bool)
    u = np.zeros_like(g)
    u[:, ~dead] = g[:, ~dead] / s[~dead]
    u = _complete_orthonormal(u, dead)
    s = np.where(dead, 0.0, s)
    if transposed:
        return SvdFactors(u=v, s=s, v=u)
    return SvdFactors(u=u, s=s, v=v)


def soft_threshold(s: np.ndarray, theta: float) -> np.ndarray:
    """max(s - theta, 0); subgradient w.r.t. theta is -1 where s > theta."""
    return np.maximum(s - theta, 0.0)


def low_rank_reconstruct(u: np.ndarray, s_thr: np.ndarray,
                         v: np.ndarray) -> np.ndarray:
    if u.shape[1] != s_thr.shape[0] or v.shape[1] != s_thr.shape[0]:
        raise T.ShapeError("factor shapes are inconsistent")
    return (u * s_thr) @ v.T


def low_rank_blend(h_flat: Tensor, theta: Tensor, alpha: Tensor) -> Tensor:
    """y = H + alpha (Hhat - H) with Hhat rebuilt from the thresholded SVD.

    Backward treats U and V as constants: the latent gradient is
    (1 - alpha) g plus the spectrum-path term U diag(m * diag(U^T g V)) V^T
    where m marks surviving singular values.
    """
    if theta.size != 1 or alpha.size != 1:
        raise T.ShapeError("theta and alpha must be scalars")
    factors = svd(h_flat.data)
    th = float(theta.data)
    s_thr = soft_threshold(factors.s, th)
    h_hat = low_rank_reconstruct(factors.u, s_thr, factors.v)
    al = float(alpha.data)
    out = h_flat.data + al * (h_hat - h_flat.data)
    mask = (factors.s > th).astype(T.DTYPE)
    u, v = factors.u, factors.v
    diff = h_hat - h_flat.data

    def bw(g):
        core = np.einsum("ir,ij,jr->r", u, g, v)       # diag(U^T g V)
        g_h = (1.0 - al) * g + al * ((u * (mask * core)) @ v.T)
        g_theta = np.asarray(-al * float((mask * core).sum())).reshape(theta.shape)
        g_alpha = np.asarray(float((g * diff).sum())).reshape(alpha.shape)
        return g_h, g_theta, g_alpha
    return T.make_op(out, (h_flat, theta, alpha), bw)


def rrm_forward(h: Tensor, params: RrmParams) -> Tensor:
    """Apply the redundancy reduction to a (C, H, W) latent."""
    c, hh, ww = h.shape
    flat = T.reshape(h, (c, hh * ww))
    theta = T.softplus(params.theta_raw)
    out = low_rank_blend(flat, theta, params.alpha)
    return T.reshape(out, (c, hh, ww))


def export_spectrum(path, s: np.ndarray, s_thr: np.ndarray) -> None:
    """Diagnostic CSV of the spectrum before/after thresholding."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "s", "s_thr"])
        for i, (a, b) in enumerate(zip(s, s_thr)):
            writer.writerow([i, repr(float(a)), repr(float(b))])
