"""Quantisation and the spatial-channel conditional entropy model.

Latent channels are split into J chunks decoded in order. A chunk's
parameters come from three spatially aligned contexts: a channel
context distilled from already-decoded chunks by a semantic-scan block,
a two-pass checkerboard spatial context (anchor positions carry no
spatial context; non-anchors see anchors through a masked 5x5 conv and
window-local attention), and the hyper-synthesis output. Everything is
fused by a per-chunk aggregation network into per-symbol mean and
scale. The hyper-latent itself is coded under a small learned monotone
CDF per channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .sass import SambBlock, _bias3, _conv_w, _zeros
from .tensor import Tensor

SIGMA_MIN = 0.11
SIGMA_MAX = 64.0
P_MIN = 2.0 ** -16
_SQRT2 = float(np.sqrt(2.0))


def quantize(x: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Round-to-nearest (ties away from zero) in eval; additive uniform
    noise in train. Gradient is identity either way."""
    if mode == "eval":
        data = np.floor(np.abs(x.data) + 0.5) * np.sign(x.data)
    elif mode == "train":
        if rng is None:
            raise ValueError("train-mode quantisation needs an rng")
        data = x.data + rng.uniform(-0.5, 0.5, x.shape)
    else:
        raise ValueError(f"unknown quantisation mode {mode!r}")
    return T.make_op(data, (x,), lambda g: (g.copy(),))


def _phi(x: Tensor) -> Tensor:
    return (T.erf(x / _SQRT2) + 1.0) * 0.5


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Probability of the integer bin around each symbol, floored at P_MIN."""
    upper = _phi((y_hat - mu + 0.5) / sigma)
    lower = _phi((y_hat - mu - 0.5) / sigma)
    return T.clamp(upper - lower, lo=P_MIN)


def rate_bits(likelihood: Tensor) -> Tensor:
    return T.reduce_sum(T.log(likelihood)) / (-np.log(2.0))


def anchor_mask(h: int, w: int) -> np.ndarray:
    """Checkerboard anchors: (row + col) even."""
    rr = np.arange(h)[:, None]
    cc = np.arange(w)[None, :]
    return ((rr + cc) % 2 == 0).astype(T.DTYPE)


def checkerboard_mask5() -> np.ndarray:
    """5x5 conv mask passing only taps whose offset parity is odd, so a
    non-anchor centre sees anchors only (centre tap masked out)."""
    ii = np.arange(5)[:, None]
    jj = np.arange(5)[None, :]
    return ((ii + jj) % 2 == 1).astype(T.DTYPE)


# -- factorized prior for the hyper-latent -------------------------------------

class FactorizedPrior:
    """Per-channel monotone CDF built from three stacked sigmoid-ish layers.

    Positive weights (softplus storage) and bounded tanh gates keep each
    layer strictly increasing, so the composed map is a valid CDF after
    the final sigmoid.
    """

    FILTERS = (1, 3, 3, 1)
    TAIL_EPS = 1e-9          # keeps the CDF inside (0, 1) even when the
                             # final sigmoid saturates in float64

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.gates: list[Tensor] = []
        fs = self.FILTERS
        init_w = float(np.log(np.expm1(0.5)))
        for i in range(3):
            self.weights.append(Tensor(
                np.full((channels, fs[i + 1], fs[i]), init_w), requires_grad=True))
            self.biases.append(Tensor(
                rng.uniform(-0.5, 0.5, (channels, fs[i + 1], 1)), requires_grad=True))
            if i < 2:
                self.gates.append(Tensor(
                    np.zeros((channels, fs[i + 1], 1)), requires_grad=True))

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for i in range(3):
            yield f"w{i}", self.weights[i]
            yield f"b{i}", self.biases[i]
        for i in range(2):
            yield f"a{i}", self.gates[i]

    def cdf(self, x: Tensor) -> Tensor:
        """x: (C, N) -> CDF values in (0, 1), strictly increasing in x."""
        c, n = x.shape
        h = T.reshape(x, (c, 1, n))
        for i in range(3):
            fin = self.FILTERS[i]
            fout = self.FILTERS[i + 1]
            w = T.softplus(self.weights[i])                   # (C, fout, fin)
            h = T.reduce_sum(T.reshape(w, (c, fout, fin, 1))
                             * T.reshape(h, (c, 1, fin, n)), axis=2)
            h = h + self.biases[i]
            if i < 2:
                h = h + T.tanh(self.gates[i]) * T.tanh(h)
        squeezed = T.sigmoid(h) * (1.0 - 2.0 * self.TAIL_EPS) + self.TAIL_EPS
        return T.reshape(squeezed, (c, n))

    def likelihood(self, z_hat: Tensor) -> Tensor:
        """z_hat: (C, N) -> per-symbol probability, floored at P_MIN."""
        upper = self.cdf(z_hat + 0.5)
        lower = self.cdf(z_hat - 0.5)
        return T.clamp(upper - lower, lo=P_MIN)

    def pmf_alphabet(self, clip: int) -> np.ndarray:
        """(C, 2*clip+2) pmf over the clipped alphabet plus escape mass."""
        ks = np.arange(-clip, clip + 1, dtype=T.DTYPE)
        grid = np.broadcast_to(ks, (self.channels, ks.size)).copy()
        with T.no_grad():
            upper = self.cdf(Tensor(grid + 0.5)).data
            lower = self.cdf(Tensor(grid - 0.5)).data
        pmf = np.empty((self.channels, ks.size + 1))
        pmf[:, :-1] = upper - lower
        pmf[:, -1] = np.maximum(1.0 - (upper[:, -1] - lower[:, 0]), 0.0)
        return pmf


# -- window-local attention ------------------------------------------------------

class WindowAttention:
    """Single-head attention inside non-overlapping square windows."""

    def __init__(self, channels: int, window: int, rng: np.random.Generator):
        self.channels = channels
        self.window = window
        scale = 1.0 / np.sqrt(channels)
        def mat():
            return Tensor(rng.uniform(-scale, scale, (channels, channels)),
                          requires_grad=True)
        self.wq, self.wk, self.wv = mat(), mat(), mat()
        self.wo = Tensor(rng.normal(0.0, 0.02 * scale, (channels, channels)),
                         requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("wq", "wk", "wv", "wo", "bias"):
            yield name, getattr(self, name)

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        win = self.window
        ph = (-h) % win
        pw = (-w) % win
        if ph or pw:
            cols = T.concat([x, Tensor(np.zeros((c, h, pw)))], axis=2) if pw else x
            x_p = T.concat([cols, Tensor(np.zeros((c, ph, w + pw)))], axis=1) if ph else cols
        else:
            x_p = x
        hp, wp = h + ph, w + pw
        nh, nw = hp // win, wp // win
        # (C, nh, win, nw, win) -> (nh, nw, win*win, C)
        blocks = T.transpose(T.reshape(x_p, (c, nh, win, nw, win)),
                             (1, 3, 2, 4, 0))
        blocks = T.reshape(blocks, (nh * nw, win * win, c))
        scale = 1.0 / np.sqrt(c)
        outs = []
        for b in range(nh * nw):
            tok = T.reshape(T.slice_channels(blocks, b, b + 1), (win * win, c))
            q = T.matmul(tok, self.wq)
            k = T.matmul(tok, self.wk)
            v = T.matmul(tok, self.wv)
            attn = T.softmax(T.matmul(q, T.transpose(k)) * scale, axis=1)
            outs.append(T.matmul(T.matmul(attn, v), self.wo))
        stacked = T.reshape(T.concat(outs, axis=0), (nh, nw, win, win, c))
        grid = T.reshape(T.transpose(stacked, (4, 0, 2, 1, 3)), (c, hp, wp))
        if ph or pw:
            grid = _crop2d(grid, h, w)
        return x + grid + _bias3(self.bias)


def _crop2d(x: Tensor, h: int, w: int) -> Tensor:
    c, hp, wp = x.shape

    def bw(g):
        full = np.zeros((c, hp, wp), dtype=T.DTYPE)
        full[:, :h, :w] = g
        return (full,)
    return T.make_op(x.data[:, :h, :w].copy(), (x,), bw)


# -- per-chunk context networks ---------------------------------------------------

class ChannelContext:
    """Distils already-decoded chunks into a context map via a scan block."""

    def __init__(self, chunk_index: int, chunk_size: int, ctx: int,
                 clusters: int, rng: np.random.Generator, **samb_kw):
        self.chunk_index = chunk_index
        self.ctx = ctx
        if chunk_index == 0:
            self.const = Tensor(rng.normal(0.0, 0.1, (ctx, 1, 1)),
                                requires_grad=True)
        else:
            cin = chunk_index * chunk_size
            self.proj_w = _conv_w(rng, ctx, cin)
            self.proj_b = _zeros(ctx)
            self.block = SambBlock.create(ctx, clusters, rng, **samb_kw)
            self.out_w = _conv_w(rng, ctx, ctx)
            self.out_b = _zeros(ctx)

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        if self.chunk_index == 0:
            yield "const", self.const
            return
        yield "proj_w", self.proj_w
        yield "proj_b", self.proj_b
        for n, t in self.block.tensors():
            yield f"block.{n}", t
        yield "out_w", self.out_w
        yield "out_b", self.out_b

    def forward(self, prev_chunks: Tensor | None, h: int, w: int,
                rng: np.random.Generator | None = None) -> Tensor:
        if self.chunk_index == 0:
            return Tensor(np.zeros((self.ctx, h, w))) + self.const
        feat = T.conv2d(prev_chunks, self.proj_w, self.proj_b)
        feat = self.block.forward(feat, rng=rng)
        return T.conv2d(feat, self.out_w, self.out_b)


class SpatialContext:
    """Masked 5x5 conv over the anchors, then window-local attention."""

    def __init__(self, chunk_size: int, ctx: int, window: int,
                 rng: np.random.Generator):
        self.mask = checkerboard_mask5()
        self.conv_w = _conv_w(rng, ctx, chunk_size, 5)
        self.conv_b = _zeros(ctx)
        self.attn = WindowAttention(ctx, window, rng)

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "conv_w", self.conv_w
        yield "conv_b", self.conv_b
        for n, t in self.attn.tensors():
            yield f"attn.{n}", t

    def forward(self, anchors_only: Tensor) -> Tensor:
        feat = T.conv2d(anchors_only, self.conv_w, self.conv_b,
                        mask=self.mask)
        return self.attn.forward(feat)


class ParamAggregator:
    """Fuses the three contexts into per-symbol (mu, sigma) for one chunk."""

    def __init__(self, chunk_size: int, ctx: int, psi: int, hidden: int,
                 window: int, rng: np.random.Generator):
        self.chunk_size = chunk_size
        self.in_w = _conv_w(rng, hidden, 2 * ctx + psi)
        self.in_b = _zeros(hidden)
        self.attn = WindowAttention(hidden, window, rng)
        self.out_w = _conv_w(rng, 2 * chunk_size, hidden)
        self.out_b = _zeros(2 * chunk_size)

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "in_w", self.in_w
        yield "in_b", self.in_b
        for n, t in self.attn.tensors():
            yield f"attn.{n}", t
        yield "out_w", self.out_w
        yield "out_b", self.out_b

    def forward(self, phi_ch: Tensor, phi_sp: Tensor, psi: Tensor
                ) -> tuple[Tensor, Tensor]:
        fused = T.concat([phi_ch, phi_sp, psi], axis=0)
        hid = T.silu(T.conv2d(fused, self.in_w, self.in_b))
        hid = self.attn.forward(hid)
        raw = T.conv2d(hid, self.out_w, self.out_b)
        cs = self.chunk_size
        mu = T.slice_channels(raw, 0, cs)
        sigma = T.clamp(T.exp(T.clamp(T.slice_channels(raw, cs, 2 * cs),
                                      lo=-12.0, hi=12.0)),
                        lo=SIGMA_MIN, hi=SIGMA_MAX)
        return mu, sigma


@dataclass
class LatentBundle:
    """Everything the rate estimate and the coder need for one image."""
    y: Tensor | None
    y_hat: Tensor
    z: Tensor | None
    z_hat: Tensor
    mu: Tensor
    sigma: Tensor
    chunks: int
    chunk_size: int


class EntropyModel:
    """Chunked spatial-channel entropy model plus the hyper-latent prior."""

    def __init__(self, c_latent: int, c_hyper: int, chunks: int, ctx: int,
                 psi: int, hidden: int, clusters: int, window: int,
                 rng: np.random.Generator, **samb_kw):
        if c_latent % chunks:
            raise ValueError("chunk count must divide the latent channels")
        self.c_latent = c_latent
        self.c_hyper = c_hyper
        self.chunks = chunks
        self.chunk_size = c_latent // chunks
        self.prior = FactorizedPrior(c_hyper, rng)
        self.channel_ctx = [ChannelContext(j, self.chunk_size, ctx, clusters,
                                           rng, **samb_kw)
                            for j in range(chunks)]
        self.spatial_ctx = [SpatialContext(self.chunk_size, ctx, window, rng)
                            for _ in range(chunks)]
        self.aggregators = [ParamAggregator(self.chunk_size, ctx, psi, hidden,
                                            window, rng)
                            for _ in range(chunks)]

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for n, t in self.prior.tensors():
            yield f"prior.{n}", t
        for j in range(self.chunks):
            for n, t in self.channel_ctx[j].tensors():
                yield f"chan{j}.{n}", t
            for n, t in self.spatial_ctx[j].tensors():
                yield f"spat{j}.{n}", t
            for n, t in self.aggregators[j].tensors():
                yield f"agg{j}.{n}", t

    # individual context surfaces -------------------------------------------

    def channel_context(self, j: int, y_hat_prev: Tensor | None, h: int, w: int,
                        rng: np.random.Generator | None = None) -> Tensor:
        if not (0 <= j < self.chunks):
            raise IndexError(f"chunk index {j} out of range")
        return self.channel_ctx[j].forward(y_hat_prev, h, w, rng=rng)

    def spatial_context(self, j: int, anchors_only: Tensor) -> Tensor:
        return self.spatial_ctx[j].forward(anchors_only)

    def aggregate_params(self, j: int, phi_ch: Tensor, phi_sp: Tensor,
                         psi: Tensor) -> tuple[Tensor, Tensor]:
        if phi_ch.shape[1:] != psi.shape[1:] or phi_sp.shape[1:] != psi.shape[1:]:
            raise T.ShapeError("context maps are not spatially aligned")
        return self.aggregators[j].forward(phi_ch, phi_sp, psi)

    # full parameter prediction ----------------------------------------------

    def chunk_pass1(self, j: int, y_hat_prev: Tensor | None, psi: Tensor,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, Tensor, Tensor]:
        """Anchor-pass parameters for chunk j: no spatial context at all.

        Returns (mu, sigma, phi_ch); the channel context is reused by the
        second pass. Encoder and decoder both call this, which is what
        makes their parameter streams bit-identical.
        """
        _, h, w = psi.shape
        phi_ch = self.channel_context(j, y_hat_prev, h, w, rng=rng)
        ctx_zero = Tensor(np.zeros(phi_ch.shape))
        mu_a, sig_a = self.aggregate_params(j, phi_ch, ctx_zero, psi)
        return mu_a, sig_a, phi_ch

    def chunk_pass2(self, j: int, phi_ch: Tensor, anchors_only: Tensor,
                    psi: Tensor) -> tuple[Tensor, Tensor]:
        """Non-anchor parameters: spatial context reads the anchors only."""
        phi_sp = self.spatial_context(j, anchors_only)
        return self.aggregate_params(j, phi_ch, phi_sp, psi)

    def entropy_parameters(self, y_hat: Tensor, psi: Tensor,
                           rng: np.random.Generator | None = None
                           ) -> tuple[Tensor, Tensor]:
        """(mu, sigma) for the whole latent, respecting the decode order:
        chunk-major, anchors before non-anchors inside a chunk."""
        c, h, w = y_hat.shape
        if c != self.c_latent:
            raise T.ShapeError(f"latent has {c} channels, model expects {self.c_latent}")
        amask = Tensor(anchor_mask(h, w)[None])
        inv_amask = Tensor(1.0 - amask.data)
        mus, sigmas = [], []
        cs = self.chunk_size
        for j in range(self.chunks):
            prev = T.slice_channels(y_hat, 0, j * cs) if j > 0 else None
            mu_a, sig_a, phi_ch = self.chunk_pass1(j, prev, psi, rng=rng)
            chunk = T.slice_channels(y_hat, j * cs, (j + 1) * cs)
            anchors_only = chunk * amask
            mu_n, sig_n = self.chunk_pass2(j, phi_ch, anchors_only, psi)
            mus.append(mu_a * amask + mu_n * inv_amask)
            sigmas.append(sig_a * amask + sig_n * inv_amask)
        return T.concat(mus, axis=0), T.concat(sigmas, axis=0)

    def bundle(self, y: Tensor | None, y_hat: Tensor, z: Tensor | None,
               z_hat: Tensor, psi: Tensor,
               rng: np.random.Generator | None = None) -> LatentBundle:
        mu, sigma = self.entropy_parameters(y_hat, psi, rng=rng)
        return LatentBundle(y=y, y_hat=y_hat, z=z, z_hat=z_hat, mu=mu,
                            sigma=sigma, chunks=self.chunks,
                            chunk_size=self.chunk_size)

    def estimate_rate(self, bundle: LatentBundle, n_pix: int) -> Tensor:
        """Bits per pixel over both latents from the model likelihoods."""
        y_like = gaussian_likelihood(bundle.y_hat, bundle.mu, bundle.sigma)
        cz = bundle.z_hat.shape[0]
        z_flat = T.reshape(bundle.z_hat, (cz, -1))
        z_like = self.prior.likelihood(z_flat)
        return (rate_bits(y_like) + rate_bits(z_like)) / n_pix
