"""Semantic-aware selective scanning.

A feature map is clustered by cosine similarity to learnable centers,
pixels are permuted into cluster-contiguous runs (clusters ordered by
their mean spatial position, raster order inside each run), a selective
state-space recurrence is run once along the permuted sequence, and the
result is scattered back onto the grid. The wrapping residual block
(gated value stream, output projection, feed-forward tail) follows the
usual visual-state-space layout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCAN_BLOCK = 128        # positions per vectorised scan block; keeps work linear in N
GUMBEL_EPS = 1e-20
COSINE_EPS = 1e-8


@dataclass
class ClusterConfig:
    """Semantic clustering knobs: K centers in a C_sem-dim feature space."""
    clusters: int = 16
    feature_dim: int = 16
    temperature: float = 0.5
    gumbel_enabled: bool = True
    centers: Tensor | None = None

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("cluster count must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def init_centers(self, rng: np.random.Generator) -> None:
        self.centers = Tensor(rng.normal(0.0, 1.0, (self.clusters, self.feature_dim)),
                              requires_grad=True)


@dataclass
class SemanticAssignment:
    """Soft/hard assignments plus the induced permutation for one map."""
    soft: Tensor                     # (K, N) probabilities
    hard: Tensor                     # (K, N) one-hot forward values
    perm: np.ndarray                 # length N
    perm_inv: np.ndarray             # length N
    sort_keys: list[tuple[float, float]]  # (mean col, mean row) per cluster


@dataclass
class SsmParams:
    """Per-channel selective-SSM parameters.

    The state decay is stored as log magnitude so the continuous-time
    pole stays strictly negative; the per-position step size comes from
    a learned projection of the input through softplus, which keeps the
    discretised decay in (0, 1).
    """
    log_decay: Tensor        # (C, D): A = -exp(log_decay)
    delta_weight: Tensor     # (C, C)
    delta_bias: Tensor       # (C,)
    input_gain: Tensor       # (C, D): fixed B
    output_gain: Tensor      # (C, D): fixed C
    skip_gain: Tensor        # (C,)

    @property
    def state_dim(self) -> int:
        return self.log_decay.shape[1]

    @staticmethod
    def create(channels: int, state_dim: int, rng: np.random.Generator) -> "SsmParams":
        # delta bias picked so softplus gives moderate step sizes and the
        # discretised decay starts near 0.95 (long memory at init)
        return SsmParams(
            log_decay=Tensor(rng.normal(0.0, 0.2, (channels, state_dim)),
                             requires_grad=True),
            delta_weight=Tensor(rng.normal(0.0, 0.05 / np.sqrt(channels),
                                           (channels, channels)), requires_grad=True),
            delta_bias=Tensor(np.full(channels, -3.0), requires_grad=True),
            input_gain=Tensor(rng.normal(0.0, 1.0 / np.sqrt(state_dim),
                                         (channels, state_dim)), requires_grad=True),
            output_gain=Tensor(rng.normal(0.0, 1.0 / np.sqrt(state_dim),
                                          (channels, state_dim)), requires_grad=True),
            skip_gain=Tensor(np.ones(channels), requires_grad=True),
        )

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "log_decay", self.log_decay
        yield "delta_weight", self.delta_weight
        yield "delta_bias", self.delta_bias
        yield "input_gain", self.input_gain
        yield "output_gain", self.output_gain
        yield "skip_gain", self.skip_gain


# -- semantic feature extraction ----------------------------------------------

@dataclass
class SemanticExtractor:
    """Conv3x3 -> SiLU -> Conv3x3 -> SiLU -> Conv1x1 feature projector."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    @staticmethod
    def create(in_channels: int, feature_dim: int,
               rng: np.random.Generator) -> "SemanticExtractor":
        def conv_init(co, ci, s):
            scale = 1.0 / np.sqrt(ci * s * s)
            return Tensor(rng.uniform(-scale, scale, (co, ci, s, s)),
                          requires_grad=True)
        return SemanticExtractor(
            w1=conv_init(feature_dim, in_channels, 3),
            b1=Tensor(np.zeros(feature_dim), requires_grad=True),
            w2=conv_init(feature_dim, feature_dim, 3),
            b2=Tensor(np.zeros(feature_dim), requires_grad=True),
            w3=conv_init(feature_dim, feature_dim, 1),
            b3=Tensor(np.zeros(feature_dim), requires_grad=True),
        )

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            yield name, getattr(self, name)


def _bias3(b: Tensor) -> Tensor:
    return T.reshape(b, (b.shape[0], 1, 1))


def extract_semantic_features(x: Tensor, weights: SemanticExtractor) -> Tensor:
    h = T.silu(T.conv2d(x, weights.w1, weights.b1))
    h = T.silu(T.conv2d(h, weights.w2, weights.b2))
    return T.conv2d(h, weights.w3, weights.b3)


def add_positional_encoding(feat: Tensor) -> Tensor:
    """Add a 2-D sinusoidal position field.

    Coordinates are normalised as u = col/W, v = row/H in [0, 1); the
    first half of the channels receives sin(pi v), the second half
    cos(pi u), so every grid position gets a distinct signature without
    changing the channel count.
    """
    c, h, w = feat.shape
    if c < 2:
        raise T.ShapeError("positional encoding needs at least 2 channels")
    v = np.arange(h, dtype=T.DTYPE)[:, None] / h
    u = np.arange(w, dtype=T.DTYPE)[None, :] / w
    half = c // 2
    pe = np.empty((c, h, w), dtype=T.DTYPE)
    pe[:half] = np.broadcast_to(np.sin(np.pi * v), (h, w))
    pe[half:] = np.broadcast_to(np.cos(np.pi * u), (h, w))
    return feat + Tensor(pe)


def soft_assign(feat: Tensor, cfg: ClusterConfig) -> Tensor:
    """Cosine-similarity soft assignment, shape (K, N).

    Zero-norm pixels or centers are regularised with a small epsilon on
    the norms instead of failing.
    """
    c, h, w = feat.shape
    flat = T.reshape(feat, (c, h * w))                       # (C, N)
    norms = T.sqrt(T.reduce_sum(flat * flat, axis=0, keepdims=True) + COSINE_EPS ** 2)
    centers = cfg.centers
    cn = T.sqrt(T.reduce_sum(centers * centers, axis=1, keepdims=True)
                + COSINE_EPS ** 2)
    sims = T.matmul(centers, flat)                           # (K, N)
    scale = T.matmul(cn, norms)                              # (K, N) broadcasted norms
    logits = sims / (scale * cfg.temperature)
    return T.softmax(logits, axis=0)


def gumbel_noise(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + GUMBEL_EPS) + GUMBEL_EPS)


def gumbel_soft_sample(p: Tensor, rng: np.random.Generator | None,
                       relax_temperature: float = 1.0) -> Tensor:
    """Differentiable relaxed sample: softmax((log p + G)/tau_g) over k."""
    logits = T.log(p + 1e-30)
    if rng is not None:
        logits = logits + Tensor(gumbel_noise(p.shape, rng))
    if relax_temperature != 1.0:
        logits = logits / relax_temperature
    return T.softmax(logits, axis=0)


def hard_assign(p: Tensor, gumbel_enabled: bool,
                rng: np.random.Generator | int | None = None,
                mode: str = "hard") -> Tensor:
    """One-hot cluster assignment, (K, N).

    ``mode='hard'`` returns one-hot columns (argmax of the noisy logits,
    ties to the smallest k) with a straight-through backward that routes
    gradients through the relaxed softmax sample. ``mode='soft'`` returns
    the relaxed sample itself, the configuration used by the gradient
    checks. With ``gumbel_enabled=False`` no noise is drawn.
    """
    if mode not in ("hard", "soft"):
        raise ValueError(f"unknown assignment mode {mode!r}")
    gen = None
    if gumbel_enabled:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    soft = gumbel_soft_sample(p, gen)
    if mode == "soft":
        return soft
    idx = np.argmax(soft.data, axis=0)           # first max wins ties
    onehot = np.zeros_like(soft.data)
    onehot[idx, np.arange(soft.shape[1])] = 1.0
    return T.make_op(onehot, (soft,), lambda g: (g,))


def cluster_sort_keys(q: np.ndarray, height: int, width: int
                      ) -> list[tuple[float, float]]:
    """Mean (col, row) of each cluster's members; empty clusters sort last."""
    k, n = q.shape
    if n != height * width:
        raise T.ShapeError("assignment length does not match the grid")
    cols = np.tile(np.arange(width, dtype=T.DTYPE), height)
    rows = np.repeat(np.arange(height, dtype=T.DTYPE), width)
    keys = []
    for ki in range(k):
        members = q[ki] > 0.5
        count = members.sum()
        if count == 0:
            keys.append((np.inf, np.inf))
        else:
            keys.append((float(cols[members].mean()), float(rows[members].mean())))
    return keys


def build_permutation(q: np.ndarray, sort_keys: list[tuple[float, float]]
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Cluster-contiguous scan order and its inverse.

    Clusters are visited in ascending (mean col, mean row, cluster id);
    inside a cluster pixels keep their raster order.
    """
    k, n = q.shape
    order = sorted(range(k), key=lambda ki: (sort_keys[ki][0], sort_keys[ki][1], ki))
    labels = np.argmax(q, axis=0)
    perm = np.concatenate([np.nonzero(labels == ki)[0] for ki in order])
    if perm.shape != (n,):
        raise T.ShapeError("permutation does not cover all pixels")
    perm_inv = np.argsort(perm)
    return perm, perm_inv


def semantic_permutation(x: Tensor, extractor: SemanticExtractor,
                         cfg: ClusterConfig, rng: np.random.Generator | None,
                         mode: str = "hard") -> SemanticAssignment:
    """Full clustering pipeline on one feature map."""
    feat = add_positional_encoding(extract_semantic_features(x, extractor))
    p = soft_assign(feat, cfg)
    q = hard_assign(p, cfg.gumbel_enabled and rng is not None, rng, mode=mode)
    q_np = q.data if mode == "hard" else _soft_to_onehot(q.data)
    _, h, w = x.shape
    keys = cluster_sort_keys(q_np, h, w)
    perm, perm_inv = build_permutation(q_np, keys)
    return SemanticAssignment(soft=p, hard=q, perm=perm, perm_inv=perm_inv,
                              sort_keys=keys)


def _soft_to_onehot(soft: np.ndarray) -> np.ndarray:
    idx = np.argmax(soft, axis=0)
    onehot = np.zeros_like(soft)
    onehot[idx, np.arange(soft.shape[1])] = 1.0
    return onehot


# -- linear first-order scan ----------------------------------------------------

def _scan_blocks(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h[t] = a[t] * h[t-1] + u[t], h[-1] = 0, vectorised in fixed blocks.

    Within a block the recurrence composites are combined by binary
    doubling; blocks are chained sequentially, so total work is linear
    in sequence length.
    """
    n = a.shape[0]
    h = np.empty_like(u)
    carry = np.zeros(u.shape[1:], dtype=u.dtype)
    for start in range(0, n, SCAN_BLOCK):
        stop = min(start + SCAN_BLOCK, n)
        ab = a[start:stop].copy()
        ub = u[start:stop].copy()
        length = stop - start
        shift = 1
        while shift < length:
            ub[shift:] = ub[shift:] + ab[shift:] * ub[:-shift]
            ab[shift:] = ab[shift:] * ab[:-shift]
            shift *= 2
        hb = ub + ab * carry
        h[start:stop] = hb
        carry = hb[-1]
    return h


def linear_scan(a: Tensor, u: Tensor) -> Tensor:
    """Differentiable first-order recurrence h_t = a_t h_{t-1} + u_t."""
    if a.shape != u.shape:
        raise T.ShapeError("scan decay and input must share a shape")
    h = _scan_blocks(a.data, u.data)
    a_data = a.data

    def bw(g):
        # adjoint runs the same recurrence backwards:
        #   lam_t = g_t + a_{t+1} lam_{t+1}
        a_next = np.concatenate([a_data[1:], np.zeros_like(a_data[:1])], axis=0)
        lam = _scan_blocks(a_next[::-1].copy(), g[::-1].copy())[::-1]
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        return lam * h_prev, lam.copy()
    return T.make_op(h, (a, u), bw)


def ssm_scan(seq: Tensor, params: SsmParams) -> Tensor:
    """Selective scan along a (N, C) sequence, linear cost in N.

    Per position the step size comes from a softplus-projected input,
    the decay is exp(step * A) with A strictly negative, and the output
    mixes the hidden state with a learned skip of the input.
    """
    n, c = seq.shape
    if n < 1:
        raise T.ShapeError("scan needs at least one position")
    for _, t in params.tensors():
        if not np.all(np.isfinite(t.data)):
            raise T.NonFiniteError("non-finite scan parameters")
    delta = T.softplus(T.matmul(seq, params.delta_weight)
                       + T.reshape(params.delta_bias, (1, c)))          # (N, C)
    decay = -T.exp(params.log_decay)                                     # (C, D)
    d = params.state_dim
    abar = T.exp(T.reshape(delta, (n, c, 1)) * T.reshape(decay, (1, c, d)))
    drive = T.reshape(delta * seq, (n, c, 1)) \
        * T.reshape(params.input_gain, (1, c, d))
    h = linear_scan(abar, drive)                                         # (N, C, D)
    mixed = T.reduce_sum(h * T.reshape(params.output_gain, (1, c, d)), axis=2)
    return mixed + seq * T.reshape(params.skip_gain, (1, c))


# -- the residual block ----------------------------------------------------------

@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @staticmethod
    def create(channels: int) -> "LayerNormParams":
        return LayerNormParams(Tensor(np.ones(channels), requires_grad=True),
                               Tensor(np.zeros(channels), requires_grad=True))

    def tensors(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-6) -> Tensor:
    """Normalise across channels at each spatial position."""
    mean = T.reduce_mean(x, axis=0, keepdims=True)
    centered = x - mean
    var = T.reduce_mean(centered * centered, axis=0, keepdims=True)
    normed = centered / T.sqrt(var + eps)
    return normed * _bias3(params.gamma) + _bias3(params.beta)


def _conv_w(rng, co, ci, s=1):
    # He-style fan-in scaling keeps activation variance roughly flat
    # through the conv stacks
    scale = np.sqrt(2.0 / (ci * s * s))
    return Tensor(rng.normal(0.0, scale, (co, ci, s, s)), requires_grad=True)


@dataclass
class SambBlock:
    """Residual semantic-aware scan block.

    The permutation is computed from the block input itself; the value
    stream is projected, shifted by a per-cluster embedding, scanned
    along the permutation, restored, gated and projected back. A small
    conv feed-forward tail follows.
    """
    channels: int
    inner: int
    norm: LayerNormParams
    extractor: SemanticExtractor
    cluster_cfg: ClusterConfig
    value_w: Tensor
    value_b: Tensor
    gate_w: Tensor
    gate_b: Tensor
    out_w: Tensor
    out_b: Tensor
    cluster_embed: Tensor            # (inner, K)
    ssm: SsmParams
    ffn_norm: LayerNormParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @staticmethod
    def create(channels: int, clusters: int, rng: np.random.Generator,
               feature_dim: int = 16, state_dim: int = 8,
               temperature: float = 0.5, expand: int = 2) -> "SambBlock":
        inner = channels * expand
        cfg = ClusterConfig(clusters=clusters, feature_dim=feature_dim,
                            temperature=temperature)
        cfg.init_centers(rng)
        return SambBlock(
            channels=channels, inner=inner,
            norm=LayerNormParams.create(channels),
            extractor=SemanticExtractor.create(channels, feature_dim, rng),
            cluster_cfg=cfg,
            value_w=_conv_w(rng, inner, channels), value_b=_zeros(inner),
            gate_w=_conv_w(rng, inner, channels), gate_b=_zeros(inner),
            out_w=Tensor(rng.normal(0.0, 0.02 / np.sqrt(inner),
                                    (channels, inner, 1, 1)), requires_grad=True),
            out_b=_zeros(channels),
            cluster_embed=Tensor(rng.normal(0.0, 0.02, (inner, clusters)),
                                 requires_grad=True),
            ssm=SsmParams.create(inner, state_dim, rng),
            ffn_norm=LayerNormParams.create(channels),
            ffn_w1=_conv_w(rng, 2 * channels, channels),
            ffn_b1=_zeros(2 * channels),
            ffn_w2=Tensor(rng.normal(0.0, 0.02 / np.sqrt(2 * channels),
                                     (channels, 2 * channels, 1, 1)),
                          requires_grad=True),
            ffn_b2=_zeros(channels),
        )

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for n, t in self.norm.tensors():
            yield f"norm.{n}", t
        for n, t in self.extractor.tensors():
            yield f"extractor.{n}", t
        yield "centers", self.cluster_cfg.centers
        for name in ("value_w", "value_b", "gate_w", "gate_b", "out_w", "out_b",
                     "cluster_embed", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
            yield name, getattr(self, name)
        for n, t in self.ssm.tensors():
            yield f"ssm.{n}", t
        for n, t in self.ffn_norm.tensors():
            yield f"ffn_norm.{n}", t

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                assignment_mode: str = "hard",
                trace: SemanticAssignment | None = None) -> Tensor:
        return self._forward(x, rng, assignment_mode, trace_out=None)

    def forward_with_assignment(self, x: Tensor,
                                rng: np.random.Generator | None = None,
                                assignment_mode: str = "hard"
                                ) -> tuple[Tensor, SemanticAssignment]:
        holder: list[SemanticAssignment] = []
        out = self._forward(x, rng, assignment_mode, trace_out=holder)
        return out, holder[0]

    def _forward(self, x, rng, assignment_mode, trace_out):
        c, h, w = x.shape
        if c != self.channels:
            raise T.ShapeError(f"block expects {self.channels} channels, got {c}")
        assign = semantic_permutation(x, self.extractor, self.cluster_cfg, rng,
                                      mode=assignment_mode)
        if trace_out is not None:
            trace_out.append(assign)

        normed = layer_norm(x, self.norm)
        value = T.silu(T.conv2d(normed, self.value_w, self.value_b))
        gate = T.silu(T.conv2d(normed, self.gate_w, self.gate_b))

        # per-cluster embedding rides on the value stream; this is the
        # numeric consumer of the (straight-through) assignment
        embed = T.matmul(self.cluster_embed, assign.hard)         # (inner, N)
        value = value + T.reshape(embed, (self.inner, h, w))

        seq = T.transpose(T.reshape(value, (self.inner, h * w)))  # (N, inner)
        seq = T.gather_rows(seq, assign.perm)
        scanned = ssm_scan(seq, self.ssm)
        restored = T.gather_rows(scanned, assign.perm_inv)
        grid = T.reshape(T.transpose(restored), (self.inner, h, w))

        mixed = grid * gate
        out = T.conv2d(mixed, self.out_w, self.out_b)
        x = x + out

        ffn_in = layer_norm(x, self.ffn_norm)
        hmid = T.silu(T.conv2d(ffn_in, self.ffn_w1, self.ffn_b1))
        return x + T.conv2d(hmid, self.ffn_w2, self.ffn_b2)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def write_scan_trace(path, assign: SemanticAssignment, height: int,
                     width: int) -> None:
    """CSV trace of the scan trajectory: seq_pos, pixel_row, pixel_col, cluster_id."""
    labels = np.argmax(assign.hard.data, axis=0)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq_pos", "pixel_row", "pixel_col", "cluster_id"])
        for pos, pix in enumerate(assign.perm):
            writer.writerow([pos, int(pix // width), int(pix % width),
                             int(labels[pix])])
