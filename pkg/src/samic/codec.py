"""The assembled codec: transforms, pipelines, objective and training.

The analysis transform stacks four stride-2 convolutions with scan
blocks after the second, third and fourth stage; the latent then passes
through the low-rank redundancy reduction. The hyper pair is two
stride-2 stages down and their nearest-neighbour-upsampled mirror. The
synthesis transform mirrors analysis and clamps to [0, 1]. Encoding
walks the entropy model's causal order (hyper-latent first, then latent
chunks, anchors before non-anchors) and range-codes every symbol;
decoding replays the identical order, so the decoded reconstruction is
bit-equal to the encoder's own simulation.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import coder as rc
from . import entropy as ent
from . import metrics
from . import svd_rrm
from . import tensor as T
from .sass import LayerNormParams, SambBlock, _bias3, _conv_w, _zeros, layer_norm
from .tensor import Tensor

LAMBDA_GRID = (0.0035, 0.0067, 0.013, 0.025)
PAD_MULTIPLE = 64
CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
# transforms emit values strictly inside the coder's clipped alphabet
# (B = 64), so escape symbols never fire on in-range models
LATENT_BOUND = 60.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective knobs; serialised into checkpoints."""
    preset: str = "toy"
    widths: tuple = (32, 32, 32, 48, 32, 48)
    c_latent: int = 48
    c_hyper: int = 16
    clusters: int = 16
    chunks: int = 4
    lambda_index: int = 0
    beta: float = 3.5
    sem_dim: int = 16
    state_dim: int = 8
    samb_per_stage: int = 1
    ctx: int = 24
    agg_hidden: int = 48
    window: int = 8
    temperature: float = 0.5
    use_rrm: bool = True
    latent_gain: float = 2.0

    def __post_init__(self):
        if len(self.widths) != 6 or any(w <= 0 for w in self.widths):
            raise ValueError("expected six positive stage widths")
        if self.widths[3] != self.c_latent:
            raise ValueError("the fourth stage width must equal the latent width")
        if not 0 <= self.lambda_index < len(LAMBDA_GRID):
            raise ValueError("lambda index outside the published grid")

    @property
    def lam(self) -> float:
        return LAMBDA_GRID[self.lambda_index]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(blob: str) -> "ModelConfig":
        raw = json.loads(blob)
        raw["widths"] = tuple(raw["widths"])
        return ModelConfig(**raw)


def toy_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides)


def paper_config(**overrides) -> ModelConfig:
    base = ModelConfig(preset="paper", widths=(128, 128, 128, 192, 128, 192),
                       c_latent=192, c_hyper=64, clusters=16, sem_dim=16,
                       state_dim=16, samb_per_stage=3, ctx=96, agg_hidden=384,
                       window=8)
    return replace(base, **overrides)


class _Conv:
    def __init__(self, name, cin, cout, size, rng, bias_init=0.0):
        self.name = name
        self.w = _conv_w(rng, cout, cin, size)
        self.b = Tensor(np.full(cout, bias_init), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b)

    def tensors(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


def _down(x: Tensor, conv: _Conv) -> Tensor:
    return T.subsample2x(conv(x))


def _up(x: Tensor, conv: _Conv) -> Tensor:
    return conv(T.upsample_nearest2x(x))


class CodecModel:
    """Holds every learnable tensor and the encode/decode/train entry points."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c1, c2, c3, c4, c5, c6 = cfg.widths
        samb_kw = dict(feature_dim=cfg.sem_dim, state_dim=cfg.state_dim,
                       temperature=cfg.temperature)

        def blocks(channels):
            return [SambBlock.create(channels, cfg.clusters, rng, **samb_kw)
                    for _ in range(cfg.samb_per_stage)]

        self.ga_convs = [_Conv("ga0", 3, c1, 5, rng), _Conv("ga1", c1, c2, 3, rng),
                         _Conv("ga2", c2, c3, 3, rng), _Conv("ga3", c3, c4, 3, rng)]
        self.ga_blocks = [blocks(c2), blocks(c3), blocks(c4)]
        # learnable output scale: starts the quantised latent spread over
        # several integer bins instead of collapsing onto zero
        self.latent_gain = Tensor(np.full(c4, cfg.latent_gain), requires_grad=True)
        self.rrm = svd_rrm.RrmParams.create(theta=0.01, alpha=0.1)
        self.ha_convs = [_Conv("ha0", c4, c5, 3, rng), _Conv("ha1", c5, cfg.c_hyper, 3, rng)]
        self.hs_convs = [_Conv("hs0", cfg.c_hyper, c5, 3, rng), _Conv("hs1", c5, c6, 3, rng)]
        self.gs_blocks = [blocks(c4), blocks(c3), blocks(c2)]
        # normalising the decoder input makes the trunk indifferent to the
        # latent's dynamic range; without it large latents slam the output
        # clamp and training collapses onto the constant predictor
        self.gs_norm = LayerNormParams.create(c4)
        self.gs_convs = [_Conv("gs0", c4, c3, 3, rng), _Conv("gs1", c3, c2, 3, rng),
                         _Conv("gs2", c2, c1, 3, rng),
                         _Conv("gs3", c1, 3, 5, rng, bias_init=0.5)]
        # temper the output conv so early reconstructions sit inside the
        # [0, 1] clamp instead of saturating it (dead gradients otherwise)
        self.gs_convs[-1].w.data *= 0.1
        self.entropy = ent.EntropyModel(
            c_latent=cfg.c_latent, c_hyper=cfg.c_hyper, chunks=cfg.chunks,
            ctx=cfg.ctx, psi=c6, hidden=cfg.agg_hidden, clusters=cfg.clusters,
            window=cfg.window, rng=rng, **samb_kw)

    # -- parameter plumbing ---------------------------------------------------

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for conv in self.ga_convs + self.ha_convs + self.hs_convs + self.gs_convs:
            yield from ((f"conv.{n}", t) for n, t in conv.tensors())
        for stage, group in enumerate(self.ga_blocks):
            for b, blk in enumerate(group):
                yield from ((f"ga.s{stage}.b{b}.{n}", t) for n, t in blk.tensors())
        for stage, group in enumerate(self.gs_blocks):
            for b, blk in enumerate(group):
                yield from ((f"gs.s{stage}.b{b}.{n}", t) for n, t in blk.tensors())
        yield "latent_gain", self.latent_gain
        yield from ((f"gs_norm.{n}", t) for n, t in self.gs_norm.tensors())
        yield from ((f"rrm.{n}", t) for n, t in self.rrm.tensors())
        yield from ((f"entropy.{n}", t) for n, t in self.entropy.tensors())

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())

    # -- transforms -------------------------------------------------------------

    def analysis_raw(self, x: Tensor, rng=None, mode="hard") -> Tensor:
        """g_a without the redundancy reduction."""
        h = _down(x, self.ga_convs[0])
        h = _down(h, self.ga_convs[1])
        for blk in self.ga_blocks[0]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        h = _down(h, self.ga_convs[2])
        for blk in self.ga_blocks[1]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        h = _down(h, self.ga_convs[3])
        for blk in self.ga_blocks[2]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        return h * T.reshape(self.latent_gain, (-1, 1, 1))

    def analysis(self, x: Tensor, rng=None, mode="hard") -> Tensor:
        if x.size == 0:
            raise T.ShapeError("empty image")
        h = self.analysis_raw(x, rng=rng, mode=mode)
        if self.cfg.use_rrm:
            h = svd_rrm.rrm_forward(h, self.rrm)
        return T.clamp(h, lo=-LATENT_BOUND, hi=LATENT_BOUND)

    def hyper_analysis(self, y: Tensor) -> Tensor:
        z = _down(_down(y, self.ha_convs[0]), self.ha_convs[1])
        return T.clamp(z, lo=-LATENT_BOUND, hi=LATENT_BOUND)

    def hyper_synthesis(self, z_hat: Tensor) -> Tensor:
        return _up(_up(z_hat, self.hs_convs[0]), self.hs_convs[1])

    def synthesis(self, y_hat: Tensor, rng=None, mode="hard") -> Tensor:
        h = layer_norm(y_hat, self.gs_norm)
        for blk in self.gs_blocks[0]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        h = _up(h, self.gs_convs[0])
        for blk in self.gs_blocks[1]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        h = _up(h, self.gs_convs[1])
        for blk in self.gs_blocks[2]:
            h = blk.forward(h, rng=rng, assignment_mode=mode)
        h = _up(h, self.gs_convs[2])
        h = _up(h, self.gs_convs[3])
        return T.clamp(h, lo=0.0, hi=1.0)

    # -- objective ----------------------------------------------------------------

    def forward_train(self, x: Tensor, rng: np.random.Generator) -> dict:
        n_pix = x.shape[1] * x.shape[2]
        y = self.analysis(x, rng=rng)
        z = self.hyper_analysis(y)
        z_hat = ent.quantize(z, "train", rng)
        psi = self.hyper_synthesis(z_hat)
        y_hat = ent.quantize(y, "train", rng)
        bundle = self.entropy.bundle(y, y_hat, z, z_hat, psi, rng=rng)
        rate = self.entropy.estimate_rate(bundle, n_pix)
        x_hat = self.synthesis(y_hat, rng=rng)
        return loss_terms(x, x_hat, rate, self.cfg.lam, self.cfg.beta)

    def simulate(self, x: Tensor) -> dict:
        """Deterministic eval-mode pass: rounded latents, no noise."""
        with T.no_grad():
            n_pix = x.shape[1] * x.shape[2]
            y = self.analysis(x)
            z = self.hyper_analysis(y)
            z_hat = ent.quantize(z, "eval")
            psi = self.hyper_synthesis(z_hat)
            y_hat = ent.quantize(y, "eval")
            bundle = self.entropy.bundle(y, y_hat, z, z_hat, psi)
            rate = self.entropy.estimate_rate(bundle, n_pix)
            x_hat = self.synthesis(y_hat)
        return {"y": y, "y_hat": y_hat, "z": z, "z_hat": z_hat, "psi": psi,
                "bundle": bundle, "bpp_estimated": rate.item(), "x_hat": x_hat}

    # -- real bitstreams -------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> tuple[rc.Bitstream, dict]:
        """Image (3, H, W) in [0, 1] -> bitstream plus rate statistics."""
        _, height, width = image.shape
        x = Tensor(pad_image(image))
        sim = self.simulate(x)
        z_hat, y_hat, psi = sim["z_hat"], sim["y_hat"], sim["psi"]

        z_payload = self._encode_hyper(z_hat)
        y_payload = self._encode_latent(y_hat, psi)
        bits = rc.Bitstream(width=width, height=height,
                            lambda_index=self.cfg.lambda_index,
                            clusters=self.cfg.clusters, chunks=self.cfg.chunks,
                            z_payload=z_payload, y_payload=y_payload)
        n_pix = height * width
        stats = {
            "bpp_estimated": sim["bpp_estimated"] * (x.shape[1] * x.shape[2]) / n_pix,
            "bpp_actual": 8.0 * (len(z_payload) + len(y_payload)) / n_pix,
            "x_hat": crop_image(sim["x_hat"].data, height, width),
        }
        return bits, stats

    def _hyper_tables(self) -> list[rc.FrequencyTable]:
        pmf = self.entropy.prior.pmf_alphabet(rc.DEFAULT_CLIP)
        return rc.FrequencyTable.batch_from_pmf(pmf, rc.DEFAULT_CLIP)

    def _encode_hyper(self, z_hat: Tensor) -> bytes:
        tables = self._hyper_tables()
        cz, hz, wz = z_hat.shape
        symbols = z_hat.data.astype(np.int64).ravel().tolist()
        per_symbol = [tables[c] for c in range(cz) for _ in range(hz * wz)]
        return rc.rc_encode(symbols, per_symbol)

    def _decode_hyper(self, payload: bytes, shape: tuple) -> Tensor:
        tables = self._hyper_tables()
        cz, hz, wz = shape
        per_symbol = [tables[c] for c in range(cz) for _ in range(hz * wz)]
        symbols = rc.rc_decode(payload, per_symbol)
        return Tensor(np.asarray(symbols, dtype=T.DTYPE).reshape(shape))

    def _encode_latent(self, y_hat: Tensor, psi: Tensor) -> bytes:
        cs = self.entropy.chunk_size
        _, h, w = y_hat.shape
        amask = ent.anchor_mask(h, w).astype(bool)
        amask_t = Tensor(amask.astype(T.DTYPE)[None])
        enc = rc.RangeEncoder()
        with T.no_grad():
            for j in range(self.entropy.chunks):
                prev = T.slice_channels(y_hat, 0, j * cs) if j > 0 else None
                mu_a, sig_a, phi_ch = self.entropy.chunk_pass1(j, prev, psi)
                chunk = y_hat.data[j * cs:(j + 1) * cs]
                self._code_positions(enc, None, chunk, mu_a.data, sig_a.data, amask)
                anchors_only = T.slice_channels(y_hat, j * cs, (j + 1) * cs) * amask_t
                mu_n, sig_n = self.entropy.chunk_pass2(j, phi_ch, anchors_only, psi)
                self._code_positions(enc, None, chunk, mu_n.data, sig_n.data, ~amask)
        return enc.finish()

    def _decode_latent(self, payload: bytes, psi: Tensor, shape: tuple) -> Tensor:
        cs = self.entropy.chunk_size
        c, h, w = shape
        amask = ent.anchor_mask(h, w).astype(bool)
        amask_t = Tensor(amask.astype(T.DTYPE)[None])
        dec = rc.RangeDecoder(payload)
        y_hat = np.zeros(shape, dtype=T.DTYPE)
        with T.no_grad():
            for j in range(self.entropy.chunks):
                prev = Tensor(y_hat[:j * cs].copy()) if j > 0 else None
                mu_a, sig_a, phi_ch = self.entropy.chunk_pass1(j, prev, psi)
                chunk = y_hat[j * cs:(j + 1) * cs]
                self._code_positions(None, dec, chunk, mu_a.data, sig_a.data, amask)
                anchors_only = Tensor(chunk.copy()) * amask_t
                mu_n, sig_n = self.entropy.chunk_pass2(j, phi_ch, anchors_only, psi)
                self._code_positions(None, dec, chunk, mu_n.data, sig_n.data, ~amask)
        dec.verify_sentinel()
        return Tensor(y_hat)

    @staticmethod
    def _code_positions(enc, dec, chunk: np.ndarray, mu: np.ndarray,
                        sigma: np.ndarray, mask: np.ndarray) -> None:
        """Code (or decode, in place) one pass of a chunk at the masked
        positions, channel-major then raster."""
        cs = chunk.shape[0]
        sel = np.broadcast_to(mask, chunk.shape)
        tables = rc.gaussian_tables(mu[:, mask].ravel(), sigma[:, mask].ravel())
        if enc is not None:
            values = chunk[sel].astype(np.int64)
            for value, table in zip(values, tables):
                enc.encode_value(table, int(value))
        else:
            out = np.empty(len(tables), dtype=T.DTYPE)
            for i, table in enumerate(tables):
                out[i] = dec.decode_value(table)
            chunk[sel] = out

    def decode_image(self, bits: rc.Bitstream) -> np.ndarray:
        if bits.clusters != self.cfg.clusters or bits.chunks != self.cfg.chunks \
                or bits.lambda_index != self.cfg.lambda_index:
            raise rc.CoderError(
                "bitstream was produced by a different model configuration")
        hp = _padded(bits.height)
        wp = _padded(bits.width)
        z_shape = (self.cfg.c_hyper, hp // PAD_MULTIPLE, wp // PAD_MULTIPLE)
        y_shape = (self.cfg.c_latent, hp // 16, wp // 16)
        z_hat = self._decode_hyper(bits.z_payload, z_shape)
        with T.no_grad():
            psi = self.hyper_synthesis(z_hat)
        y_hat = self._decode_latent(bits.y_payload, psi, y_shape)
        with T.no_grad():
            x_hat = self.synthesis(y_hat)
        return crop_image(x_hat.data, bits.height, bits.width)


# -- objective -----------------------------------------------------------------

def loss_terms(x: Tensor, x_hat: Tensor, rate_bpp: Tensor, lam: float,
               beta: float) -> dict:
    """lambda * R + D + beta * P with D the mean-squared error on the
    [0, 1] scale and P = 1 - MS-SSIM standing in for a learned
    perceptual metric."""
    diff = x - x_hat
    distortion = T.reduce_mean(diff * diff)
    perceptual = 1.0 - metrics.ms_ssim(x, x_hat)
    total = rate_bpp * lam + distortion + perceptual * beta
    return {"loss": total, "rate_bpp": rate_bpp, "distortion": distortion,
            "perceptual": perceptual}


# -- optimiser --------------------------------------------------------------------

class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip: float = 1.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.zero_grad()

    def step(self) -> None:
        self.t += 1
        total = 0.0
        for _, t in self.params:
            if t.grad is not None:
                total += float((t.grad ** 2).sum())
        norm = float(np.sqrt(total))
        scale = self.clip / norm if (self.clip and norm > self.clip) else 1.0
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad * scale
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            t.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def train_step(model: CodecModel, batch: list[np.ndarray], opt: Adam,
               rng: np.random.Generator) -> dict | None:
    """One optimisation step over a batch of images.

    Returns the averaged loss parts, or None when a non-finite value
    aborted the step (parameters are left untouched in that case).
    """
    opt.zero_grad()
    try:
        parts_sum = None
        for image in batch:
            parts = model.forward_train(Tensor(image), rng)
            parts_sum = parts if parts_sum is None else {
                k: parts_sum[k] + parts[k] for k in parts}
        scale = 1.0 / len(batch)
        loss = parts_sum["loss"] * scale
        T.backward(loss)
    except T.NonFiniteError:
        opt.zero_grad()
        return None
    opt.step()
    return {k: v.item() * scale for k, v in parts_sum.items()}


# -- image padding ------------------------------------------------------------------

def _padded(extent: int) -> int:
    return ((extent + PAD_MULTIPLE - 1) // PAD_MULTIPLE) * PAD_MULTIPLE


def pad_image(image: np.ndarray) -> np.ndarray:
    """Reflect-pad (3, H, W) so both extents are multiples of 64."""
    _, h, w = image.shape
    ph = _padded(h) - h
    pw = _padded(w) - w
    if ph == 0 and pw == 0:
        return np.asarray(image, dtype=T.DTYPE)
    mode = "reflect" if min(h, w) > 1 else "edge"
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "symmetric" if ph <= h and pw <= w else "edge"
    return np.pad(np.asarray(image, dtype=T.DTYPE),
                  ((0, 0), (0, ph), (0, pw)), mode=mode)


def crop_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.ascontiguousarray(image[:, :height, :width])


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str, model: CodecModel, step: int) -> None:
    """Atomic write: manifest of (path, tensor) pairs plus the config."""
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<B", CHECKPOINT_VERSION)
    blob = model.cfg.to_json().encode()
    payload += struct.pack("<I", len(blob)) + blob
    payload += struct.pack("<Q", step)
    names = list(model.named_params())
    payload += struct.pack("<I", len(names))
    import io
    buf = io.BytesIO()
    for name, tensorv in names:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        T.write_tensor(buf, tensorv.data)
    payload += buf.getvalue()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[CodecModel, int]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, = struct.unpack("<B", f.read(1))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        json_len, = struct.unpack("<I", f.read(4))
        cfg = ModelConfig.from_json(f.read(json_len).decode())
        step, = struct.unpack("<Q", f.read(8))
        count, = struct.unpack("<I", f.read(4))
        model = CodecModel(cfg, np.random.default_rng(0))
        params = dict(model.named_params())
        if count != len(params):
            raise ValueError("checkpoint manifest does not match the model")
        for _ in range(count):
            name_len, = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode()
            data = T.read_tensor(f)
            if name not in params:
                raise ValueError(f"unknown tensor path {name!r}")
            if params[name].data.shape != data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            params[name].data = data
    return model, step


# -- analysis exports -------------------------------------------------------------------

def receptive_field_heatmap(model: CodecModel, image: np.ndarray) -> np.ndarray:
    """|d(centre latent)/d(input)| summed over colour channels, (H, W)."""
    x = Tensor(pad_image(image), requires_grad=True)
    y = model.analysis(x)
    _, hl, wl = y.shape
    mask = np.zeros(y.shape, dtype=T.DTYPE)
    mask[:, hl // 2, wl // 2] = 1.0
    T.backward(T.reduce_sum(y * Tensor(mask)))
    heat = np.abs(x.grad).sum(axis=0)
    _, h, w = image.shape
    return heat[:h, :w]


def latent_correlation(model: CodecModel, image: np.ndarray,
                       max_lag: int = 8) -> list[float]:
    """Mean |Pearson correlation| of the normalised latent per spatial lag."""
    x = Tensor(pad_image(image))
    sim = model.simulate(x)
    w = (sim["y"].data - sim["bundle"].mu.data) / sim["bundle"].sigma.data
    out = []
    for lag in range(1, max_lag + 1):
        cors = []
        for axis in (1, 2):
            a = np.take(w, range(0, w.shape[axis] - lag), axis=axis)
            b = np.take(w, range(lag, w.shape[axis]), axis=axis)
            for ch in range(w.shape[0]):
                av = a[ch].ravel()
                bv = b[ch].ravel()
                sa = av.std()
                sb = bv.std()
                if sa > 1e-12 and sb > 1e-12:
                    cors.append(abs(float(np.corrcoef(av, bv)[0, 1])))
        out.append(float(np.mean(cors)) if cors else 0.0)
    return out
