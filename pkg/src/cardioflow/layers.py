"""3D convolution layers and the frozen feature-pyramid extractor.

Convolutions are evaluated as one large GEMM over gathered kernel taps
(im2col), chunked over the batch so the gathered column matrix stays
bounded in memory.  Transposed convolution reuses the same gather/scatter
primitives with the roles of forward and backward swapped, so the adjoint
identity between the two holds exactly.
"""

from __future__ import annotations

import hashlib
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, TrainingError, ValidationError
from .tensor import Tensor

# Upper bound on gathered-column elements per GEMM; keeps peak transient
# memory near 128 MB in float32.
_COL_BUDGET = 32_000_000


def conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out <= 0:
        raise DimensionError(
            f"conv output extent {out} is not positive for input {n}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def deconv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    out = (n - 1) * stride - 2 * padding + k
    if out <= 0:
        raise DimensionError(
            f"deconv output extent {out} is not positive for input {n}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _gather_taps(xp_t: np.ndarray, k: int, stride: int, win: tuple) -> np.ndarray:
    """Collect kernel taps from a channel-major padded block.

    ``xp_t`` is (C, B, Dp, Hp, Wp); returns (C * k^3, B * prod(win)) with
    the tap index varying fastest after the channel.
    """
    c_n, b_n = xp_t.shape[:2]
    dw, hw, ww = win
    cols = np.empty((c_n, k, k, k, b_n, dw, hw, ww), dtype=xp_t.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp_t[
                    :, :, i : i + (dw - 1) * stride + 1 : stride,
                    j : j + (hw - 1) * stride + 1 : stride,
                    l : l + (ww - 1) * stride + 1 : stride,
                ].transpose(1, 0, 2, 3, 4)
    return cols.reshape(c_n * k ** 3, b_n * dw * hw * ww)


def _scatter_taps(cols: np.ndarray, k: int, stride: int, win: tuple,
                  padded: tuple, b_n: int) -> np.ndarray:
    """Adjoint of :func:`_gather_taps`: accumulate taps into a padded block.

    Within one tap the strided targets are disjoint, so each tap is a
    single vectorized add; overlap between taps is handled by the loop.
    Returns (B, C, *padded).
    """
    c_n = cols.shape[0] // k ** 3
    dw, hw, ww = win
    colsr = cols.reshape(c_n, k, k, k, b_n, dw, hw, ww)
    out = np.zeros((b_n, c_n) + padded, dtype=cols.dtype)
    out_t = out.transpose(1, 0, 2, 3, 4)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out_t[
                    :, :, i : i + (dw - 1) * stride + 1 : stride,
                    j : j + (hw - 1) * stride + 1 : stride,
                    l : l + (ww - 1) * stride + 1 : stride,
                ] += colsr[:, i, j, l]
    return out


def _batch_chunks(b_n: int, per_sample_cols: int):
    step = max(1, _COL_BUDGET // max(1, per_sample_cols))
    for start in range(0, b_n, step):
        yield start, min(start + step, b_n)


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           stride: int, padding: int) -> Tensor:
    """Standard cross-correlation with zero padding, recorded on the tape."""
    if x.data.ndim != 5:
        raise DimensionError(f"conv3d expects (batch, channels, d, h, w), got {x.shape}")
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c_in:
        raise DimensionError(f"input channels {x.shape[1]} do not match weight {weight.shape}")
    b_n = x.shape[0]
    win = tuple(conv_out_extent(n, k, stride, padding) for n in x.shape[2:])
    n_out = int(np.prod(win))
    w2 = weight.data.reshape(c_out, c_in * k ** 3)
    out = np.empty((b_n, c_out) + win, dtype=x.data.dtype)
    for s0, s1 in _batch_chunks(b_n, c_in * k ** 3 * n_out):
        xp_t = _pad_spatial(x.data[s0:s1], padding).transpose(1, 0, 2, 3, 4)
        cols = _gather_taps(xp_t, k, stride, win)
        o2 = np.matmul(w2, cols)
        if bias is not None:
            o2 += bias.data[:, None]
        out[s0:s1] = o2.reshape((c_out, s1 - s0) + win).transpose(1, 0, 2, 3, 4)

    def bwd(g):
        db = None if bias is None else g.sum(axis=(0, 2, 3, 4))
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        dx = np.empty_like(x.data) if x.requires_grad else None
        padded = tuple(n + 2 * padding for n in x.shape[2:])
        for c0, c1 in _batch_chunks(b_n, c_in * k ** 3 * n_out):
            g2 = g[c0:c1].transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
            if dw is not None:
                xp_t = _pad_spatial(x.data[c0:c1], padding).transpose(1, 0, 2, 3, 4)
                cols = _gather_taps(xp_t, k, stride, win)
                dw += np.matmul(g2, cols.T).reshape(weight.data.shape)
            if dx is not None:
                dcols = np.matmul(w2.T, g2)
                dxp = _scatter_taps(dcols, k, stride, win, padded, c1 - c0)
                if padding:
                    dxp = dxp[:, :, padding:-padding, padding:-padding, padding:-padding]
                dx[c0:c1] = dxp
        if dx is not None:
            x.accumulate_grad(dx)
        if dw is not None:
            weight.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return T._make(out, parents, bwd, "conv3d")


def deconv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
             stride: int, padding: int) -> Tensor:
    """Transposed convolution: the exact adjoint of conv3d's input gradient."""
    if x.data.ndim != 5:
        raise DimensionError(f"deconv3d expects (batch, channels, d, h, w), got {x.shape}")
    c_in, c_out, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c_in:
        raise DimensionError(f"input channels {x.shape[1]} do not match weight {weight.shape}")
    b_n = x.shape[0]
    win = x.shape[2:]
    n_in = int(np.prod(win))
    ext = tuple(deconv_out_extent(n, k, stride, padding) for n in win)
    padded = tuple(n + 2 * padding for n in ext)
    w2 = weight.data.reshape(c_in, c_out * k ** 3)
    out = np.empty((b_n, c_out) + ext, dtype=x.data.dtype)
    for s0, s1 in _batch_chunks(b_n, c_out * k ** 3 * n_in):
        y2 = x.data[s0:s1].transpose(1, 0, 2, 3, 4).reshape(c_in, -1)
        cols = np.matmul(w2.T, y2)
        op = _scatter_taps(cols, k, stride, win, padded, s1 - s0)
        if padding:
            op = op[:, :, padding:-padding, padding:-padding, padding:-padding]
        out[s0:s1] = op
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)

    def bwd(g):
        db = None if bias is None else g.sum(axis=(0, 2, 3, 4))
        dw = np.zeros_like(weight.data) if weight.requires_grad else None
        dx = np.empty_like(x.data) if x.requires_grad else None
        for c0, c1 in _batch_chunks(b_n, c_out * k ** 3 * n_in):
            gp_t = _pad_spatial(g[c0:c1], padding).transpose(1, 0, 2, 3, 4)
            gcols = _gather_taps(gp_t, k, stride, win)
            if dx is not None:
                dx[c0:c1] = np.matmul(w2, gcols).reshape(
                    (c_in, c1 - c0) + win).transpose(1, 0, 2, 3, 4)
            if dw is not None:
                y2 = x.data[c0:c1].transpose(1, 0, 2, 3, 4).reshape(c_in, -1)
                dw += np.matmul(y2, gcols.T).reshape(weight.data.shape)
        if dx is not None:
            x.accumulate_grad(dx)
        if dw is not None:
            weight.accumulate_grad(dw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return T._make(out, parents, bwd, "deconv3d")


def _init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d:
    """3D convolution layer; output extent = floor((in + 2p - k)/s) + 1 per axis."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel ** 3
        self.weight = Tensor(_init_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Deconv3d:
    """Transposed 3D convolution; output extent = (in - 1)s - 2p + k per axis."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2,
                 padding: int = 1, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_ch * kernel ** 3
        self.weight = Tensor(_init_uniform(rng, (in_ch, out_ch, kernel, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return deconv3d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


DEFAULT_PYRAMID_CHANNELS = (16, 32, 32, 64, 64)


class FeaturePyramid:
    """Multi-scale conditioning features; level i sits at scale 1/2^(i+1)."""

    def __init__(self, levels: Sequence[Tensor], parent_extents: tuple):
        self.levels = list(levels)
        self.parent_extents = tuple(parent_extents)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> Tensor:
        return self.levels[i]


class FpnExtractor:
    """Stack of stride-2 reducer + stride-1 refiner conv pairs.

    Once frozen, its parameters never receive gradients and their content
    hash stays bit-identical across any amount of downstream training.
    """

    def __init__(self, levels: int = 5, in_channels: int = 1,
                 channels: Sequence[int] = DEFAULT_PYRAMID_CHANNELS,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if len(channels) != levels:
            raise ValidationError(f"need one channel count per level, got {channels} for L={levels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.levels = levels
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.frozen = False
        self.blocks = []
        prev = in_channels
        for ch in channels:
            reduce = Conv3d(prev, ch, kernel=3, stride=2, padding=1, rng=rng, dtype=dtype)
            refine = Conv3d(ch, ch, kernel=3, stride=1, padding=1, rng=rng, dtype=dtype)
            self.blocks.append((reduce, refine))
            prev = ch

    def named_parameters(self):
        out = []
        for i, (reduce, refine) in enumerate(self.blocks):
            for tag, layer in (("reduce", reduce), ("refine", refine)):
                for name, p in layer.parameters():
                    out.append((f"fpn.level{i}.{tag}.{name}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode())
            digest.update(p.data.tobytes())
        return digest.hexdigest()

    def extract(self, frame: Tensor) -> FeaturePyramid:
        """Build the L-level pyramid for a conditioning frame (B, C, D, H, W)."""
        if frame.data.ndim != 5:
            raise DimensionError(f"expected (batch, channels, d, h, w), got {frame.shape}")
        if frame.shape[1] != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} channel(s), got {frame.shape[1]}")
        factor = 2 ** self.levels
        for n in frame.shape[2:]:
            if n % factor != 0:
                raise DimensionError(
                    f"frame extent {n} is not divisible by 2^{self.levels}; "
                    f"pad the volume to a multiple of {factor}"
                )
        x = frame
        levels = []
        for reduce, refine in self.blocks:
            x = T.leaky_relu(reduce(x))
            x = T.leaky_relu(refine(x))
            levels.append(x)
        return FeaturePyramid(levels, frame.shape[2:])


def average_pool(values: np.ndarray, factor: int) -> np.ndarray:
    """Block-average each spatial axis of (B, C, D, H, W) by ``factor``."""
    b, c, d, h, w = values.shape
    r = values.reshape(b, c, d // factor, factor, h // factor, factor, w // factor, factor)
    return r.mean(axis=(3, 5, 7))


def pretrain_fpn(samples, config, out_dir=None, channels: Sequence[int] = DEFAULT_PYRAMID_CHANNELS,
                 levels: int = 5) -> FpnExtractor:
    """Train the extractor on a motion proxy task, then freeze it.

    Each level gets a throwaway linear head that regresses the sample's
    ground-truth flow, block-averaged down to the level's resolution; the
    heads are discarded afterwards.  ``config`` is a training.TrainConfig.
    """
    from .optim import Adam, clip_gradients

    if not samples:
        raise ValidationError("pretraining needs a non-empty dataset")
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([config.seed, 0xF9])))
    extractor = FpnExtractor(levels=levels, in_channels=1, channels=channels, rng=rng)
    heads = [
        (Tensor(_init_uniform(rng, (3, ch), ch, np.float32), requires_grad=True),
         Tensor(np.zeros(3, dtype=np.float32), requires_grad=True))
        for ch in channels
    ]
    params = extractor.named_parameters() + [
        (f"head{i}.{n}", p) for i, (w, b) in enumerate(heads) for n, p in (("weight", w), ("bias", b))
    ]
    opt = Adam([p for _, p in params], learning_rate=config.learning_rate)
    batch = min(config.batch_size, len(samples))
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_batches = 0
        for b0 in range(0, len(order) - batch + 1, batch):
            idx = order[b0:b0 + batch]
            frames = np.stack([samples[i].es_frame.values for i in idx])[:, None]
            flows = np.stack([samples[i].flow_gt.vectors for i in idx])
            pyramid = extractor.extract(Tensor(frames))
            loss = None
            for lv, (w, b) in enumerate(heads):
                target = average_pool(flows, 2 ** (lv + 1))
                pred = T.matmul_channels(pyramid[lv], w, b)
                diff = pred - Tensor(target)
                term = (diff * diff).mean()
                loss = term if loss is None else loss + term
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"fpn pretraining diverged at epoch {epoch}, batch {n_batches}")
            T.zero_grads(opt.params)
            loss.backward()
            clip_gradients(params, config.clip_max_norm)
            opt.step()
            epoch_loss += value
            n_batches += 1
        if n_batches:
            log.append(epoch_loss / n_batches)
    extractor.freeze()
    if out_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(
            f"{out_dir}/fpn.cvc",
            dict(extractor.named_parameters()),
            epoch=config.epochs,
            config_text="\n".join(
                [f"levels = {levels}", "in_channels = 1",
                 f"channels = {','.join(str(c) for c in channels)}"]
            ),
        )
    return extractor


def proxy_loss(extractor: FpnExtractor, heads, samples) -> float:
    """Mean proxy-task loss of an extractor/head pair over a sample list."""
    total = 0.0
    for s in samples:
        frame = Tensor(s.es_frame.values[None, None])
        flow = s.flow_gt.vectors[None]
        pyramid = extractor.extract(frame)
        for lv, (w, b) in enumerate(heads):
            target = average_pool(flow, 2 ** (lv + 1))
            pred = T.matmul_channels(pyramid[lv], w, b)
            total += float(np.mean((pred.data - target) ** 2))
    return total / len(samples)
