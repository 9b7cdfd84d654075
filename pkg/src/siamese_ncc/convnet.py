"""A small FusionNet-style encoder-decoder with hand-written backpropagation.

Every convolution is 3x3 with zero "same" padding. Per resolution level the
encoder runs a residual block (three tanh convolutions, the first one's output
added into the last one's pre-activation) followed by 2x2 max pooling. The
decoder upsamples by nearest neighbour, applies a tanh 3x3 convolution, adds
the encoder output of the same level and runs another residual block. A final
linear 3x3 convolution produces one output channel at input resolution.

Public functions take a single 2D raster or an ``(N, H, W)`` batch. Inputs in [0, 1] are mapped to [-1, 1] first.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"NCW1"


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_channels: int = 8
    kernel: int = 3
    block_convs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")
        if self.kernel != 3 or self.block_convs != 3:
            raise ValueError("only 3x3 kernels and 3-conv residual blocks are supported")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def multiple(self) -> int:
        """Input sides must be divisible by this."""
        return 2 ** (self.levels - 1)


def layer_specs(cfg: NetConfig) -> list[tuple[str, int, int]]:
    """``(name, out_channels, in_channels)`` for every conv, in parameter order."""
    specs = []
    for k in range(cfg.levels):
        cin = 1 if k == 0 else cfg.channels(k - 1)
        c = cfg.channels(k)
        specs += [(f"enc{k}.conv1", c, cin), (f"enc{k}.conv2", c, c), (f"enc{k}.conv3", c, c)]
    for k in range(cfg.levels - 2, -1, -1):
        c = cfg.channels(k)
        specs.append((f"dec{k}.up", c, cfg.channels(k + 1)))
        specs += [(f"dec{k}.conv1", c, c), (f"dec{k}.conv2", c, c), (f"dec{k}.conv3", c, c)]
    specs.append(("out", 1, cfg.channels(0)))
    return specs


def param_shapes(cfg: NetConfig) -> list[tuple[int, ...]]:
    shapes = []
    for _, co, ci in layer_specs(cfg):
        shapes += [(co, ci, 3, 3), (co,)]
    return shapes


def param_count(cfg: NetConfig) -> int:
    return sum(9 * co * ci + co for _, co, ci in layer_specs(cfg))


class NetParams:
    """Weights ``(out, in, 3, 3)`` and biases ``(out,)`` per conv, in ``layer_specs`` order."""

    def __init__(self, cfg: NetConfig, tensors: list[np.ndarray]):
        shapes = param_shapes(cfg)
        if len(tensors) != len(shapes):
            raise ValueError(f"expected {len(shapes)} tensors, got {len(tensors)}")
        for t, s in zip(tensors, shapes):
            if t.shape != s:
                raise ValueError(f"tensor shape {t.shape} does not match expected {s}")
        self.cfg = cfg
        self.tensors = tensors
        self.names = [n for n, _, _ in layer_specs(cfg)]

    @property
    def dtype(self):
        return self.tensors[0].dtype

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.names.index(name)
        return self.tensors[2 * i], self.tensors[2 * i + 1]

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.cfg, [t.astype(dtype) for t in self.tensors])

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, [t.copy() for t in self.tensors])

    def zeros_like(self) -> "NetParams":
        return NetParams(self.cfg, [np.zeros_like(t) for t in self.tensors])

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def equal(self, other: "NetParams") -> bool:
        return self.cfg == other.cfg and all(
            np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )


def init(cfg: NetConfig, dtype=np.float32) -> NetParams:
    """Uniform weights in ``+-1/sqrt(fan_in)``, zero biases, seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    tensors = []
    for _, co, ci in layer_specs(cfg):
        bound = 1.0 / np.sqrt(9 * ci)
        tensors.append(rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(dtype))
        tensors.append(np.zeros(co, dtype=dtype))
    return NetParams(cfg, tensors)


# -- primitive layers ---------------------------------------------------------
# Feature maps are stored channels-first as (C, N, H, W) so that every copy in
# im2col moves whole image rows.

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((9, c, n, h, w), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(9 * c, n * h * w)


def _wmat(w: np.ndarray) -> np.ndarray:
    # (out, in, ky, kx) -> (out, ky*kx*in), matching the _im2col row order
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, n, h, wd = x.shape
    out = _wmat(w) @ _im2col(x)
    out += b[:, None]
    return out.reshape(w.shape[0], n, h, wd)


def conv_backward(x, w, g):
    """Gradients ``(dx, dw, db)`` of a same-padded 3x3 conv given output gradient ``g``."""
    c, n, h, wd = x.shape
    co = w.shape[0]
    g2 = g.reshape(co, -1)
    dw = (g2 @ _im2col(x).T).reshape(co, 3, 3, c).transpose(0, 3, 1, 2)
    db = g2.sum(axis=1)
    gcols = (_wmat(w).T @ g2).reshape(9, c, n, h, wd)
    dxp = np.zeros((c, n, h + 2, wd + 2), dtype=g.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        dxp[:, :, dy:dy + h, dx:dx + wd] += gcols[k]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def maxpool_forward(x):
    c, n, h, w = x.shape
    blocks = x.reshape(c, n, h // 2, 2, w // 2, 2)
    # one winner per block so the gradient is not duplicated on ties
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(arg, g):
    c, n, h2, w2 = g.shape
    flat = np.zeros((c, n, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
    blocks = flat.reshape(c, n, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(c, n, 2 * h2, 2 * w2)


def upsample_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(g):
    c, n, h, w = g.shape
    return g.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- network ------------------------------------------------------------------

class Activations:
    """Everything ``backward`` needs from one ``forward`` call."""

    def __init__(self, squeeze: bool, shape: tuple[int, ...]):
        self.squeeze = squeeze
        self.shape = shape
        self.cache: dict[str, object] = {}


def _block_forward(params, prefix, x, acts):
    w1, b1 = params.layer(prefix + ".conv1")
    w2, b2 = params.layer(prefix + ".conv2")
    w3, b3 = params.layer(prefix + ".conv3")
    h1 = np.tanh(conv_forward(x, w1, b1))
    h2 = np.tanh(conv_forward(h1, w2, b2))
    h3 = np.tanh(conv_forward(h2, w3, b3) + h1)
    acts.cache[prefix] = (x, h1, h2, h3)
    return h3


def _block_backward(params, prefix, g3, acts, grads):
    x, h1, h2, h3 = acts.cache[prefix]
    g = g3 * (1 - h3 * h3)
    gh2, dw, db = conv_backward(h2, params.layer(prefix + ".conv3")[0], g)
    grads[prefix + ".conv3"] = (dw, db)
    gh1 = g
    g = gh2 * (1 - h2 * h2)
    d, dw, db = conv_backward(h1, params.layer(prefix + ".conv2")[0], g)
    grads[prefix + ".conv2"] = (dw, db)
    gh1 = gh1 + d
    g = gh1 * (1 - h1 * h1)
    gx, dw, db = conv_backward(x, params.layer(prefix + ".conv1")[0], g)
    grads[prefix + ".conv1"] = (dw, db)
    return gx


def _as_batch(img, dtype):
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim == 2:
        return arr[None, None], True
    if arr.ndim == 3:
        return arr[None], False
    raise ValueError(f"expected a 2D raster or an (N, H, W) batch, got shape {arr.shape}")


def forward(params: NetParams, img) -> tuple[np.ndarray, Activations]:
    """Run the net on one raster ``(H, W)`` or a batch ``(N, H, W)``."""
    cfg = params.cfg
    x, squeeze = _as_batch(img, params.dtype)
    h, w = x.shape[2:]
    m = cfg.multiple
    if h % m or w % m:
        raise ValueError(f"input sides {h}x{w} must be multiples of {m} for {cfg.levels} levels")
    acts = Activations(squeeze, x.shape[1:])
    cur = 2 * x - 1
    skips = []
    for k in range(cfg.levels):
        e = _block_forward(params, f"enc{k}", cur, acts)
        skips.append(e)
        if k < cfg.levels - 1:
            cur, arg = maxpool_forward(e)
            acts.cache[f"pool{k}"] = arg
    d = skips[-1]
    for k in range(cfg.levels - 2, -1, -1):
        up_in = upsample_forward(d)
        w_up, b_up = params.layer(f"dec{k}.up")
        u = np.tanh(conv_forward(up_in, w_up, b_up))
        acts.cache[f"dec{k}.up"] = (up_in, u)
        d = _block_forward(params, f"dec{k}", u + skips[k], acts)
    w_out, b_out = params.layer("out")
    acts.cache["out"] = d
    out = conv_forward(d, w_out, b_out)[0]
    return (out[0] if squeeze else out), acts


def backward(params: NetParams, acts: Activations, grad_out) -> tuple[NetParams, np.ndarray]:
    """Gradients of a scalar loss with output gradient ``grad_out``.

    Returns parameter gradients (same layout as ``params``) and the input gradient.
    """
    cfg = params.cfg
    g = np.asarray(grad_out, dtype=params.dtype)
    g = g[None] if acts.squeeze else g
    if g.shape != acts.shape:
        raise ValueError(f"grad_out shape {g.shape} does not match output {acts.shape}")
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    gd, dw, db = conv_backward(acts.cache["out"], params.layer("out")[0], g[None])
    grads["out"] = (dw, db)
    skip_grads = [None] * cfg.levels
    for k in range(cfg.levels - 1):
        gs = _block_backward(params, f"dec{k}", gd, acts, grads)
        skip_grads[k] = gs
        up_in, u = acts.cache[f"dec{k}.up"]
        gu = gs * (1 - u * u)
        g_up_in, dw, db = conv_backward(up_in, params.layer(f"dec{k}.up")[0], gu)
        grads[f"dec{k}.up"] = (dw, db)
        gd = upsample_backward(g_up_in)
    # gd now holds the gradient flowing into the bottom encoder output
    ge = gd
    for k in range(cfg.levels - 1, -1, -1):
        if k < cfg.levels - 1:
            ge = maxpool_backward(acts.cache[f"pool{k}"], ge) + skip_grads[k]
        ge = _block_backward(params, f"enc{k}", ge, acts, grads)
    grad_in = 2 * ge[0]
    tensors = []
    for name in params.names:
        dw, db = grads[name]
        tensors += [np.ascontiguousarray(dw, dtype=params.dtype), db.astype(params.dtype, copy=False)]
    return NetParams(cfg, tensors), (grad_in[0] if acts.squeeze else grad_in)


def _tile_starts(length: int, tile: int, step: int, align: int) -> list[int]:
    if length <= tile:
        return [0]
    starts = list(range(0, length - tile, step)) + [length - tile]
    return sorted({s - s % align for s in starts} | {length - tile})


def _blend_ramp(size: int, overlap: int) -> np.ndarray:
    i = np.arange(size) + 0.5
    if overlap <= 0:
        return np.ones(size)
    return np.minimum(1.0, np.minimum(i, size - i) / overlap)


def apply_full_image(params: NetParams, img, tile: int = 256, overlap: int = 64) -> np.ndarray:
    """Run the net over a large image in overlapping tiles with triangular blending."""
    img = np.asarray(img, dtype=params.dtype)
    m = params.cfg.multiple
    if tile % m:
        raise ValueError(f"tile {tile} must be a multiple of {m}")
    if not 0 <= overlap < tile / 2:
        raise ValueError(f"overlap must be in [0, tile/2), got {overlap}")
    h, w = img.shape
    th, tw = min(tile, h), min(tile, w)
    if th == h and tw == w:
        return forward(params, img)[0]
    if h % m or w % m:
        raise ValueError(f"image sides {h}x{w} must be multiples of {m}")
    acc = np.zeros((h, w))
    wsum = np.zeros((h, w))
    ys = _tile_starts(h, th, th - overlap, m)
    xs = _tile_starts(w, tw, tw - overlap, m)
    weight = np.outer(_blend_ramp(th, overlap), _blend_ramp(tw, overlap))
    for y in ys:
        for x in xs:
            out = forward(params, img[y:y + th, x:x + tw])[0]
            acc[y:y + th, x:x + tw] += weight * out
            wsum[y:y + th, x:x + tw] += weight
    return (acc / wsum).astype(params.dtype)


def save_checkpoint(params: NetParams, path) -> None:
    """Write the ``NCW1`` checkpoint: magic, u32 length + config JSON, f32 LE tensors."""
    meta = json.dumps(asdict(params.cfg), sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for t in params.tensors:
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> NetParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an NCW1 checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    cfg = NetConfig(**json.loads(data[8:8 + n]))
    pos = 8 + n
    tensors = []
    for shape in param_shapes(cfg):
        count = int(np.prod(shape))
        if pos + 4 * count > len(data):
            raise ValueError(f"{path}: truncated tensor data for shape {shape}")
        tensors.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after tensors")
    return NetParams(cfg, tensors)
