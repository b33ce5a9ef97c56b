"""The contractible hierarchical vision transformer family.

A model instance is fully determined by its contraction factors: per-stage
embed dims and depths, attention window sizes, the MBConv and MLP expansion
ratios, and the per-head attention dimension.  The graph is

  patch embed (two 3x3/s2/p1 convs) ->
  stage 1: MBConv blocks ->
  [MBConv downsample, transformer stage] x 3 ->
  global average pool -> LayerNorm -> linear classifier

with GELU activations throughout, BatchNorm in convolutional paths and
LayerNorm in transformer paths, residuals on MBConv blocks, attention, the
local 3x3 depthwise conv, and MLP.  At input resolution 224 the four stages
see 56/28/14/7 token grids.

Parameter counting exists twice on purpose: :func:`param_count` computes a
closed form from the factors while ``TinyViT.count_params`` walks the built
graph; tests require exact agreement.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .layers import (BatchNorm2d, Conv2d, DepthwiseConv2d, DropPath,
                     ForwardContext, GELU, GlobalAvgPool, InitStream, Layer,
                     LayerNorm, Linear, WindowAttention)
from .rng import INIT_TAG, mix64


@dataclass(frozen=True)
class ContractionConfig:
    """The knobs that span the model family."""

    embed_dims: tuple[int, int, int, int]
    depths: tuple[int, int, int, int]
    window_sizes: tuple[int, int, int]     # transformer stages 2..4
    mbconv_expansion: float = 4.0
    mlp_ratio: float = 4.0
    head_dim: int = 32

    def __post_init__(self) -> None:
        if len(self.embed_dims) != 4 or len(self.depths) != 4 \
                or len(self.window_sizes) != 3:
            raise ValueError("factor tuple has the wrong arity")
        if min(self.embed_dims) < 1 or min(self.depths) < 1 \
                or min(self.window_sizes) < 1:
            raise ValueError("factors must be positive")
        if self.mbconv_expansion <= 0 or self.mlp_ratio <= 0 \
                or self.head_dim < 1:
            raise ValueError("factors must be positive")
        for d in self.embed_dims[1:]:
            if d % self.head_dim:
                raise ValueError("head dimension mismatch")

    @property
    def num_heads(self) -> tuple[int, int, int]:
        return tuple(d // self.head_dim for d in self.embed_dims[1:])

    def as_flat_dict(self) -> dict:
        return {
            "embed_dims": ",".join(str(v) for v in self.embed_dims),
            "depths": ",".join(str(v) for v in self.depths),
            "window_sizes": ",".join(str(v) for v in self.window_sizes),
            "mbconv_expansion": repr(self.mbconv_expansion),
            "mlp_ratio": repr(self.mlp_ratio),
            "head_dim": str(self.head_dim),
        }

    @classmethod
    def from_flat_dict(cls, d: dict) -> "ContractionConfig":
        return cls(
            embed_dims=tuple(int(v) for v in d["embed_dims"].split(",")),
            depths=tuple(int(v) for v in d["depths"].split(",")),
            window_sizes=tuple(int(v) for v in d["window_sizes"].split(",")),
            mbconv_expansion=float(d["mbconv_expansion"]),
            mlp_ratio=float(d["mlp_ratio"]),
            head_dim=int(d["head_dim"]),
        )

    def sort_key(self) -> tuple:
        return (self.embed_dims, self.depths, self.window_sizes,
                self.mbconv_expansion, self.mlp_ratio, self.head_dim)


TINYVIT_21M = ContractionConfig((96, 192, 384, 576), (2, 2, 6, 2), (7, 14, 7))
TINYVIT_11M = ContractionConfig((64, 128, 256, 448), (2, 2, 6, 2), (7, 14, 7))
TINYVIT_5M = ContractionConfig((64, 128, 160, 320), (2, 2, 6, 2), (7, 14, 7))

# A desk-scale instance used throughout the tests (< 50k parameters).
MICRO = ContractionConfig((8, 16, 32, 48), (1, 1, 2, 1), (4, 2, 1),
                          mbconv_expansion=2.0, mlp_ratio=2.0, head_dim=8)


@dataclass(frozen=True)
class ModelStats:
    params: int
    macs: int
    resolution: int


def mbconv_hidden(dim: int, expansion: float) -> int:
    return int(round(dim * expansion))


def mlp_hidden(dim: int, ratio: float) -> int:
    return int(round(dim * ratio))


class MBConv(Layer):
    """Inverted bottleneck: 1x1 expand, 3x3 depthwise, 1x1 project, BN after
    each conv, GELU after the first two, residual when shapes allow."""

    def __init__(self, din: int, dout: int, hidden: int, stride: int,
                 drop_path: float, init, dtype):
        super().__init__()
        self.residual = stride == 1 and din == dout
        self.add_child("expand", Conv2d(din, hidden, 1, 1, 0, init, dtype))
        self.add_child("bn1", BatchNorm2d(hidden, dtype))
        self.add_child("act1", GELU())
        self.add_child("dw", DepthwiseConv2d(hidden, 3, stride, 1, init, dtype))
        self.add_child("bn2", BatchNorm2d(hidden, dtype))
        self.add_child("act2", GELU())
        self.add_child("project", Conv2d(hidden, dout, 1, 1, 0, init, dtype))
        self.add_child("bn3", BatchNorm2d(dout, dtype))
        self.add_child("drop", DropPath(drop_path))
        self._order = ["expand", "bn1", "act1", "dw", "bn2", "act2",
                       "project", "bn3", "drop"]

    def forward(self, x, ctx):
        y = x
        for name in self._order:
            y = self.children[name].forward(y, ctx)
        return x + y if self.residual else y

    def backward(self, dy):
        d = dy
        for name in reversed(self._order):
            d = self.children[name].backward(d)
        return d + dy if self.residual else d


class PatchEmbed(Layer):
    """Two stacked 3x3 stride-2 convs; quarters the resolution."""

    def __init__(self, dim: int, init, dtype):
        super().__init__()
        mid = max(1, dim // 2)
        self.add_child("conv1", Conv2d(3, mid, 3, 2, 1, init, dtype))
        self.add_child("bn1", BatchNorm2d(mid, dtype))
        self.add_child("act", GELU())
        self.add_child("conv2", Conv2d(mid, dim, 3, 2, 1, init, dtype))
        self.add_child("bn2", BatchNorm2d(dim, dtype))
        self._order = ["conv1", "bn1", "act", "conv2", "bn2"]

    def forward(self, x, ctx):
        for name in self._order:
            x = self.children[name].forward(x, ctx)
        return x

    def backward(self, dy):
        for name in reversed(self._order):
            dy = self.children[name].backward(dy)
        return dy


class TransformerBlock(Layer):
    """Window attention, a local 3x3 depthwise conv, and an MLP, each under
    a pre-norm (LayerNorm / BatchNorm) residual."""

    def __init__(self, dim: int, num_heads: int, window: int, hidden: int,
                 drop_path: float, init, dtype):
        super().__init__()
        self.dim = dim
        self.add_child("ln1", LayerNorm(dim, dtype))
        self.add_child("attn", WindowAttention(dim, num_heads, window, init,
                                               dtype))
        self.add_child("drop1", DropPath(drop_path))
        self.add_child("conv", DepthwiseConv2d(dim, 3, 1, 1, init, dtype))
        self.add_child("bn", BatchNorm2d(dim, dtype))
        self.add_child("drop2", DropPath(drop_path))
        self.add_child("ln2", LayerNorm(dim, dtype))
        self.add_child("fc1", Linear(dim, hidden, init, dtype))
        self.add_child("act", GELU())
        self.add_child("fc2", Linear(hidden, dim, init, dtype))
        self.add_child("drop3", DropPath(drop_path))

    def forward(self, x, ctx):
        # x: (N, H, W, D)
        c = self.children
        y = c["ln1"].forward(x, ctx)
        y = c["attn"].forward(y, ctx)
        x = x + c["drop1"].forward(y, ctx)
        y = x.transpose(0, 3, 1, 2)
        y = c["conv"].forward(y, ctx)
        y = c["bn"].forward(y, ctx)
        x = x + c["drop2"].forward(y.transpose(0, 2, 3, 1), ctx)
        y = c["ln2"].forward(x, ctx)
        y = c["fc1"].forward(y, ctx)
        y = c["act"].forward(y, ctx)
        y = c["fc2"].forward(y, ctx)
        return x + c["drop3"].forward(y, ctx)

    def backward(self, dy):
        c = self.children
        d = c["drop3"].backward(dy)
        d = c["fc2"].backward(d)
        d = c["act"].backward(d)
        d = c["fc1"].backward(d)
        d = c["ln2"].backward(d)
        dy = dy + d
        d = c["drop2"].backward(dy).transpose(0, 3, 1, 2)
        d = c["bn"].backward(d)
        d = c["conv"].backward(d)
        dy = dy + d.transpose(0, 2, 3, 1)
        d = c["drop1"].backward(dy)
        d = c["attn"].backward(d)
        d = c["ln1"].backward(d)
        return dy + d


class TinyViT(Layer):
    """A built model instance.

    Immutable during inference (``forward`` with a non-training context
    caches nothing); training requires exclusive access.
    """

    def __init__(self, config: ContractionConfig, num_classes: int,
                 resolution: int, init_seed: int = 0,
                 drop_path_rate: float = 0.0, dtype=np.float32):
        super().__init__()
        if resolution % 32:
            raise ValueError("resolution misaligned")
        self.config = config
        self.num_classes = num_classes
        self.resolution = resolution
        self.init_seed = init_seed
        self.drop_path_rate = drop_path_rate
        self.dtype = np.dtype(dtype)
        # Live window sizes; adapt_resolution rescales them.
        self.windows: tuple[int, int, int] = config.window_sizes

        init = InitStream(mix64(init_seed ^ INIT_TAG))
        dims, depths = config.embed_dims, config.depths
        total_blocks = sum(depths)
        rates = [drop_path_rate * i / max(total_blocks - 1, 1)
                 for i in range(total_blocks)]
        block_idx = 0

        self.add_child("patch_embed", PatchEmbed(dims[0], init, self.dtype))
        for b in range(depths[0]):
            hidden = mbconv_hidden(dims[0], config.mbconv_expansion)
            self.add_child(f"stage1.block{b}",
                           MBConv(dims[0], dims[0], hidden, 1,
                                  rates[block_idx], init, self.dtype))
            block_idx += 1
        for stage in (2, 3, 4):
            din, dout = dims[stage - 2], dims[stage - 1]
            self.add_child(f"downsample{stage}",
                           MBConv(din, dout, dout, 2, 0.0, init, self.dtype))
            heads = dout // config.head_dim
            hidden = mlp_hidden(dout, config.mlp_ratio)
            for b in range(depths[stage - 1]):
                self.add_child(
                    f"stage{stage}.block{b}",
                    TransformerBlock(dout, heads, config.window_sizes[stage - 2],
                                     hidden, rates[block_idx], init, self.dtype))
                block_idx += 1
        self.add_child("pool", GlobalAvgPool())
        self.add_child("norm", LayerNorm(dims[3], self.dtype))
        self.add_child("head", Linear(dims[3], num_classes, init, self.dtype))

    # -- inference / training ------------------------------------------------

    def forward(self, x: np.ndarray, ctx: ForwardContext | None = None
                ) -> np.ndarray:
        """(N, 3, R, R) float batch -> (N, num_classes) logits.

        Conv stages run NCHW, transformer stages NHWC; downsamples sit on the
        boundary, so each is followed (and in backward preceded) by a
        transpose.
        """
        ctx = ctx or ForwardContext(training=False)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.resolution \
                or x.shape[3] != self.resolution:
            raise ValueError("input shape mismatch")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        c = self.children
        x = c["patch_embed"].forward(x, ctx)
        for b in range(self.config.depths[0]):
            x = c[f"stage1.block{b}"].forward(x, ctx)
        for stage in (2, 3, 4):
            if stage > 2:
                x = x.transpose(0, 3, 1, 2)  # NHWC -> NCHW for the downsample
            x = c[f"downsample{stage}"].forward(x, ctx)
            x = x.transpose(0, 2, 3, 1)      # NCHW -> NHWC for attention
            for b in range(self.config.depths[stage - 1]):
                x = c[f"stage{stage}.block{b}"].forward(x, ctx)
        x = c["pool"].forward(x, ctx)
        x = c["norm"].forward(x, ctx)
        return c["head"].forward(x, ctx)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last training forward."""
        c = self.children
        d = c["head"].backward(dlogits)
        d = c["norm"].backward(d)
        d = c["pool"].backward(d)
        for stage in (4, 3, 2):
            for b in reversed(range(self.config.depths[stage - 1])):
                d = c[f"stage{stage}.block{b}"].backward(d)
            d = d.transpose(0, 3, 1, 2)
            d = c[f"downsample{stage}"].backward(d)
            if stage > 2:
                d = d.transpose(0, 2, 3, 1)
        for b in reversed(range(self.config.depths[0])):
            d = c[f"stage1.block{b}"].backward(d)
        return c["patch_embed"].backward(d)

    # -- accounting ----------------------------------------------------------

    def count_params(self) -> int:
        """Learnable scalars, by walking the built graph (buffers excluded)."""
        return sum(int(p.size) for _, p in self.named_params())

    def count_macs(self, resolution: int | None = None) -> int:
        return mac_count(self.config, self.num_classes,
                         resolution or self.resolution, self.windows)

    def stats(self, resolution: int | None = None) -> ModelStats:
        res = resolution or self.resolution
        return ModelStats(params=self.count_params(),
                          macs=self.count_macs(res), resolution=res)

    # -- serialization -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{n}": p for n, p in self.named_params()}
        arrays.update({f"buffer.{n}": b for n, b in self.named_buffers()})
        return arrays

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = dict(self.config.as_flat_dict())
        meta.update({
            "num_classes": str(self.num_classes),
            "resolution": str(self.resolution),
            "init_seed": str(self.init_seed),
            "drop_path_rate": repr(self.drop_path_rate),
            "dtype": self.dtype.name,
            "windows": ",".join(str(w) for w in self.windows),
        })
        with open(os.path.join(directory, "config.txt"), "w") as f:
            for key, value in meta.items():
                f.write(f"{key} = {value}\n")
        arrays = self.state_arrays()
        np.savez(os.path.join(directory, "params.npz"), **arrays)
        manifest = {
            "tensors": {n: {"shape": list(a.shape), "dtype": a.dtype.name}
                        for n, a in sorted(arrays.items())},
            "checksum": _manifest_checksum(arrays),
        }
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "TinyViT":
        meta = parse_config_text(os.path.join(directory, "config.txt"))
        config = ContractionConfig.from_flat_dict(meta)
        model = cls(config, int(meta["num_classes"]), int(meta["resolution"]),
                    init_seed=int(meta["init_seed"]),
                    drop_path_rate=float(meta["drop_path_rate"]),
                    dtype=np.dtype(meta["dtype"]))
        windows = tuple(int(w) for w in meta["windows"].split(","))
        if windows != model.windows:
            model = adapt_windows(model, windows)
        data = np.load(os.path.join(directory, "params.npz"))
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        arrays = {name: data[name] for name in data.files}
        if _manifest_checksum(arrays) != manifest["checksum"]:
            raise ValueError("parameter manifest checksum mismatch")
        params = dict(model.named_params())
        buffers = dict(model.named_buffers())
        for name, arr in arrays.items():
            kind, _, key = name.partition(".")
            target = params[key] if kind == "param" else buffers[key]
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}")
            target[...] = arr
        return model


def _manifest_checksum(arrays: dict[str, np.ndarray]) -> str:
    crc = 0
    for name in sorted(arrays):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(arrays[name]).tobytes(), crc)
    return f"{crc:08x}"


def parse_config_text(path: str | os.PathLike) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def build(config: ContractionConfig, num_classes: int, resolution: int,
          init_seed: int = 0, drop_path_rate: float = 0.0,
          dtype=np.float32) -> TinyViT:
    """Construct and deterministically initialize a model instance."""
    return TinyViT(config, num_classes, resolution, init_seed=init_seed,
                   drop_path_rate=drop_path_rate, dtype=dtype)


def stage_grids(resolution: int) -> tuple[int, int, int, int]:
    return (resolution // 4, resolution // 8, resolution // 16,
            resolution // 32)


# ---------------------------------------------------------------------------
# Closed-form accounting


def param_count(config: ContractionConfig, num_classes: int) -> int:
    """Learnable-parameter formula from the contraction factors alone."""
    d1, d2, d3, d4 = config.embed_dims
    n1, n2, n3, n4 = config.depths
    total = 0
    # patch embed: conv(3->d1/2) + BN, GELU, conv(->d1) + BN
    mid = max(1, d1 // 2)
    total += 3 * mid * 9 + 2 * mid
    total += mid * d1 * 9 + 2 * d1

    def mbconv(din, dout, hidden):
        t = din * hidden + 2 * hidden          # expand + BN
        t += hidden * 9 + 2 * hidden           # depthwise + BN
        t += hidden * dout + 2 * dout          # project + BN
        return t

    total += n1 * mbconv(d1, d1, mbconv_hidden(d1, config.mbconv_expansion))

    def transformer(dim, window, depth):
        heads = dim // config.head_dim
        hidden = mlp_hidden(dim, config.mlp_ratio)
        t = 2 * dim                                      # ln1
        t += dim * 3 * dim + 2 * dim                     # qkv (no key bias)
        t += dim * dim + dim                             # proj
        t += heads * (2 * window - 1) ** 2               # bias table
        t += dim * 9 + 2 * dim                           # local dw conv + BN
        t += 2 * dim                                     # ln2
        t += dim * hidden + hidden + hidden * dim + dim  # mlp
        return depth * t

    for stage, (dim, depth) in enumerate(zip((d2, d3, d4), (n2, n3, n4))):
        prev = (d1, d2, d3)[stage]
        total += mbconv(prev, dim, dim)                  # downsample
        total += transformer(dim, config.window_sizes[stage], depth)

    total += 2 * d4                                      # final LayerNorm
    total += d4 * num_classes + num_classes              # classifier
    return total


def mac_count(config: ContractionConfig, num_classes: int, resolution: int,
              windows: tuple[int, int, int] | None = None) -> int:
    """Multiply-accumulate count at the given input resolution.

    Counts convolutions, linear maps and the attention matmuls (QKV, logits,
    weighted sum, output projection); norms, activations and softmax carry no
    MACs.  Attention logits/sums are counted over the padded window grid,
    matching what the implementation actually computes.
    """
    if resolution % 32:
        raise ValueError("resolution misaligned")
    windows = windows or config.window_sizes
    d1, d2, d3, d4 = config.embed_dims
    n1, n2, n3, n4 = config.depths
    g1, g2, g3, g4 = stage_grids(resolution)
    total = 0
    mid = max(1, d1 // 2)
    half = resolution // 2
    total += 3 * mid * 9 * half * half
    total += mid * d1 * 9 * g1 * g1

    def mbconv(din, dout, hidden, hin, hout):
        t = din * hidden * hin * hin       # 1x1 expand at input grid
        t += hidden * 9 * hout * hout      # depthwise at output grid
        t += hidden * dout * hout * hout   # 1x1 project
        return t

    total += n1 * mbconv(d1, d1, mbconv_hidden(d1, config.mbconv_expansion),
                         g1, g1)

    def transformer(dim, heads, window, grid, depth):
        tokens = grid * grid
        nw = (-(-grid // window)) ** 2     # ceil-div squared: padded windows
        s = window * window
        hidden = mlp_hidden(dim, config.mlp_ratio)
        t = tokens * dim * 3 * dim         # qkv
        t += nw * s * s * dim * 2          # logits + weighted sum
        t += tokens * dim * dim            # proj
        t += dim * 9 * tokens              # local dw conv
        t += 2 * tokens * dim * hidden     # mlp
        return depth * t

    heads = config.num_heads
    total += mbconv(d1, d2, d2, g1, g2)
    total += transformer(d2, heads[0], windows[0], g2, n2)
    total += mbconv(d2, d3, d3, g2, g3)
    total += transformer(d3, heads[1], windows[1], g3, n3)
    total += mbconv(d3, d4, d4, g3, g4)
    total += transformer(d4, heads[2], windows[2], g4, n4)
    total += d4 * num_classes
    return total


# ---------------------------------------------------------------------------
# Resolution adaptation


def scaled_windows(windows: tuple[int, ...], old_resolution: int,
                   new_resolution: int) -> tuple[int, ...]:
    """Window sizes scale proportionally with resolution, rounded to the
    nearest integer: {7, 7, 14, 7} at 224 -> {12, 12, 24, 12} at 384 ->
    {16, 16, 32, 16} at 512."""
    return tuple(max(1, int(np.floor(w * new_resolution / old_resolution + 0.5)))
                 for w in windows)


def interpolate_bias_table(table: np.ndarray, old_window: int,
                           new_window: int) -> np.ndarray:
    """Bilinear (align-corners) resampling of each head's (2w-1)^2 grid."""
    if new_window == old_window:
        return table.copy()
    heads = table.shape[0]
    src = 2 * old_window - 1
    dst = 2 * new_window - 1
    grid = table.reshape(heads, src, src).astype(np.float64)
    if src == 1:
        out = np.repeat(np.repeat(grid, dst, axis=1), dst, axis=2)
        return out.reshape(heads, dst * dst).astype(table.dtype)
    pos = np.linspace(0.0, src - 1, dst)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    f = pos - i0
    rows = (grid[:, i0, :] * (1 - f)[None, :, None]
            + grid[:, i1, :] * f[None, :, None])
    out = (rows[:, :, i0] * (1 - f)[None, None, :]
           + rows[:, :, i1] * f[None, None, :])
    return out.reshape(heads, dst * dst).astype(table.dtype)


def adapt_windows(model: TinyViT, new_windows: tuple[int, int, int]) -> TinyViT:
    for stage, new_w in zip((2, 3, 4), new_windows):
        for b in range(model.config.depths[stage - 1]):
            attn = model.children[f"stage{stage}.block{b}"].children["attn"]
            attn.params["bias_table"] = interpolate_bias_table(
                attn.params["bias_table"], attn.window, new_w)
            attn.grads["bias_table"] = np.zeros_like(attn.params["bias_table"])
            attn.set_window(new_w)
    model.windows = tuple(new_windows)
    return model


def adapt_resolution(model: TinyViT, new_resolution: int) -> TinyViT:
    """Return a copy prepared for a new input resolution: windows rescale
    proportionally, attention bias tables are bilinearly interpolated to the
    new relative-position grids, and every other parameter is unchanged
    (224 -> 224 is bit-identical)."""
    if new_resolution % 32:
        raise ValueError("resolution misaligned")
    clone = TinyViT(model.config, model.num_classes, new_resolution,
                    init_seed=model.init_seed,
                    drop_path_rate=model.drop_path_rate, dtype=model.dtype)
    if model.windows != clone.windows:
        # Align table shapes first; the copied values land right after.
        adapt_windows(clone, model.windows)
    src_params = dict(model.named_params())
    for name, p in clone.named_params():
        p[...] = src_params[name]
    src_buffers = dict(model.named_buffers())
    for name, b in clone.named_buffers():
        b[...] = src_buffers[name]
    new_windows = scaled_windows(model.windows, model.resolution,
                                 new_resolution)
    if new_windows != model.windows:
        adapt_windows(clone, new_windows)
    return clone
