"""Frozen ViT stand-in for an image foundation model, plus feature-file I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

FEATURE_MAGIC = b"VFMF"
FEATURE_VERSION = 1


@dataclass
class FeatureStack:
    """Encoder outputs for one frame (leading batch axes allowed).

    ``per_depth`` holds the patch tokens tapped at relative depths 1/4, 1/2,
    3/4 and 1; ``cls`` and ``registers`` come from the final layer.
    """

    per_depth: tuple
    cls: np.ndarray
    registers: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.per_depth = tuple(np.asarray(f, dtype=np.float64) for f in self.per_depth)
        self.cls = np.asarray(self.cls, dtype=np.float64)
        self.registers = np.asarray(self.registers, dtype=np.float64)
        if len(self.per_depth) != 4:
            raise DimensionError(f"expected 4 depth taps, got {len(self.per_depth)}")
        shape = self.per_depth[0].shape
        if any(f.shape != shape for f in self.per_depth):
            raise DimensionError(f"depth taps disagree: {[f.shape for f in self.per_depth]}")
        dim = shape[-1]
        if self.cls.shape[-2:] != (1, dim) or self.registers.shape[-1] != dim:
            raise DimensionError(
                f"cls {self.cls.shape} / registers {self.registers.shape} do not match width {dim}"
            )

    @property
    def n_patches(self):
        return self.per_depth[0].shape[-2]

    @property
    def dim(self):
        return self.per_depth[0].shape[-1]

    @property
    def n_registers(self):
        return self.registers.shape[-2]


def extract_patches(image, patch_size):
    """Split ``(..., H, W, C)`` into ``(..., N, p*p*C)`` in row-major patch order."""
    image = np.asarray(image, dtype=np.float64)
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = image.reshape(*lead, gh, p, gw, p, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, p, p, c)
    return x.reshape(*lead, gh * gw, p * p * c)


def merge_patches(patches, grid_h, grid_w, patch_size, channels):
    """Inverse of :func:`extract_patches`."""
    patches = np.asarray(patches)
    *lead, n, _ = patches.shape
    p = patch_size
    if n != grid_h * grid_w:
        raise DimensionError(f"{n} patches cannot tile a {grid_h}x{grid_w} grid")
    x = patches.reshape(*lead, grid_h, grid_w, p, p, channels)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, grid_h * p, grid_w * p, channels)


class ViTEncoder(nn.Module):
    """Small pre-norm ViT with CLS and register tokens.

    Weights come from a fixed seed and are never trained; ``frozen=True``
    keeps every parameter off the gradient tape.
    """

    def __init__(self, image_size=32, patch_size=8, depth=8, width=64, heads=4,
                 n_registers=4, seed=0, frozen=True):
        if depth % 4:
            raise ConfigError(f"encoder depth {depth} must be divisible by 4")
        if image_size % patch_size:
            raise DimensionError(f"image size {image_size} not divisible by patch size {patch_size}")
        rng = np.random.default_rng(seed)
        self.image_size = image_size
        self.patch_size = patch_size
        self.depth = depth
        self.width = width
        self.n_registers = n_registers
        self.n_patches = (image_size // patch_size) ** 2
        self.patch_embed = nn.Linear(patch_size * patch_size * 3, width, rng)
        self.patch_embed.bias.data[...] = rng.normal(0.0, 0.02, width)
        self.pos_embed = nn.parameter(rng.normal(0.0, 0.5, (self.n_patches, width)))
        self.cls_token = nn.parameter(rng.normal(0.0, 0.5, (1, width)))
        self.register_tokens = nn.parameter(rng.normal(0.0, 0.5, (n_registers, width)))
        self.blocks = [nn.TransformerBlock(width, heads, rng) for _ in range(depth)]
        self.frozen = frozen
        self.set_trainable(not frozen)

    @property
    def tap_depths(self):
        q = self.depth // 4
        return (q, 2 * q, 3 * q, 4 * q)

    def patchify(self, image):
        patches = extract_patches(image, self.patch_size)
        return self.patch_embed(Tensor(patches))

    def _tokens(self, image):
        patches = self.patchify(image) + self.pos_embed
        lead = patches.shape[:-2]
        cls = T.Tensor(np.zeros((*lead, 1, self.width))) + self.cls_token
        reg = T.Tensor(np.zeros((*lead, self.n_registers, self.width))) + self.register_tokens
        return T.concat([cls, reg, patches], axis=-2)

    def forward(self, image):
        """Run all blocks; returns the final token sequence ``[CLS; registers; patches]``."""
        x = self._tokens(image)
        for block in self.blocks:
            x = block(x)
        return x

    def encode_multitap(self, frame, frame_index=0):
        x = self._tokens(frame)
        taps = []
        wanted = set(self.tap_depths)
        split = 1 + self.n_registers
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                taps.append(x[..., split:, :].data)
        return FeatureStack(
            per_depth=tuple(taps),
            cls=x[..., :1, :].data,
            registers=x[..., 1:split, :].data,
            frame_index=frame_index,
        )


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIII")


def write_feature_file(path, stacks):
    """Write single-frame FeatureStacks as little-endian float32 records."""
    stacks = list(stacks)
    if not stacks:
        n = d = r = 0
    else:
        n, d, r = stacks[0].n_patches, stacks[0].dim, stacks[0].n_registers
    chunks = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(stacks), n, d, r)]
    for t, s in enumerate(stacks):
        if s.per_depth[0].shape != (n, d) or s.registers.shape != (r, d) or s.cls.shape != (1, d):
            raise DimensionError(f"frame {t} has inconsistent shapes for N={n}, D={d}, R={r}")
        for f in s.per_depth:
            chunks.append(f.astype("<f4").tobytes())
        chunks.append(s.cls.astype("<f4").tobytes())
        chunks.append(s.registers.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_feature_file(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != FEATURE_MAGIC:
        raise FormatError("bad magic, expected b'VFMF'", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, t, n, d, r = _HEADER.unpack_from(buf, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if t and (n == 0 or d == 0):
        raise FormatError(f"inconsistent header shape T={t} N={n} D={d}", 12)
    per_frame = (4 * n * d + d + r * d) * 4
    offset = _HEADER.size
    expected = offset + t * per_frame
    if len(buf) < expected:
        frame = (len(buf) - offset) // per_frame if per_frame else 0
        raise FormatError(f"truncated payload in frame {frame}", len(buf))
    if len(buf) > expected:
        raise FormatError("trailing bytes after last frame", expected)

    def take(count, shape):
        nonlocal offset
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)
        offset += count * 4
        return arr.reshape(shape)

    stacks = []
    for i in range(t):
        depths = tuple(take(n * d, (n, d)) for _ in range(4))
        cls = take(d, (1, d))
        regs = take(r * d, (r, d))
        stacks.append(FeatureStack(per_depth=depths, cls=cls, registers=regs, frame_index=i))
    return stacks
