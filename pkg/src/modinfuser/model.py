"""Translator (encoder -> modality infuser -> decoder) and auxiliary-classifier discriminator."""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import ConvBlock, Linear, Module, TransformerLayer, positional_encoding
from .tensor import ShapeError, Tensor

DOWNSAMPLE = 16


class MEMode(str, enum.Enum):
    SINGLE = "single"
    CONSECUTIVE = "consecutive"
    LEARNABLE = "learnable"
    LEARNABLE_HIGH_REC = "learnable-high-rec"

    @property
    def learnable(self) -> bool:
        return self in (MEMode.LEARNABLE, MEMode.LEARNABLE_HIGH_REC)

    @property
    def every_layer(self) -> bool:
        return self is MEMode.CONSECUTIVE


_MODE_TAGS = {MEMode.SINGLE: 0, MEMode.CONSECUTIVE: 1, MEMode.LEARNABLE: 2, MEMode.LEARNABLE_HIGH_REC: 3}


def modality_encoding(m: int, width: int, classic: bool = False) -> np.ndarray:
    """Fixed sinusoidal code ``[1, width]`` for target modality ``m``.

    Even channel ``2i`` is ``sin(m / 10000**(2i/width))``; odd channel ``2i+1``
    is ``cos(m / 10000**((2i+1)/width))``. ``classic=True`` uses ``2i/width``
    in the cosine exponent as well.
    """
    if width % 2:
        raise ValueError(f"modality encoding needs an even width, got {width}")
    if m < 0:
        raise ValueError(f"modality index must be non-negative, got {m}")
    i = np.arange(width // 2, dtype=np.float64)
    out = np.empty((1, width))
    out[0, 0::2] = np.sin(m / 10000.0 ** (2 * i / width))
    cos_exp = 2 * i if classic else 2 * i + 1
    out[0, 1::2] = np.cos(m / 10000.0 ** (cos_exp / width))
    return out


def modality_table(n_modalities: int, width: int, classic: bool = False) -> np.ndarray:
    return np.concatenate([modality_encoding(m, width, classic) for m in range(n_modalities)])


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    layers: int = 4
    modalities: int = 4
    heads: int = 4
    ffn_mult: int = 4
    mode: MEMode = MEMode.SINGLE
    me_classic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", MEMode(self.mode))
        if self.width % 8 or self.width % 2:
            raise ValueError(f"width must be a multiple of 8, got {self.width}")
        if self.layers < 1:
            raise ValueError("need at least one transformer layer")
        if self.modalities < 2:
            raise ValueError("need at least two modalities")


class Encoder(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        chans = [1, width // 8, width // 4, width // 2, width]
        self.down = [ConvBlock(a, b, rng, stride=2) for a, b in zip(chans[:-1], chans[1:])]
        self.out = ConvBlock(width, width, rng, stride=1, act="none")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise ShapeError(f"encode: spatial size {x.shape[-2:]} not divisible by {DOWNSAMPLE}")
        for block in self.down:
            x = block(x)
        return self.out(x)


class Decoder(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.inp = ConvBlock(width, width, rng, stride=1)
        chans = [width, width // 2, width // 4, width // 8, width // 8]
        self.up = [ConvBlock(a, b, rng, kernel=4, stride=2, transpose=True) for a, b in zip(chans[:-1], chans[1:])]
        self.out = ConvBlock(width // 8, 1, rng, stride=1, norm=False, act="tanh")

    def __call__(self, f: Tensor) -> Tensor:
        f = self.inp(f)
        for block in self.up:
            f = block(f)
        return self.out(f)


class ModalityInfuser(Module):
    """Transformer stack that turns agnostic features into target-modality features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [TransformerLayer(cfg.width, cfg.heads, rng, cfg.ffn_mult) for _ in range(cfg.layers)]
        if cfg.mode.learnable:
            self.me_table = T.parameter(rng.normal(0.0, 0.02, size=(cfg.modalities, cfg.width)))
        else:
            # fixed codes are plain arrays, never visited by the optimizer
            self.me_fixed = modality_table(cfg.modalities, cfg.width, cfg.me_classic)

    def codes(self, targets: np.ndarray) -> Tensor:
        """Per-sample modality codes ``[B, 1, C]``."""
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.size and (targets.min() < 0 or targets.max() >= self.cfg.modalities):
            raise IndexError(f"modality index out of range [0, {self.cfg.modalities}): {targets}")
        if self.cfg.mode.learnable:
            return T.reshape(self.me_table[targets], (targets.size, 1, self.cfg.width))
        return Tensor(self.me_fixed[targets][:, None, :])

    def __call__(self, f: Tensor, targets) -> Tensor:
        b, c, h, w = f.shape
        if c != self.cfg.width:
            raise ShapeError(f"infuse: feature width {c} != model width {self.cfg.width}")
        n = h * w
        z = f.reshape(b, c, n).transpose(0, 2, 1) + Tensor(positional_encoding(n, c))
        me = self.codes(targets)
        if me.shape[0] != b:
            raise ShapeError(f"infuse: {me.shape[0]} targets for a batch of {b}")
        for i, block in enumerate(self.blocks):
            if i == 0 or self.cfg.mode.every_layer:
                z = z + me
            z = block(z)
        return z.transpose(0, 2, 1).reshape(b, c, h, w)


class Translator(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, **overrides):
        cfg = cfg or ModelConfig(**overrides)
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        self.encoder = Encoder(cfg.width, rng)
        self.infuser = ModalityInfuser(cfg, rng)
        self.decoder = Decoder(cfg.width, rng)

    def encode(self, x: Tensor) -> Tensor:
        return self.encoder(T.as_tensor(x))

    def infuse(self, f: Tensor, targets) -> Tensor:
        return self.infuser(T.as_tensor(f), targets)

    def decode(self, f: Tensor) -> Tensor:
        return self.decoder(T.as_tensor(f))

    def translate(self, x: Tensor, targets) -> Tensor:
        x = T.as_tensor(x)
        targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (x.shape[0],))
        return self.decode(self.infuse(self.encode(x), targets))

    __call__ = translate


class Discriminator(Module):
    """Shared conv trunk with a real/fake logit head and an M-way modality head."""

    def __init__(self, width: int = 64, modalities: int = 4, seed: int = 0):
        rng = np.random.default_rng([seed, 2])
        self.width = width
        self.modalities = modalities
        chans = [1, width // 8, width // 4, width // 2, width]
        self.trunk = [ConvBlock(a, b, rng, stride=2, norm=False, act="leaky") for a, b in zip(chans[:-1], chans[1:])]
        self.real_head = Linear(width, 1, rng)
        self.aux_head = Linear(width, modalities, rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(real_logit [B], modality_logits [B, M])``."""
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"discriminate: expected [B, 1, H, W], got {x.shape}")
        for block in self.trunk:
            x = block(x)
        pooled = x.mean(axis=(2, 3))
        return self.real_head(pooled).reshape(-1), self.aux_head(pooled)


def _batched(x) -> Tensor:
    x = T.as_tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 3 else x


def encode(x, params: Translator) -> Tensor:
    """``[1, H, W]`` image to ``[C, H/16, W/16]`` features."""
    return params.encode(_batched(x))[0]


def infuse(f, m_y: int, params: Translator) -> Tensor:
    f = T.as_tensor(f)
    return params.infuse(f.reshape(1, *f.shape), [m_y])[0]


def decode(f, params: Translator) -> Tensor:
    f = T.as_tensor(f)
    return params.decode(f.reshape(1, *f.shape))[0]


def translate(x, m_y: int, params: Translator) -> Tensor:
    return params.translate(_batched(x), [m_y])[0]


def discriminate(x, params: Discriminator) -> tuple[Tensor, Tensor]:
    real, aux = params(_batched(x))
    return real[0], aux[0]


# checkpoint format ------------------------------------------------------------
#
#   b"MFZ1"
#   u32 width, u32 layers, u32 modalities, u8 mode tag
#   u32 n, n bytes of UTF-8 "key=value" lines (remaining settings and run metadata)
#   u32 array count, then per array:
#       u16 n, n bytes UTF-8 name
#       u8 ndim, ndim x u32 dims
#       u64 element count, element count x f64 (little-endian)

MAGIC = b"MFZ1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, cfg: ModelConfig, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    meta = dict(meta or {})
    meta.update(heads=str(cfg.heads), ffn_mult=str(cfg.ffn_mult), me_classic=str(int(cfg.me_classic)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIB", cfg.width, cfg.layers, cfg.modalities, _MODE_TAGS[cfg.mode]))
    text = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    try:
        return _parse_checkpoint(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    pos = 4
    width, layers, modalities, tag = struct.unpack_from("<IIIB", data, pos)
    pos += 13
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = dict(line.split("=", 1) for line in data[pos:pos + n].decode().splitlines() if line)
    pos += n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    modes = {v: k for k, v in _MODE_TAGS.items()}
    if tag not in modes:
        raise ValueError(f"unknown mode tag {tag}")
    cfg = ModelConfig(
        width=width,
        layers=layers,
        modalities=modalities,
        heads=int(meta.pop("heads", 4)),
        ffn_mult=int(meta.pop("ffn_mult", 4)),
        mode=modes[tag],
        me_classic=bool(int(meta.pop("me_classic", 0))),
    )
    return cfg, arrays, meta


def _prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def _strip(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def save_models(path, gen: Translator, disc: Discriminator | None = None, extra=None, meta=None) -> None:
    arrays = _prefixed("G.", gen.state_dict())
    if disc is not None:
        arrays.update(_prefixed("D.", disc.state_dict()))
    arrays.update(extra or {})
    write_checkpoint(path, gen.cfg, arrays, meta)


def load_models(path) -> tuple[Translator, Discriminator, dict[str, np.ndarray], dict[str, str]]:
    """Rebuild both networks from a checkpoint; returns leftover arrays and metadata."""
    cfg, arrays, meta = read_checkpoint(path)
    gen = Translator(cfg)
    gen.load_state_dict(_strip("G.", arrays))
    disc = Discriminator(cfg.width, cfg.modalities)
    d_state = _strip("D.", arrays)
    if d_state:
        disc.load_state_dict(d_state)
    rest = {k: v for k, v in arrays.items() if not k.startswith(("G.", "D."))}
    return gen, disc, rest, meta
