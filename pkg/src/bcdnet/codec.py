"""Multi-branch encoder/decoder over bit-planes with binary codes per branch.

Branch ``l`` consumes the three level-``l`` bit-planes (R, G, B), mapped from
{0, 1} to {-1, +1}. The encoder applies a stride-2 convolution and three
stride-2 gated layers, then binarizes each branch through a 1x1 convolution
and tanh. The decoder mirrors this with a 1x1 entry convolution, three
upsampling gated layers and a sub-pixel exit convolution that yields the
signed residual image ``Y`` of each branch. The reconstruction at quality
level ``l`` is the sum of ``Y`` over branches 1..l, computed from a decoder
pass in which the codes of branches beyond ``l`` are zero.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import bitplane
from . import tensor as T
from .gated import DIRECTIONS, gated_layer, init_layer
from .tensor import Tensor

MODEL_MAGIC = b"BCDM"
MODEL_VERSION = 1

_ENUMS = {
    "encoder_direction": DIRECTIONS,
    "decoder_direction": DIRECTIONS,
    "gate_variant": ("unshared", "shared"),
    "input_mode": ("bitplanes", "conv_slice"),
    "norm": ("gdn", "leaky_relu"),
    "binarizer": ("stochastic", "deterministic"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    branches: int = 8
    channels: tuple = (32, 32, 32, 32)
    code_channels: int = 8
    kernel: int = 3
    first_kernel: int = 3
    fuse_kernel: int = 3
    se_ratio: int = 4
    slice_channels: int = 3
    encoder_direction: str = "bi"
    decoder_direction: str = "bi"
    gate_variant: str = "unshared"
    input_mode: str = "bitplanes"
    use_se: bool = True
    norm: str = "gdn"
    binarizer: str = "stochastic"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 1 <= self.branches <= 8:
            raise ConfigError(f"branches must be in [1, 8], got {self.branches}")
        if len(self.channels) < 2:
            raise ConfigError("channels needs one width for the first convolution and one per gated layer")
        if any(c < 1 for c in self.channels) or self.code_channels < 1:
            raise ConfigError("channel widths must be positive")
        for name, allowed in _ENUMS.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.kernel % 2 == 0 or self.first_kernel % 2 == 0 or self.fuse_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.use_se:
            widths = [(c, self.encoder_direction) for c in self.channels[1:]]
            widths += [(c, self.decoder_direction) for c in self.channels[:-1]]
            for c, direction in widths:
                width = 2 * c if direction == "bi" else c
                if width % self.se_ratio:
                    raise ConfigError(f"SE ratio {self.se_ratio} does not divide fused width {width}")
        if self.input_mode == "conv_slice" and self.slice_channels < 1:
            raise ConfigError("slice_channels must be positive")

    @property
    def num_layers(self) -> int:
        return len(self.channels) - 1

    @property
    def spatial_factor(self) -> int:
        """Total downsampling: one stride-2 convolution plus one per gated layer."""
        return 2 ** (self.num_layers + 1)

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)


def basic_bitrate(config: CodecConfig) -> float:
    """Raw bits per pixel of one active branch before entropy coding: B / s**2."""
    s = config.spatial_factor
    return config.code_channels / (s * s)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Conv:
    w: Tensor
    b: Tensor


def _conv(rng, c_out, c_in, k, dtype) -> Conv:
    s = 1.0 / np.sqrt(c_in * k * k)
    return Conv(
        Tensor(rng.uniform(-s, s, (c_out, c_in, k, k)).astype(dtype), requires_grad=True),
        Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
    )


@dataclass
class CodecModel:
    config: CodecConfig
    first: list  # per-branch stride-2 convolution on the 3-channel input
    encoder: list  # LayerParams
    quantizer: list  # per-branch 1x1 convolution to code channels
    entry: list  # per-branch decoder 1x1 entry convolution
    decoder: list  # LayerParams
    exit: list  # per-branch 1x1 convolution to 12 channels, then pixel shuffle
    frontend: Conv | None = None  # shared convolution of the conv-slice input mode

    @classmethod
    def init(cls, config: CodecConfig, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> "CodecModel":
        rng = np.random.default_rng(seed)
        n, ch, k = config.branches, config.channels, config.kernel
        frontend = None
        if config.input_mode == "conv_slice":
            frontend = _conv(rng, n * config.slice_channels, 3, 3, dtype)
        in_ch = config.slice_channels if config.input_mode == "conv_slice" else 3
        first = [_conv(rng, ch[0], in_ch, config.first_kernel, dtype) for _ in range(n)]
        shared = config.gate_variant == "shared"
        common = dict(
            shared=shared,
            use_se=config.use_se,
            norm=config.norm,
            kernel=k,
            fuse_kernel=config.fuse_kernel,
            se_ratio=config.se_ratio,
            dtype=dtype,
        )
        encoder = [
            init_layer(rng, n, ch[i], ch[i + 1], "encoder", config.encoder_direction, **common)
            for i in range(config.num_layers)
        ]
        quantizer = [_conv(rng, config.code_channels, ch[-1], 1, dtype) for _ in range(n)]
        entry = [_conv(rng, ch[-1], config.code_channels, 1, dtype) for _ in range(n)]
        decoder = [
            init_layer(rng, n, ch[i + 1], ch[i], "decoder", config.decoder_direction, **common)
            for i in reversed(range(config.num_layers))
        ]
        exit_ = [_conv(rng, 12, ch[0], 1, dtype) for _ in range(n)]
        return cls(config, first, encoder, quantizer, entry, decoder, exit_, frontend)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learned tensors in canonical (serialization) order."""
        out: list[tuple[str, Tensor]] = []
        for name in ("frontend", "first", "encoder", "quantizer", "entry", "decoder", "exit"):
            out.extend(_walk(getattr(self, name), name))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def census(self) -> dict[str, int]:
        """Parameter counts grouped by component kind."""
        groups: dict[str, int] = {}
        for name, t in self.named_parameters():
            groups[_census_group(name)] = groups.get(_census_group(name), 0) + t.data.size
        return groups

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "CodecModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        return _clone(self, dtype)


def _census_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] in ("encoder", "decoder"):
        for key in ("gates", "se", "gdn", "fuse_w", "fuse_b"):
            if key in parts:
                key = "fuse" if key.startswith("fuse") else key
                return f"{parts[0]}.{key}"
    return parts[0]


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")


def _clone(obj, dtype):
    if isinstance(obj, Tensor):
        return Tensor(obj.data.astype(dtype), requires_grad=obj.requires_grad)
    if isinstance(obj, list):
        return [_clone(o, dtype) for o in obj]
    if isinstance(obj, CodecConfig) or not dataclasses.is_dataclass(obj):
        return obj
    return dataclasses.replace(
        obj, **{f.name: _clone(getattr(obj, f.name), dtype) for f in dataclasses.fields(obj)}
    )


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def bitplane_inputs(images: np.ndarray, config: CodecConfig, dtype=T.DEFAULT_DTYPE) -> list[Tensor]:
    """Per-branch {-1, +1} inputs from a (b, H, W, 3) uint8 batch."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    chw = images.transpose(0, 3, 1, 2).astype(np.int64)
    depth = bitplane.BIT_DEPTH
    out = []
    for level in range(1, config.branches + 1):
        bits = (chw >> (depth - level)) & 1
        out.append(Tensor((2 * bits - 1).astype(dtype)))
    return out


def conv_slice_frontend(images, model: CodecModel) -> list[Tensor]:
    """Shared convolution over the [0, 1] image, sliced into one group per branch."""
    if model.frontend is None:
        raise ValueError("model was not built with the conv_slice input mode")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    x = Tensor((images.transpose(0, 3, 1, 2) / 255.0).astype(model.frontend.w.dtype))
    n = model.config.branches
    if model.frontend.w.shape[0] % n:
        raise ValueError(f"frontend channels {model.frontend.w.shape[0]} not divisible by {n} branches")
    feat = T.conv2d(x, model.frontend.w, model.frontend.b, padding=1)
    return T.split(feat, n, axis=1)


def branch_inputs(images: np.ndarray, model: CodecModel) -> list[Tensor]:
    if model.config.input_mode == "conv_slice":
        return conv_slice_frontend(images, model)
    return bitplane_inputs(images, model.config, model.first[0].w.dtype)


def encoder_features(inputs: list[Tensor], model: CodecModel) -> list[Tensor]:
    k = model.config.first_kernel
    xs = [T.conv2d(x, c.w, c.b, stride=2, padding=k // 2) for x, c in zip(inputs, model.first)]
    for layer in model.encoder:
        xs = gated_layer(xs, layer)
    return xs


def binarize(z: Tensor, mode: str = "deterministic", rng: np.random.Generator | None = None) -> Tensor:
    """Map z in (-1, 1) to {-1, +1}; the backward pass is the identity."""
    zd = z.data
    if mode == "deterministic":
        out = np.where(zd >= 0, 1.0, -1.0).astype(zd.dtype)
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic binarization needs a random generator")
        u = rng.random(zd.shape)
        out = np.where(u < (1.0 + zd) / 2.0, 1.0, -1.0).astype(zd.dtype)
    else:
        raise ValueError(f"unknown binarizer mode {mode!r}")
    return T.make_op(out, (z,), lambda g: (g,))


def quantize(feature: Tensor, params: Conv, mode: str = "deterministic", rng=None) -> Tensor:
    return binarize(T.tanh(T.conv2d(feature, params.w, params.b)), mode, rng)


@dataclass
class BranchCodes:
    """Per-branch binary codes; inactive branches hold zeros."""

    codes: list  # np.ndarray (b, B, h, w) per branch
    active: tuple

    @property
    def n_branches(self) -> int:
        return len(self.codes)

    def masked(self, level: int) -> "BranchCodes":
        """Copy with branches beyond ``level`` switched off."""
        codes = [c if i < level else np.zeros_like(c) for i, c in enumerate(self.codes)]
        active = tuple(a and i < level for i, a in enumerate(self.active))
        return BranchCodes(codes, active)


def _mask(switch_mask, n: int) -> tuple:
    if switch_mask is None:
        return (True,) * n
    if isinstance(switch_mask, str):
        switch_mask = [ch == "1" for ch in switch_mask]
    mask = tuple(bool(m) for m in switch_mask)
    if len(mask) != n:
        raise ValueError(f"switch mask has {len(mask)} entries for {n} branches")
    return mask


def code_tensors(
    images, model: CodecModel, mode: str = "deterministic", rng=None, switch_mask=None
) -> list[Tensor]:
    """Differentiable encoder pass returning one code tensor per branch."""
    config = model.config
    images = np.asarray(images)
    s = config.spatial_factor
    h, w = images.shape[-3:-1]
    if h % s or w % s:
        raise ValueError(
            f"image {h}x{w} not divisible by {s}; pad bottom by {(-h) % s} and right by {(-w) % s}"
        )
    mask = _mask(switch_mask, config.branches)
    feats = encoder_features(branch_inputs(images, model), model)
    codes = []
    for feat, q, on in zip(feats, model.quantizer, mask):
        code = quantize(feat, q, mode, rng)
        codes.append(code if on else T.mul(code, 0.0))
    return codes


def encode(image: np.ndarray, model: CodecModel, switch_mask=None) -> BranchCodes:
    """Deterministic encoding of an image whose sides are multiples of s."""
    image = bitplane.validate_image(image) if np.asarray(image).ndim == 3 else np.asarray(image)
    mask = _mask(switch_mask, model.config.branches)
    with T.no_grad():
        codes = code_tensors(image, model, "deterministic", switch_mask=mask)
    return BranchCodes([c.data.copy() for c in codes], mask)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def decoder_outputs(codes: list[Tensor], model: CodecModel) -> list[Tensor]:
    """Residual image Y of every branch for one decoder pass."""
    xs = [T.conv2d(c, e.w, e.b) for c, e in zip(codes, model.entry)]
    for layer in model.decoder:
        xs = gated_layer(xs, layer)
    return [T.pixel_shuffle(T.conv2d(x, e.w, e.b), 2) for x, e in zip(xs, model.exit)]


def level_codes(codes: list[Tensor], level: int) -> list[Tensor]:
    return [c if i < level else Tensor(np.zeros_like(c.data)) for i, c in enumerate(codes)]


def reconstruct_levels(
    codes: list[Tensor], model: CodecModel, levels: Sequence[int] | None = None
) -> list[Tensor]:
    """Unclamped cumulative reconstructions for several levels in one batched pass.

    Level ``l`` uses a decoder pass where branches beyond ``l`` are zero; the
    passes for all requested levels are stacked along the batch axis.
    """
    n = len(codes)
    levels = list(range(1, n + 1)) if levels is None else list(levels)
    for level in levels:
        if not 1 <= level <= n:
            raise ValueError(f"level {level} outside 1..{n}")
    b = codes[0].shape[0]
    zeros = Tensor(np.zeros_like(codes[0].data))
    batched = []
    for i, c in enumerate(codes):
        parts = [c if i < level else zeros for level in levels]
        batched.append(parts[0] if len(parts) == 1 else T.concat(parts, axis=0))
    ys = decoder_outputs(batched, model)
    out = []
    for j, level in enumerate(levels):
        chunk = slice(j * b, (j + 1) * b)
        total = ys[0] if len(levels) == 1 else ys[0][chunk]
        for i in range(1, level):
            total = total + (ys[i] if len(levels) == 1 else ys[i][chunk])
        out.append(total)
    return out


@dataclass
class LevelReconstruction:
    level: int
    estimate: np.ndarray  # (H, W, 3) float in [0, 1]
    raw: np.ndarray  # (H, W, 3) unclamped sum of branch outputs
    branch_outputs: list  # Y of branches 1..level from this pass, each (H, W, 3)

    @property
    def pixels(self) -> np.ndarray:
        return np.round(255.0 * self.estimate).astype(np.uint8)


def _hwc(a: np.ndarray) -> np.ndarray:
    return a[0].transpose(1, 2, 0)


def decode(codes: BranchCodes, model: CodecModel, level: int) -> LevelReconstruction:
    n = model.config.branches
    if codes.n_branches != n:
        raise ValueError(f"codes have {codes.n_branches} branches, model expects {n}")
    if not 1 <= level <= n:
        raise ValueError(f"level {level} outside 1..{n}")
    dtype = model.entry[0].w.dtype
    tensors = [
        Tensor(c.astype(dtype)) if i < level else Tensor(np.zeros_like(c, dtype=dtype))
        for i, c in enumerate(codes.codes)
    ]
    with T.no_grad():
        ys = decoder_outputs(tensors, model)
    branch = [_hwc(y.data) for y in ys[:level]]
    raw = np.sum(branch, axis=0)
    return LevelReconstruction(level, np.clip(raw, 0.0, 1.0), raw, branch)


def decode_all(codes: BranchCodes, model: CodecModel, max_level: int | None = None) -> list[LevelReconstruction]:
    return [decode(codes, model, l) for l in range(1, (max_level or model.config.branches) + 1)]


# ---------------------------------------------------------------------------
# padding helpers for arbitrary image sizes
# ---------------------------------------------------------------------------


def pad_amounts(height: int, width: int, s: int) -> tuple[int, int]:
    return (-height) % s, (-width) % s


def pad_image(image: np.ndarray, s: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides are multiples of ``s``."""
    h, w = image.shape[:2]
    ph, pw = pad_amounts(h, w, s)
    if ph == 0 and pw == 0:
        return image, (0, 0)
    mode = "reflect" if h > ph and w > pw else "symmetric"
    if min(h, w) == 1:
        mode = "edge"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode), (ph, pw)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_CONFIG_HEAD = struct.Struct("<BBB")
_CONFIG_TAIL = struct.Struct("<BBBBBBBBBBBB")


def _enum_code(name: str, value: str) -> int:
    return _ENUMS[name].index(value)


def config_to_bytes(config: CodecConfig) -> bytes:
    head = _CONFIG_HEAD.pack(config.branches, config.code_channels, len(config.channels))
    widths = struct.pack(f"<{len(config.channels)}H", *config.channels)
    tail = _CONFIG_TAIL.pack(
        config.kernel,
        config.first_kernel,
        config.fuse_kernel,
        config.se_ratio,
        config.slice_channels,
        _enum_code("encoder_direction", config.encoder_direction),
        _enum_code("decoder_direction", config.decoder_direction),
        _enum_code("gate_variant", config.gate_variant),
        _enum_code("input_mode", config.input_mode),
        int(config.use_se),
        _enum_code("norm", config.norm),
        _enum_code("binarizer", config.binarizer),
    )
    return head + widths + tail


def config_from_bytes(buf: bytes, offset: int = 0) -> tuple[CodecConfig, int]:
    n, b, nc = _CONFIG_HEAD.unpack_from(buf, offset)
    offset += _CONFIG_HEAD.size
    widths = struct.unpack_from(f"<{nc}H", buf, offset)
    offset += 2 * nc
    vals = _CONFIG_TAIL.unpack_from(buf, offset)
    offset += _CONFIG_TAIL.size
    config = CodecConfig(
        branches=n,
        channels=widths,
        code_channels=b,
        kernel=vals[0],
        first_kernel=vals[1],
        fuse_kernel=vals[2],
        se_ratio=vals[3],
        slice_channels=vals[4],
        encoder_direction=_ENUMS["encoder_direction"][vals[5]],
        decoder_direction=_ENUMS["decoder_direction"][vals[6]],
        gate_variant=_ENUMS["gate_variant"][vals[7]],
        input_mode=_ENUMS["input_mode"][vals[8]],
        use_se=bool(vals[9]),
        norm=_ENUMS["norm"][vals[10]],
        binarizer=_ENUMS["binarizer"][vals[11]],
    )
    return config, offset


def model_to_bytes(model: CodecModel) -> bytes:
    """``BCDM`` | version u8 | config block | float count u32 | little-endian f32 values."""
    params = model.parameters()
    count = sum(p.data.size for p in params)
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params)
    return MODEL_MAGIC + bytes([MODEL_VERSION]) + config_to_bytes(model.config) + struct.pack("<I", count) + body


def model_from_bytes(buf: bytes) -> CodecModel:
    if buf[:4] != MODEL_MAGIC:
        raise ValueError("not a BCDM model file")
    if buf[4] != MODEL_VERSION:
        raise ValueError(f"unsupported model version {buf[4]}")
    config, offset = config_from_bytes(buf, 5)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    model = CodecModel.init(config, seed=0)
    if count != model.parameter_count():
        raise ValueError(f"model file holds {count} values, configuration needs {model.parameter_count()}")
    if len(buf) != offset + 4 * count:
        raise ValueError("model file is truncated or has trailing data")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    pos = 0
    for p in model.parameters():
        n = p.data.size
        p.data = values[pos : pos + n].reshape(p.shape).astype(np.float32)
        pos += n
    return model


def save_model(model: CodecModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> CodecModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# key=value configuration files
# ---------------------------------------------------------------------------

_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False}


def parse_config_overrides(items: dict[str, str]) -> dict:
    """Convert string values for CodecConfig fields; raises ConfigError on unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(CodecConfig)}
    aliases = {"se": "use_se", "N": "branches", "B": "code_channels"}
    out = {}
    unknown = []
    for key, raw in items.items():
        name = aliases.get(key, key)
        if name not in fields:
            unknown.append(key)
            continue
        raw = raw.strip()
        if name == "channels":
            out[name] = tuple(int(v) for v in raw.split(",") if v.strip())
        elif name == "use_se":
            if raw.lower() not in _BOOL:
                raise ConfigError(f"se must be on/off, got {raw!r}")
            out[name] = _BOOL[raw.lower()]
        elif name in _ENUMS:
            out[name] = raw
        else:
            try:
                out[name] = int(raw)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    return out


def read_key_values(text: str) -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items
