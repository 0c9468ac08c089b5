"""Encoder / per-cell Mamba / decoder network mapping a window of limited
flow images to a recovered flow image, plus parameter init and checkpoints.

Batched layout: a window is (B, L, 4, H, W) (or (L, 4, H, W) for a single
sample).  Per-cell sequences are (B*H*W, K, L).  The decoder flattens each
cell's K x L block channel-major: element (k, l) lands at position k*L + l.
"""
from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import coerce_into, format_kv, parse_kv, to_flat
from .errors import ContractError, FormatError, ShapeError, ValidationError
from .ssm import SsmParams, mamba_block_forward

CHECKPOINT_MAGIC = b"STMB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    H: int = 16
    W: int = 16
    L: int = 6
    K: int = 16
    N: int = 8
    k_enc: int = 3
    k_dec: int = 3
    speed_scale: float = 120.0

    def __post_init__(self):
        for name in ("H", "W", "L", "K", "N", "k_enc", "k_dec"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ModelConfig.{name} must be positive")
        if self.k_enc % 2 == 0 or self.k_dec % 2 == 0:
            raise ValidationError("convolution kernel sizes must be odd")
        if not self.speed_scale > 0:
            raise ValidationError("speed_scale must be positive")

    @classmethod
    def from_kv(cls, values) -> "ModelConfig":
        return coerce_into(cls, values)


@dataclass
class ModelParams:
    enc_conv: Tensor   # (1, 1, k_enc, k_enc), shared by the four direction channels
    enc_fc_w: Tensor   # (K, 4)
    enc_fc_b: Tensor   # (K,)
    ssm: SsmParams
    dec_fc_w: Tensor   # (4, K*L)
    dec_fc_b: Tensor   # (4,)
    dec_conv: Tensor   # (4, 4, k_dec, k_dec)

    def named(self) -> dict[str, Tensor]:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "ssm"}
        out.update({f"ssm.{k}": v for k, v in self.ssm.tensors().items()})
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def copy(self) -> "ModelParams":
        return params_from_arrays({k: v.data.copy() for k, v in self.named().items()})


def params_from_arrays(arrays: dict[str, np.ndarray]) -> ModelParams:
    t = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}
    ssm = SsmParams(A=t["ssm.A"], D_delta=t["ssm.D_delta"], W_B=t["ssm.W_B"],
                    W_C=t["ssm.W_C"], W_delta=t["ssm.W_delta"])
    return ModelParams(enc_conv=t["enc_conv"], enc_fc_w=t["enc_fc_w"], enc_fc_b=t["enc_fc_b"], ssm=ssm,
                       dec_fc_w=t["dec_fc_w"], dec_fc_b=t["dec_fc_b"], dec_conv=t["dec_conv"])


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    K, N = cfg.K, cfg.N
    return {
        "enc_conv": (1, 1, cfg.k_enc, cfg.k_enc), "enc_fc_w": (K, 4), "enc_fc_b": (K,),
        "dec_fc_w": (4, K * cfg.L), "dec_fc_b": (4,), "dec_conv": (4, 4, cfg.k_dec, cfg.k_dec),
        "ssm.A": (K, N), "ssm.D_delta": (K,), "ssm.W_B": (N, K), "ssm.W_C": (N, K), "ssm.W_delta": (1, K),
    }


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    for name, shape in expected_shapes(cfg).items():
        got = params.named()[name].shape
        if got != shape:
            raise ShapeError(f"parameter {name} has shape {got}, config expects {shape}")


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform +-sqrt(1/fan_in) weights, zero biases, stable SSM init."""
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        b = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-b, b, shape), requires_grad=True)

    enc_conv = uniform((1, 1, cfg.k_enc, cfg.k_enc), cfg.k_enc**2)
    enc_fc_w = uniform((cfg.K, 4), 4)
    ssm = SsmParams.initialize(cfg.K, cfg.N, rng)
    dec_fc_w = uniform((4, cfg.K * cfg.L), cfg.K * cfg.L)
    dec_conv = uniform((4, 4, cfg.k_dec, cfg.k_dec), 4 * cfg.k_dec**2)
    return ModelParams(enc_conv=enc_conv, enc_fc_w=enc_fc_w, enc_fc_b=Tensor(np.zeros(cfg.K), requires_grad=True),
                       ssm=ssm, dec_fc_w=dec_fc_w, dec_fc_b=Tensor(np.zeros(4), requires_grad=True),
                       dec_conv=dec_conv)


def encode(X, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(..., 4, H, W) normalised frames -> (..., K, H, W) latent frames.

    The single-channel enc_conv runs on each direction channel separately, then
    a per-pixel affine map lifts the 4-vector to K.
    """
    X = ad.as_tensor(X)
    if X.ndim < 3 or X.shape[-3:] != (4, cfg.H, cfg.W):
        raise ShapeError(f"encode: expected (..., 4, {cfg.H}, {cfg.W}), got {X.shape}")
    lead = X.shape[:-3]
    n = int(np.prod(lead)) if lead else 1
    pad = (cfg.k_enc - 1) // 2
    per_channel = ad.reshape(X, (n * 4, 1, cfg.H, cfg.W))
    conv = ad.reshape(ad.conv2d(per_channel, params.enc_conv, pad), (n, 4, cfg.H, cfg.W))
    pixels = ad.transpose(conv, (0, 2, 3, 1))                       # (n, H, W, 4)
    lifted = ad.linear(pixels, params.enc_fc_w, params.enc_fc_b)    # (n, H, W, K)
    return ad.reshape(ad.transpose(lifted, (0, 3, 1, 2)), lead + (cfg.K, cfg.H, cfg.W))


def serialize_cells(frames) -> Tensor:
    """(..., L, K, H, W) latent window -> (..., H*W, K, L) per-cell sequences.

    Accepts a list of L tensors of shape (K, H, W) as well.
    """
    if isinstance(frames, (list, tuple)):
        shapes = {ad.as_tensor(f).shape for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"serialize_cells: frames have inconsistent shapes {sorted(shapes)}")
        frames = ad.stack(list(frames), axis=0)
    frames = ad.as_tensor(frames)
    if frames.ndim < 4:
        raise ShapeError(f"serialize_cells: expected (..., L, K, H, W), got {frames.shape}")
    *lead, L, K, H, W = frames.shape
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 2, nl + 3, nl + 1, nl)           # (..., H, W, K, L)
    return ad.reshape(ad.transpose(frames, perm), tuple(lead) + (H * W, K, L))


def deserialize_cells(cells, H: int, W: int) -> Tensor:
    """Inverse of :func:`serialize_cells`."""
    cells = ad.as_tensor(cells)
    *lead, HW, K, L = cells.shape
    if HW != H * W:
        raise ShapeError(f"deserialize_cells: {HW} cells cannot form a {H}x{W} grid")
    nl = len(lead)
    grid = ad.reshape(cells, tuple(lead) + (H, W, K, L))
    perm = tuple(range(nl)) + (nl + 3, nl + 2, nl, nl + 1)
    return ad.transpose(grid, perm)


def decode(cells, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(..., H*W, K, L) Mamba outputs -> (..., 4, H, W) image.

    Each cell's block is flattened channel-major (index k*L + l) and mapped to a
    4-vector by dec_fc; dec_conv (4 in, 4 out) then mixes neighbourhoods.
    """
    cells = ad.as_tensor(cells)
    expected = (cfg.H * cfg.W, cfg.K, cfg.L)
    if cells.ndim < 3 or cells.shape[-3:] != expected:
        raise ShapeError(f"decode: expected (..., {expected}), got {cells.shape}")
    lead = cells.shape[:-3]
    n = int(np.prod(lead)) if lead else 1
    flat = ad.reshape(cells, (n, cfg.H, cfg.W, cfg.K * cfg.L))
    g = ad.linear(flat, params.dec_fc_w, params.dec_fc_b)           # (n, H, W, 4)
    image = ad.transpose(g, (0, 3, 1, 2))
    y = ad.conv2d(image, params.dec_conv, (cfg.k_dec - 1) // 2)
    return ad.reshape(y, lead + (4, cfg.H, cfg.W))


def forward(window, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Raw km/h window (L, 4, H, W) or (B, L, 4, H, W) -> recovered km/h image(s)."""
    window = ad.as_tensor(window)
    if window.ndim not in (4, 5) or window.shape[-4:] != (cfg.L, 4, cfg.H, cfg.W):
        raise ContractError(f"forward: expected window (…, {cfg.L}, 4, {cfg.H}, {cfg.W}), got {window.shape}")
    single = window.ndim == 4
    if single:
        window = ad.reshape(window, (1,) + window.shape)
    B = window.shape[0]
    x = ad.scale(window, 1.0 / cfg.speed_scale)
    latent = encode(x, params, cfg)                                 # (B, L, K, H, W)
    cells = serialize_cells(latent)                                 # (B, H*W, K, L)
    flat = ad.reshape(cells, (B * cfg.H * cfg.W, cfg.K, cfg.L))
    out = mamba_block_forward(flat, params.ssm)
    y = decode(ad.reshape(out, (B, cfg.H * cfg.W, cfg.K, cfg.L)), params, cfg)
    y = ad.scale(y, cfg.speed_scale)
    return ad.reshape(y, (4, cfg.H, cfg.W)) if single else y


def predict(window: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        return forward(window, params, cfg).data


# -------------------------------------------------------------- checkpoints


def checkpoint_bytes(params: ModelParams, cfg: ModelConfig, extra: dict[str, np.ndarray] | None = None) -> bytes:
    check_params(params, cfg)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    block = format_kv(to_flat(cfg)).encode("utf-8")
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    named = {k: v.data for k, v in params.named().items()}
    named.update(extra or {})
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        ad.write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path, extra=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg, extra))


def load_checkpoint(path, with_extra: bool = False):
    """Returns (params, config), or (params, config, extra) with ``with_extra``."""
    data = Path(path).read_bytes()
    fh = io.BytesIO(data)

    def read(n):
        chunk = fh.read(n)
        if len(chunk) != n:
            raise FormatError(f"{path}: truncated checkpoint")
        return chunk

    if read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an STMB checkpoint")
    (version,) = struct.unpack("<I", read(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (size,) = struct.unpack("<I", read(4))
    try:
        cfg = ModelConfig.from_kv(parse_kv(read(size).decode("utf-8"), str(path)))
    except (UnicodeDecodeError, ValidationError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from None
    (count,) = struct.unpack("<I", read(4))
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", read(4))
        name = read(n).decode("utf-8", errors="replace")
        arrays[name] = ad.read_tensor(fh)
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    missing = set(expected_shapes(cfg)) - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    params = params_from_arrays({k: arrays[k] for k in expected_shapes(cfg)})
    try:
        check_params(params, cfg)
    except ShapeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if with_extra:
        return params, cfg, {k: v for k, v in arrays.items() if k not in expected_shapes(cfg)}
    return params, cfg
