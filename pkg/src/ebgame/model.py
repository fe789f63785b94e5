"""Patch grid, column-wise wave masking, the MAE generator and the patch discriminator.

Images are split into a row-major sequence of P x P patches. A mask
selects whole patch columns (vertical strips of the beat image); the
encoder sees only the visible patches, the decoder fills the masked slots
with a learned token and predicts their pixels. The discriminator scores
individual patches as real or reconstructed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    enc_depth: int = 2
    dec_dim: int = 32
    dec_depth: int = 1
    disc_dim: int = 32
    disc_depth: int = 1
    num_heads: int = 4
    mlp_ratio: int = 2
    mask_ratio: float = 0.3
    mask_sigma: float | None = None  # None -> N / 6
    mask_sampling: str = "normal"  # or "uniform"
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        for dim in (self.embed_dim, self.dec_dim, self.disc_dim):
            if dim % self.num_heads:
                raise ConfigError(f"width {dim} not divisible by {self.num_heads} heads")
            if dim % 2:
                raise ConfigError("model widths must be even for the positional encoding")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.mask_sampling not in ("normal", "uniform"):
            raise ConfigError(f"unknown mask sampling mode {self.mask_sampling!r}")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch_size: int

    def __post_init__(self):
        p = self.patch_size
        if p < 1 or self.image_h % p or self.image_w % p:
            raise ConfigError(f"{self.image_h}x{self.image_w} image is not divisible into {p}x{p} patches")

    @property
    def rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2


def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """(..., H, W) image -> (..., N, P*P) patches, row-major over the grid and within a patch."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-2:] != (grid.image_h, grid.image_w):
        raise ShapeError(f"image shape {img.shape[-2:]} does not match grid "
                         f"{grid.image_h}x{grid.image_w}")
    lead = img.shape[:-2]
    p = grid.patch_size
    x = img.reshape(lead + (grid.rows, p, grid.cols, p))
    x = np.moveaxis(x, -3, -2)  # (..., rows, cols, p, p)
    return x.reshape(lead + (grid.num_patches, p * p))


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.shape[-2:] != (grid.num_patches, grid.patch_dim):
        raise ShapeError(f"expected (..., {grid.num_patches}, {grid.patch_dim}) patches, got {x.shape}")
    lead = x.shape[:-2]
    p = grid.patch_size
    x = x.reshape(lead + (grid.rows, grid.cols, p, p))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (grid.image_h, grid.image_w))


# ---------------------------------------------------------------------------
# wave masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSet:
    seed_patches: tuple[tuple[int, int], ...]
    columns: tuple[int, ...]
    masked: tuple[int, ...]
    grid: PatchGrid

    @property
    def visible(self) -> tuple[int, ...]:
        m = set(self.masked)
        return tuple(k for k in range(self.grid.num_patches) if k not in m)


def mask_from_columns(grid: PatchGrid, columns, seed_patches=()) -> MaskSet:
    """Expand a set of patch columns to every patch in those columns."""
    cols = tuple(sorted(set(int(c) for c in columns)))
    if any(not 0 <= c < grid.cols for c in cols):
        raise ShapeError(f"column index out of range for {grid.cols} columns")
    masked = tuple(sorted(r * grid.cols + c for r in range(grid.rows) for c in cols))
    return MaskSet(tuple(seed_patches), cols, masked, grid)


def masked_column_count(num_cols: int, mask_ratio: float) -> int:
    """round(ratio * cols) with halves rounded up, at least one column when ratio > 0."""
    k = int(math.floor(mask_ratio * num_cols + 0.5))
    return min(max(k, 1 if mask_ratio > 0 else 0), num_cols)


def sample_wave_mask(grid: PatchGrid, mask_ratio: float, rng: np.random.Generator,
                     sigma: float | None = None, mode: str = "normal") -> MaskSet:
    """Draw seed patches until enough distinct columns are covered, then mask those columns whole.

    In ``normal`` mode a 1-based patch position is drawn from a normal
    centred at (N+1)/2 with std ``sigma`` (default N/6), truncated to
    [1, N] by rejection. Positions enumerate the grid column by column,
    so the draw concentrates on the central columns where the beat's
    waves sit. ``uniform`` mode draws positions uniformly.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ConfigError("mask_ratio must lie in [0, 1]")
    n = grid.num_patches
    k = masked_column_count(grid.cols, mask_ratio)
    sigma = n / 6.0 if sigma is None else sigma
    centre = (n + 1) / 2.0
    seeds: list[tuple[int, int]] = []
    cols: set[int] = set()
    while len(cols) < k:
        if mode == "uniform":
            pos = int(rng.integers(1, n + 1))
        else:
            u = rng.normal(centre, sigma)
            if not 0.5 <= u < n + 0.5:
                continue
            pos = int(math.floor(u + 0.5))
        r, c = (pos - 1) % grid.rows, (pos - 1) // grid.rows
        seeds.append((r, c))
        cols.add(c)
    return mask_from_columns(grid, cols, seeds)


def partition_patches(patches: np.ndarray, mask: MaskSet) -> tuple[np.ndarray, np.ndarray]:
    """Split an (N, D) patch sequence into visible and masked parts, order preserved."""
    x = np.asarray(patches)
    if x.shape[0] != mask.grid.num_patches:
        raise ShapeError(f"sequence of {x.shape[0]} patches does not match grid of {mask.grid.num_patches}")
    return x[list(mask.visible)], x[list(mask.masked)]


def positional_encoding(grid: PatchGrid, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos table, shape (N, dim): first half encodes the row, second the column."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"positional encoding width must be even, got {dim}")
    half = dim // 2
    rows = np.repeat(np.arange(grid.rows), grid.cols).astype(np.float64)
    cols = np.tile(np.arange(grid.cols), grid.rows).astype(np.float64)

    def encode_1d(pos: np.ndarray, d: int) -> np.ndarray:
        m = (d + 1) // 2
        omega = 1.0 / 10000.0 ** (np.arange(m) / max(m, 1))
        ang = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :d]

    return np.concatenate([encode_1d(rows, half), encode_1d(cols, dim - half)], axis=1)


def mask_indices(masks: list[MaskSet]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-batch (visible, masked, restore) index arrays; every mask must cover the same count."""
    keep = np.array([m.visible for m in masks], dtype=np.intp)
    drop = np.array([m.masked for m in masks], dtype=np.intp)
    if keep.ndim != 2 or drop.ndim != 2:
        raise ShapeError("masks in one batch must have equal sizes")
    n = masks[0].grid.num_patches
    keep = keep.reshape(len(masks), -1)
    drop = drop.reshape(len(masks), -1)
    restore = np.argsort(np.concatenate([keep, drop], axis=1), axis=1, kind="stable")
    assert restore.shape[1] == n
    return keep, drop, restore


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _block_params(prefix: str, dim: int, mlp_ratio: int, rng, std) -> dict[str, np.ndarray]:
    hidden = dim * mlp_ratio
    p = {f"{prefix}.ln1.g": np.ones(dim), f"{prefix}.ln1.b": np.zeros(dim)}
    for w in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.w{w}"] = _trunc_normal(rng, (dim, dim), std)
        p[f"{prefix}.attn.b{w}"] = np.zeros(dim)
    p[f"{prefix}.ln2.g"] = np.ones(dim)
    p[f"{prefix}.ln2.b"] = np.zeros(dim)
    p[f"{prefix}.mlp.w1"] = _trunc_normal(rng, (dim, hidden), std)
    p[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    p[f"{prefix}.mlp.w2"] = _trunc_normal(rng, (hidden, dim), std)
    p[f"{prefix}.mlp.b2"] = np.zeros(dim)
    return p


@dataclass
class GeneratorParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class DiscriminatorParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_generator(config: ModelConfig, seed: int = 0) -> GeneratorParams:
    rng = np.random.default_rng(seed)
    std = config.init_std
    pd, d, dd = config.grid.patch_dim, config.embed_dim, config.dec_dim
    p = {"enc.patch.w": _trunc_normal(rng, (pd, d), std), "enc.patch.b": np.zeros(d)}
    for i in range(config.enc_depth):
        p.update(_block_params(f"enc.blocks.{i}", d, config.mlp_ratio, rng, std))
    p["enc.norm.g"], p["enc.norm.b"] = np.ones(d), np.zeros(d)
    p["dec.embed.w"], p["dec.embed.b"] = _trunc_normal(rng, (d, dd), std), np.zeros(dd)
    p["dec.mask_token"] = _trunc_normal(rng, (1, 1, dd), std)
    for i in range(config.dec_depth):
        p.update(_block_params(f"dec.blocks.{i}", dd, config.mlp_ratio, rng, std))
    p["dec.norm.g"], p["dec.norm.b"] = np.ones(dd), np.zeros(dd)
    p["dec.head.w"], p["dec.head.b"] = np.zeros((dd, pd)), np.zeros(pd)
    return GeneratorParams(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})


def init_discriminator(config: ModelConfig, seed: int = 0) -> DiscriminatorParams:
    rng = np.random.default_rng([seed, 1])
    std = config.init_std
    pd, dd = config.grid.patch_dim, config.disc_dim
    p = {"disc.patch.w": _trunc_normal(rng, (pd, dd), std), "disc.patch.b": np.zeros(dd)}
    for i in range(config.disc_depth):
        p.update(_block_params(f"disc.blocks.{i}", dd, config.mlp_ratio, rng, std))
    p["disc.norm.g"], p["disc.norm.b"] = np.ones(dd), np.zeros(dd)
    p["disc.head.w"], p["disc.head.b"] = _trunc_normal(rng, (dd, 1), std), np.zeros(1)
    return DiscriminatorParams(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def transformer_block(x: Tensor, params, prefix: str, num_heads: int, eps: float) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)), then x + MLP(LN(x))."""
    h = nx.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], eps)
    attn = {k: params[f"{prefix}.attn.{k}"] for k in
            ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    x = x + nx.multi_head_attention(h, h, h, num_heads, attn)
    h = nx.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], eps)
    h = nx.gelu(nx.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return x + nx.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])


def _batched(x, positions):
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.intp)
    if x.ndim == 2:
        x, positions = x[None], positions[None]
    if x.shape[:2] != positions.shape:
        raise ShapeError(f"patches {x.shape} and positions {positions.shape} disagree")
    return x, positions


def encode(visible: np.ndarray, positions: np.ndarray, params: GeneratorParams) -> Tensor:
    """Embed visible patches, add their positional codes, run the encoder blocks.

    ``visible`` is (B, V, P*P) (or (V, P*P)) and ``positions`` the matching
    patch indices. Returns R_v of shape (B, V, embed_dim).
    """
    cfg = params.config
    x, positions = _batched(visible, positions)
    if x.shape[1] == 0:
        raise ContractError("encoder needs at least one visible patch")
    pe = positional_encoding(cfg.grid, cfg.embed_dim)[positions]
    h = nx.linear(Tensor(x), params["enc.patch.w"], params["enc.patch.b"]) + pe
    for i in range(cfg.enc_depth):
        h = transformer_block(h, params, f"enc.blocks.{i}", cfg.num_heads, cfg.ln_eps)
    return nx.layer_norm(h, params["enc.norm.g"], params["enc.norm.b"], cfg.ln_eps)


@dataclass
class Reconstruction:
    latent: Tensor  # R_v, (B, V, embed_dim)
    predicted_all: Tensor  # decoder output for every slot, (B, N, P*P)
    predicted_masked: Tensor  # X^_m, (B, M, P*P)
    full: Tensor  # X~ in patch space, originals at visible slots, (B, N, P*P)
    masks: list[MaskSet]

    def full_image(self) -> np.ndarray:
        return unpatchify(self.full.data, self.masks[0].grid)


def decode(latent: Tensor, masks: list[MaskSet], params: GeneratorParams,
           visible: np.ndarray) -> Reconstruction:
    """Fill masked slots with the mask token, decode every slot, assemble X~.

    ``visible`` holds the original visible pixels in the same order as the
    encoder input; they are copied into X~ unchanged.
    """
    cfg = params.config
    grid = cfg.grid
    if isinstance(masks, MaskSet):
        masks = [masks]
    keep, drop, restore = mask_indices(masks)
    bsz = len(masks)
    if latent.ndim != 3 or latent.shape[:2] != keep.shape:
        raise ShapeError(f"latent {latent.shape} does not match {keep.shape} visible slots")
    vis = np.asarray(visible, dtype=np.float64).reshape(bsz, keep.shape[1], grid.patch_dim)
    y = nx.linear(latent, params["dec.embed.w"], params["dec.embed.b"])
    tokens = params["dec.mask_token"] + np.zeros((bsz, drop.shape[1], cfg.dec_dim))
    seq = nx.gather(nx.concat([y, tokens], axis=1), restore)
    seq = seq + positional_encoding(grid, cfg.dec_dim)
    for i in range(cfg.dec_depth):
        seq = transformer_block(seq, params, f"dec.blocks.{i}", cfg.num_heads, cfg.ln_eps)
    seq = nx.layer_norm(seq, params["dec.norm.g"], params["dec.norm.b"], cfg.ln_eps)
    pred = nx.linear(seq, params["dec.head.w"], params["dec.head.b"])
    pred_m = nx.gather(pred, drop)
    full = nx.gather(nx.concat([Tensor(vis), pred_m], axis=1), restore)
    return Reconstruction(latent, pred, pred_m, full, list(masks))


def generate(patches: np.ndarray, masks: list[MaskSet], params: GeneratorParams) -> Reconstruction:
    """Full generator pass on (B, N, P*P) patches under one mask per image."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if isinstance(masks, MaskSet):
        masks = [masks]
    keep, _, _ = mask_indices(masks)
    rows = np.arange(x.shape[0])[:, None]
    vis = x[rows, keep]
    latent = encode(vis, keep, params)
    return decode(latent, masks, params, vis)


def discriminate(patches, positions, params: DiscriminatorParams) -> Tensor:
    """Per-patch probability of being a real (not reconstructed) patch.

    ``patches`` may be a Tensor so generator gradients can flow through it.
    """
    cfg = params.config
    if isinstance(patches, Tensor):
        x = patches if patches.ndim == 3 else nx.reshape(patches, (1,) + patches.shape)
        positions = np.asarray(positions, dtype=np.intp).reshape(x.shape[:2])
    else:
        arr, positions = _batched(patches, positions)
        x = Tensor(arr)
    if x.shape[1] == 0:
        raise ContractError("discriminator needs at least one patch")
    pe = positional_encoding(cfg.grid, cfg.disc_dim)[positions]
    h = nx.linear(x, params["disc.patch.w"], params["disc.patch.b"]) + pe
    for i in range(cfg.disc_depth):
        h = transformer_block(h, params, f"disc.blocks.{i}", cfg.num_heads, cfg.ln_eps)
    h = nx.layer_norm(h, params["disc.norm.g"], params["disc.norm.b"], cfg.ln_eps)
    logits = nx.linear(h, params["disc.head.w"], params["disc.head.b"])
    return nx.sigmoid(nx.reshape(logits, logits.shape[:2]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"EBGAMECK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, gen: GeneratorParams, disc: DiscriminatorParams | None = None,
                    extra: dict | None = None) -> None:
    """Write config echo plus named little-endian float64 arrays."""
    meta = {"model": asdict(gen.config), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = dict(gen.tensors)
    if disc is not None:
        arrays.update(disc.tensors)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name, t in arrays.items():
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[GeneratorParams, DiscriminatorParams | None, dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, nmeta = struct.unpack_from("<II", buf, pos)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        pos += 8
        meta = json.loads(buf[pos:pos + nmeta].decode())
        pos += nmeta
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise ParseError("checkpoint truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise ParseError(f"checkpoint truncated: {exc}") from None
    config = ModelConfig(**meta["model"])
    gen = GeneratorParams(config, {k: Tensor(v, True) for k, v in arrays.items() if not k.startswith("disc.")})
    dpart = {k: Tensor(v, True) for k, v in arrays.items() if k.startswith("disc.")}
    disc = DiscriminatorParams(config, dpart) if dpart else None
    return gen, disc, meta.get("extra", {})
