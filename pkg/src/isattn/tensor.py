"""Dense (B, H, S, D) tensor conventions, block partitioning, and block-level gather/scatter.

Tensors are plain numpy arrays in row-major (B, H, S, D) order. "single"
precision stores float32 but every reduction here accumulates in float64;
"double" is float64 end to end.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BlockIndexError, ContractError, FormatError, InputError, LayoutError

Tensor4 = np.ndarray

DTYPES = {"single": np.float32, "double": np.float64}

_MAGIC = b"ISA4"
_HEADER = struct.Struct("<4I")


def ensure_tensor4(x: Tensor4, name: str = "tensor") -> Tensor4:
    """Validate the (B, H, S, D) contract: 4 axes, all dims >= 1, all elements finite."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise LayoutError(f"{name}: expected 4 axes (B,H,S,D), got shape {x.shape}")
    if min(x.shape) < 1:
        raise LayoutError(f"{name}: all dims must be >= 1, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError(f"{name}: non-finite elements")
    return x


@dataclass
class BlockLayout:
    """Partition of a length-S sequence into blocks of `block_size` rows.

    The sequence is zero-padded up to `padded_len`; only the final block may
    hold fewer than `block_size` valid rows.
    """

    block_size: int
    seq_len: int
    padded_len: int = field(init=False)
    num_blocks: int = field(init=False)
    valid_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.block_size < 1:
            raise LayoutError(f"block_size must be >= 1, got {self.block_size}")
        if self.seq_len < 1:
            raise LayoutError(f"seq_len must be >= 1, got {self.seq_len}")
        b, s = self.block_size, self.seq_len
        self.num_blocks = -(-s // b)
        self.padded_len = self.num_blocks * b
        valid = np.full(self.num_blocks, b, dtype=np.int64)
        if s % b:
            valid[-1] = s % b
        self.valid_rows = valid


def pad_to_blocks(x: Tensor4, layout: BlockLayout) -> Tensor4:
    """Zero-pad the sequence axis from layout.seq_len up to layout.padded_len."""
    if x.shape[2] != layout.seq_len:
        raise LayoutError(f"seq length {x.shape[2]} != layout.seq_len {layout.seq_len}")
    pad = layout.padded_len - layout.seq_len
    if pad == 0:
        return x
    B, H, _, D = x.shape
    return np.concatenate([x, np.zeros((B, H, pad, D), dtype=x.dtype)], axis=2)


@dataclass(frozen=True)
class IclLayout:
    """Source/context split of an in-context sequence: source tokens first, context after."""

    l_src: int
    l_ctx: int

    def __post_init__(self):
        if self.l_src < 1:
            raise LayoutError(f"l_src must be >= 1, got {self.l_src}")
        if self.l_ctx < 0:
            raise LayoutError(f"l_ctx must be >= 0, got {self.l_ctx}")

    @property
    def total(self) -> int:
        return self.l_src + self.l_ctx


def block_mean(x: Tensor4, layout: BlockLayout) -> Tensor4:
    """Per-block arithmetic mean over the sequence axis, (B,H,S,D) -> (B,H,T,D).

    Padded rows never contribute: each block is averaged over its valid rows
    only, with float64 accumulation.
    """
    x = ensure_tensor4(x, "block_mean input")
    if x.shape[2] not in (layout.seq_len, layout.padded_len):
        raise LayoutError(
            f"block_mean: seq length {x.shape[2]} matches neither layout.seq_len "
            f"{layout.seq_len} nor padded_len {layout.padded_len}"
        )
    xp = pad_to_blocks(x, layout) if x.shape[2] == layout.seq_len else x
    B, H, _, D = xp.shape
    T, b = layout.num_blocks, layout.block_size
    blocks = xp.reshape(B, H, T, b, D)
    if layout.seq_len < layout.padded_len:
        # zero out padded rows so raggedly padded inputs and pre-padded inputs agree
        mask = (np.arange(b) < layout.valid_rows[:, None]).astype(np.float64)
        sums = np.einsum("bhtrd,tr->bhtd", blocks.astype(np.float64), mask)
    else:
        sums = blocks.sum(axis=3, dtype=np.float64)
    means = sums / layout.valid_rows[None, None, :, None]
    return means.astype(x.dtype)


def _normalize_block_index(idx, B: int, H: int, num_blocks: int, *, name: str) -> np.ndarray:
    """Coerce per-(B,H) block-index lists to an int64 (B,H,k) array and validate."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (B, H, idx.shape[0])).copy()
    if idx.ndim != 3 or idx.shape[:2] != (B, H):
        raise LayoutError(f"{name}: index array must have shape (B,H,k), got {idx.shape}")
    if idx.size:
        if idx.min() < 0 or idx.max() >= num_blocks:
            raise BlockIndexError(f"{name}: block index out of range [0, {num_blocks})")
        if np.any(np.diff(idx, axis=2) <= 0):
            raise ContractError(f"{name}: block-index lists must be sorted ascending without duplicates")
    return idx


def gather_blocks(x: Tensor4, layout: BlockLayout, idx) -> Tensor4:
    """Gather whole blocks by per-(B,H) sorted index lists; rows are copied bit-exactly."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise LayoutError(f"gather_blocks: expected 4 axes, got shape {x.shape}")
    if x.shape[2] != layout.padded_len:
        raise LayoutError(
            f"gather_blocks: seq length {x.shape[2]} != layout.padded_len {layout.padded_len}"
        )
    B, H, _, D = x.shape
    T, b = layout.num_blocks, layout.block_size
    idx = _normalize_block_index(idx, B, H, T, name="gather_blocks")
    k = idx.shape[2]
    if k == 0:
        return np.zeros((B, H, 0, D), dtype=x.dtype)
    blocks = x.reshape(B, H, T, b, D)
    out = np.take_along_axis(blocks, idx[:, :, :, None, None], axis=2)
    return out.reshape(B, H, k * b, D)


def scatter_blocks(dst: Tensor4, idx, src: Tensor4) -> Tensor4:
    """Return a copy of dst with the indexed blocks replaced by src's blocks, in list order."""
    dst = np.asarray(dst)
    src = np.asarray(src)
    if dst.ndim != 4 or src.ndim != 4:
        raise LayoutError("scatter_blocks: dst and src must have 4 axes")
    B, H, S, D = dst.shape
    if src.shape[0] != B or src.shape[1] != H or src.shape[3] != D:
        raise LayoutError(f"scatter_blocks: src shape {src.shape} incompatible with dst {dst.shape}")
    if src.shape[2] == 0:
        return dst.copy()
    idx = np.asarray(idx, dtype=np.int64)
    k = idx.shape[-1]
    if src.shape[2] % k:
        raise LayoutError(f"scatter_blocks: src seq length {src.shape[2]} not divisible by |idx|={k}")
    b = src.shape[2] // k
    if S % b:
        raise LayoutError(f"scatter_blocks: dst seq length {S} not divisible by block size {b}")
    T = S // b
    idx = _normalize_block_index(idx, B, H, T, name="scatter_blocks")
    out = dst.reshape(B, H, T, b, D).copy()
    np.put_along_axis(out, idx[:, :, :, None, None], src.reshape(B, H, k, b, D).astype(dst.dtype), axis=2)
    return out.reshape(B, H, S, D)


def concat_seq(a: Tensor4, b: Tensor4) -> Tensor4:
    """Concatenate along the sequence axis; a's rows precede b's."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 4 or b.ndim != 4:
        raise LayoutError("concat_seq: operands must have 4 axes")
    if a.shape[0] != b.shape[0] or a.shape[1] != b.shape[1] or a.shape[3] != b.shape[3]:
        raise LayoutError(f"concat_seq: (B,H,D) mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=2)


def save_tensor4(path, x: Tensor4, precision: str = "single") -> None:
    """Write the flat binary container: magic 'ISA4', four u32 LE dims, raw LE elements."""
    x = ensure_tensor4(x, "save_tensor4 input")
    dt = np.dtype(DTYPES[precision]).newbyteorder("<")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(_HEADER.pack(*x.shape))
        f.write(np.ascontiguousarray(x, dtype=dt).tobytes())


def load_tensor4(path, precision: str = "single") -> Tensor4:
    """Read a container written by save_tensor4. Raises FormatError with the byte offset on truncation."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte 0 (want {_MAGIC!r})")
    if len(data) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    dims = _HEADER.unpack_from(data, 4)
    if min(dims) < 1:
        raise FormatError(f"{path}: zero dim in header {dims}")
    dt = np.dtype(DTYPES[precision]).newbyteorder("<")
    need = 4 + _HEADER.size + int(np.prod(dims)) * dt.itemsize
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte {len(data)}")
    elems = np.frombuffer(data, dtype=dt, offset=4 + _HEADER.size)
    x = elems.reshape(dims).astype(DTYPES[precision])
    return ensure_tensor4(x, f"load_tensor4({path})")
