"""Token grids, group-of-slices configuration, and slice partitioning.

Frames and layers are 0-based throughout the arrays. The slicing math that
assigns frames to units speaks 1-based frame and unit ids, matching the
usual presentation of periodic interleaving; `build_slice_grid` translates
to array coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np


class TokenState(IntEnum):
    """Per-cell receiver state."""

    RECEIVED = 0   # delivered or recovered bit-exactly
    LOST = 1       # carried by a lost packet
    INVALID = 2    # delivered or undefined but unusable (broken dependency)
    CONCEALED = 3  # filled in by the concealment predictor


@dataclass
class TokenGrid:
    """Token indices for T frames by n_layers quantizer layers.

    ``level[t]`` is the number of encoded layers for frame t; token values
    at layers >= level[t] are meaningless. ``vocab`` bounds every token.
    """

    tokens: np.ndarray
    level: np.ndarray
    vocab: int

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int32)
        self.level = np.ascontiguousarray(self.level, dtype=np.int16)
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be 2-d (frames by layers)")
        if self.level.shape != (self.tokens.shape[0],):
            raise ValueError("level must have one entry per frame")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")
        if np.any((self.level < 0) | (self.level > self.tokens.shape[1])):
            raise ValueError("level out of range")
        live = np.arange(self.tokens.shape[1])[None, :] < self.level[:, None]
        bad = live & ((self.tokens < 0) | (self.tokens >= self.vocab))
        if np.any(bad):
            raise ValueError("token value outside vocabulary")

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_layers(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.level.copy(), self.vocab)


@dataclass
class TokenStateGrid:
    """Receiver-side state per token cell, aligned with a TokenGrid."""

    states: np.ndarray

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.int8)
        if self.states.ndim != 2:
            raise ValueError("states must be 2-d (frames by layers)")

    @classmethod
    def initial(cls, level: np.ndarray, n_layers: int,
                fill: TokenState = TokenState.LOST) -> "TokenStateGrid":
        # cells beyond a frame's encoded level are INVALID from the start
        states = np.full((len(level), n_layers), int(fill), dtype=np.int8)
        beyond = np.arange(n_layers)[None, :] >= np.asarray(level)[:, None]
        states[beyond] = int(TokenState.INVALID)
        return cls(states)

    def copy(self) -> "TokenStateGrid":
        return TokenStateGrid(self.states.copy())


@dataclass(frozen=True)
class GosConfig:
    """Group-of-slices layout.

    gos_len: frames per group.
    n_units: number of interleaved frame units per group.
    layer_bounds: group boundaries (N_0 .. N_{J+1}); group 0 spans layers
        1..layer_bounds[1] and is the coarse group, group j spans
        layer_bounds[j]+1 .. layer_bounds[j+1].
    key_unit: the unit whose fine slices anchor the coding dependency.
    """

    gos_len: int
    n_units: int
    layer_bounds: tuple
    key_unit: int = 1

    def __post_init__(self):
        if self.gos_len < 1:
            raise ValueError("gos_len must be at least 1")
        if not 1 <= self.n_units <= self.gos_len:
            raise ValueError("n_units must be in [1, gos_len]")
        b = tuple(int(x) for x in self.layer_bounds)
        object.__setattr__(self, "layer_bounds", b)
        if len(b) < 2 or b[0] != 0:
            raise ValueError("layer_bounds must start at 0 and define at least one group")
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("layer_bounds must be strictly increasing")
        if not 1 <= self.key_unit <= self.n_units:
            raise ValueError("key_unit must be in [1, n_units]")

    @property
    def n_coarse(self) -> int:
        return self.layer_bounds[1]

    @property
    def n_layers(self) -> int:
        return self.layer_bounds[-1]

    @property
    def n_fine_groups(self) -> int:
        return len(self.layer_bounds) - 2

    def group_layers(self, group: int, level: int | None = None) -> range:
        """1-based layer range of a group, truncated at ``level`` if given."""
        lo = self.layer_bounds[group] + 1
        hi = self.layer_bounds[group + 1]
        if level is not None:
            hi = min(hi, level)
        return range(lo, hi + 1)


def default_layer_bounds(n_layers: int, n_coarse: int, n_fine_groups: int) -> tuple:
    """Split fine layers into near-equal contiguous groups.

    Earlier groups take the extra layer when the split is uneven, so the
    perceptually more important low layers sit in smaller groups no larger
    than later ones.
    """
    if not 1 <= n_coarse < n_layers:
        raise ValueError("need 1 <= n_coarse < n_layers")
    n_fine = n_layers - n_coarse
    n_fine_groups = min(n_fine_groups, n_fine)
    if n_fine_groups < 1:
        raise ValueError("need at least one fine group")
    base, extra = divmod(n_fine, n_fine_groups)
    bounds = [0, n_coarse]
    for j in range(n_fine_groups):
        bounds.append(bounds[-1] + base + (1 if j < extra else 0))
    return tuple(bounds)


@dataclass(frozen=True)
class StreamConfig:
    """Streaming cadence: stride, lookahead, and context lengths in frames."""

    stride: int = 3
    lookahead: int = 3
    coding_context: int = 12
    conceal_context: int = 12

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.lookahead < 0:
            raise ValueError("lookahead must be non-negative")
        if self.coding_context < self.stride:
            raise ValueError("coding_context must be at least the stride")
        # the release-time window ends at the lookahead horizon and must
        # still reach back over every frame being released
        if self.conceal_context < self.stride + self.lookahead:
            raise ValueError(
                "conceal_context must cover stride + lookahead frames")


def periodic_slicing(gos_len: int, n_units: int) -> dict[int, list[int]]:
    """Assign 1-based frames 1..gos_len to units 1..n_units periodically.

    Unit u takes frames {u, u + n_units, u + 2*n_units, ...} up to gos_len.
    """
    if gos_len < 1:
        raise ValueError("gos_len must be at least 1")
    if not 1 <= n_units <= gos_len:
        raise ValueError("n_units must be in [1, gos_len]")
    return {u: list(range(u, gos_len + 1, n_units)) for u in range(1, n_units + 1)}


def streaming_slicing(n_frames: int) -> dict[int, list[int]]:
    """Each frame forms its own unit: unit u holds frame u."""
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    return {u: [u] for u in range(1, n_frames + 1)}


class SliceId(NamedTuple):
    gos: int
    unit: int
    group: int  # 0 is the coarse group


@dataclass
class SliceGrid:
    """Partition of all encoded cells (t, k) into slices.

    ``slices`` is keyed in canonical emission order: per group-of-slices,
    coarse slices first, then the key unit's fine slices by layer group,
    then the remaining fine slices. ``cells`` arrays are (n, 2) int32 of
    0-based (frame, layer), sorted by frame then layer.
    """

    n_frames: int
    n_layers: int
    level: int
    gos: GosConfig
    mode: str
    slices: dict[SliceId, np.ndarray] = field(default_factory=dict)

    def slice_of(self, t: int, k: int) -> SliceId | None:
        return self._cell_index.get((t, k))

    @property
    def _cell_index(self) -> dict:
        if not hasattr(self, "_cell_index_cache"):
            idx = {}
            for sid, cells in self.slices.items():
                for t, k in cells:
                    idx[(int(t), int(k))] = sid
            self._cell_index_cache = idx
        return self._cell_index_cache

    def gos_ids(self) -> list[int]:
        return sorted({sid.gos for sid in self.slices})

    def gos_frames(self, gos_id: int) -> range:
        start = gos_id * self.gos.gos_len
        return range(start, min(start + self.gos.gos_len, self.n_frames))

    def coarse_slices(self, gos_id: int | None = None) -> list[SliceId]:
        return [s for s in self.slices
                if s.group == 0 and (gos_id is None or s.gos == gos_id)]

    def fine_slices(self, gos_id: int | None = None) -> list[SliceId]:
        return [s for s in self.slices
                if s.group > 0 and (gos_id is None or s.gos == gos_id)]

    def is_key(self, sid: SliceId) -> bool:
        if self.mode != "periodic":
            return False
        return sid.group > 0 and sid.unit == self.gos.key_unit

    def validate_partition(self) -> None:
        """Every cell below the encode level belongs to exactly one slice."""
        seen = np.zeros((self.n_frames, self.n_layers), dtype=np.int32)
        for sid, cells in self.slices.items():
            if cells.shape[0] == 0:
                raise ValueError(f"empty slice {sid} should have been dropped")
            for t, k in cells:
                if k >= self.level:
                    raise ValueError(f"cell ({t},{k}) above encode level in {sid}")
                if (k < self.gos.n_coarse) != (sid.group == 0):
                    raise ValueError(f"coarse/fine mix in slice {sid}")
                seen[t, k] += 1
        expect = np.zeros_like(seen)
        expect[:, : self.level] = 1
        if not np.array_equal(seen, expect):
            raise ValueError("slices do not partition the encoded cells")


def build_slice_grid(n_frames: int, gos: GosConfig, level: int,
                     mode: str = "periodic") -> SliceGrid:
    """Partition cells (t, k < level) of a T-frame grid into slices.

    Layer groups above ``level`` are dropped; the group containing ``level``
    is truncated. Frames past the last full group form a shorter final group.
    """
    if mode not in ("periodic", "streaming"):
        raise ValueError(f"unknown slicing mode: {mode}")
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if level < gos.n_coarse:
        raise ValueError(f"encode level {level} is below the coarse depth {gos.n_coarse}")
    if level > gos.n_layers:
        raise ValueError(f"encode level {level} exceeds the layer bounds {gos.layer_bounds}")

    sg = SliceGrid(n_frames, gos.n_layers, level, gos, mode)
    n_groups = len(gos.layer_bounds) - 1

    def add(sid: SliceId, frames: list[int], group: int) -> None:
        layers = gos.group_layers(group, level)
        if len(layers) == 0 or not frames:
            return
        cells = np.array([(t, k - 1) for t in frames for k in layers], dtype=np.int32)
        sg.slices[sid] = cells

    for g in range(0, -(-n_frames // gos.gos_len)):
        start = g * gos.gos_len
        span = min(gos.gos_len, n_frames - start)
        if mode == "periodic":
            units = periodic_slicing(gos.gos_len, gos.n_units)
            frames_of = {u: [start + t1 - 1 for t1 in ts if t1 <= span]
                         for u, ts in units.items()}
            order = [gos.key_unit] + [u for u in frames_of if u != gos.key_unit]
            for u in frames_of:
                add(SliceId(g, u, 0), frames_of[u], 0)
            for u in order:
                for j in range(1, n_groups):
                    add(SliceId(g, u, j), frames_of[u], j)
        else:
            for off in range(span):
                add(SliceId(g, off + 1, 0), [start + off], 0)
            for off in range(span):
                for j in range(1, n_groups):
                    add(SliceId(g, off + 1, j), [start + off], j)
    return sg


# Token grid file format: magic "TOKG", then little-endian
# u32 n_frames, u16 n_layers, u16 vocab, n_frames u8 levels,
# n_frames*n_layers u16 tokens row-major.

_TOKG_MAGIC = b"TOKG"


def save_token_grid(path: str | Path, grid: TokenGrid) -> None:
    if grid.vocab > 65536 or grid.n_layers > 255:
        raise ValueError("grid does not fit the file format")
    out = bytearray(_TOKG_MAGIC)
    out += struct.pack("<IHH", grid.n_frames, grid.n_layers, grid.vocab % 65536)
    out += grid.level.astype(np.uint8).tobytes()
    tokens = grid.tokens.copy()
    dead = np.arange(grid.n_layers)[None, :] >= grid.level[:, None]
    tokens[dead] = 0
    out += tokens.astype("<u2").tobytes()
    Path(path).write_bytes(bytes(out))


def load_token_grid(path: str | Path) -> TokenGrid:
    data = Path(path).read_bytes()
    if data[:4] != _TOKG_MAGIC:
        raise ValueError("not a token grid file")
    n_frames, n_layers, vocab_raw = struct.unpack_from("<IHH", data, 4)
    vocab = vocab_raw if vocab_raw != 0 else 65536
    off = 4 + 8
    level = np.frombuffer(data, dtype=np.uint8, count=n_frames, offset=off)
    off += n_frames
    count = n_frames * n_layers
    tokens = np.frombuffer(data, dtype="<u2", count=count, offset=off)
    if len(data) != off + 2 * count:
        raise ValueError("token grid file has trailing or missing bytes")
    return TokenGrid(tokens.reshape(n_frames, n_layers).astype(np.int32),
                     level.astype(np.int16), vocab)
