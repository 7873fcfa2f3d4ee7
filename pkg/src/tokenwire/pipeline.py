"""Batch sender and receiver paths over a lossy packet transport.

The sender turns a token grid into packets: coarse slices bit-packed with
chained repair copies, fine slices entropy-coded against model PMFs built
from already-sent context. The receiver mirrors that in dependency order,
marks what it could not decode, then conceals inside bounded windows with
a single model prediction per window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import CodecConfig, synthesize
from .context import MaskedQuery
from .dependency import (ConcealmentWindow, LossCase, build_coding_dependency,
                         build_conceal_mask, build_windows, classify_loss,
                         coding_visibility, propagate_invalid)
from .errors import DecodeError
from .grid import (GosConfig, SliceGrid, SliceId, StreamConfig, TokenGrid,
                   TokenState, TokenStateGrid, build_slice_grid)
from .rangecoder import CodedSlice, decode_symbols, encode_symbols
from .rvq import RvqCodec, dequantize, quantize
from .transport import HEADER_BYTES, Packet, pack_bits, token_bits, unpack_bits

_R = int(TokenState.RECEIVED)
_C = int(TokenState.CONCEALED)
_I = int(TokenState.INVALID)


@dataclass
class SenderReport:
    """Bit accounting for one batch send."""

    n_packets: int = 0
    n_coarse_packets: int = 0
    n_fine_packets: int = 0
    header_bits: int = 0
    coarse_bits: int = 0
    fec_bits: int = 0
    fine_bits: int = 0
    ideal_fine_bits: float = 0.0
    n_coarse_tokens: int = 0
    n_fine_tokens: int = 0
    per_layer_ideal_bits: dict = field(default_factory=dict)
    fallback_counts: dict = field(default_factory=dict)

    @property
    def total_bits(self) -> int:
        return self.header_bits + self.coarse_bits + self.fec_bits + self.fine_bits

    @property
    def fine_bits_per_token(self) -> float | None:
        if self.n_fine_tokens == 0:
            return None
        return self.fine_bits / self.n_fine_tokens


@dataclass
class ReceiverReport:
    """What the receiver saw and how it classified the damage."""

    n_frames: int
    level: int
    n_packets_seen: int
    fec_recovered: int
    state_counts: dict
    case_counts: dict
    n_windows: int
    n_blackouts: int
    valid_depth: np.ndarray


def _packet_extent(cells: np.ndarray) -> tuple:
    frames = np.unique(cells[:, 0])
    return int(frames[0]), int(frames.size)


def send_tokens(grid: TokenGrid, sg: SliceGrid, model, fec: bool = True,
                stream: StreamConfig | None = None) -> tuple:
    """Encode a uniformly quantized grid into packets.

    Packets come out in dependency order: within each group-of-slices the
    coarse slices, then the key unit's fine slices, then the rest. Every
    coarse packet after the first carries a packed copy of its predecessor
    when ``fec`` is on.
    """
    if grid.n_frames != sg.n_frames or grid.n_layers != sg.n_layers:
        raise ValueError("grid shape does not match the slice layout")
    if np.any(grid.level != sg.level):
        raise ValueError("grid must be uniformly encoded at the layout level")
    if model.vocab != grid.vocab:
        raise ValueError("model and grid vocabularies differ")

    width = token_bits(grid.vocab)
    packets = []
    rep = SenderReport()
    prev_coarse: bytes | None = None
    for sid in sg.slices:
        cells = sg.slices[sid]
        first_frame, n_frames = _packet_extent(cells)
        if sid.group == 0:
            vals = grid.tokens[cells[:, 0], cells[:, 1]]
            payload = pack_bits(vals, width)
            fec_field = prev_coarse if (fec and prev_coarse is not None) else b""
            prev_coarse = payload
            rep.n_coarse_packets += 1
            rep.coarse_bits += len(payload) * 8
            rep.fec_bits += len(fec_field) * 8
            rep.n_coarse_tokens += len(vals)
        else:
            visible, frange = coding_visibility(sg, sid, stream)
            query = MaskedQuery(grid.tokens, visible, cells,
                                frame_range=frange)
            pmfs, fallbacks = model.pmf(query)
            symbols = grid.tokens[cells[:, 0], cells[:, 1]]
            coded = encode_symbols(symbols.tolist(), pmfs)
            payload, fec_field = coded.payload, b""
            rep.n_fine_packets += 1
            rep.fine_bits += len(payload) * 8
            rep.n_fine_tokens += len(symbols)
            for (t, k), pmf, sym in zip(cells, pmfs, symbols):
                b = pmf.bits(int(sym))
                rep.ideal_fine_bits += b
                layer = int(k)
                rep.per_layer_ideal_bits[layer] = (
                    rep.per_layer_ideal_bits.get(layer, 0.0) + b)
            for fb in fallbacks:
                rep.fallback_counts[fb] = rep.fallback_counts.get(fb, 0) + 1
        packets.append(Packet(sid.gos, sid.unit, sid.group,
                              first_frame, n_frames, payload, fec_field))
    rep.n_packets = len(packets)
    rep.header_bits = rep.n_packets * HEADER_BYTES * 8
    return packets, rep


def _recover_coarse(by_sid: dict, sg: SliceGrid, tokens: np.ndarray,
                    states: np.ndarray, vocab: int) -> int:
    """Place delivered coarse tokens, then repair holes from successor
    packets. Returns how many slices the repair copies saved."""
    width = token_bits(vocab)
    coarse = [sid for sid in sg.slices if sid.group == 0]
    recovered = 0
    for i, sid in enumerate(coarse):
        cells = sg.slices[sid]
        payload = None
        if sid in by_sid:
            payload = by_sid[sid].payload
        else:
            nxt = coarse[i + 1] if i + 1 < len(coarse) else None
            if nxt is not None and nxt in by_sid and by_sid[nxt].fec:
                payload = by_sid[nxt].fec
                recovered += 1
        if payload is None:
            continue
        vals = unpack_bits(payload, width, len(cells))
        if vals.size and int(vals.max()) >= vocab:
            raise DecodeError("coarse token outside vocabulary")
        tokens[cells[:, 0], cells[:, 1]] = vals
        states[cells[:, 0], cells[:, 1]] = _R
    return recovered


def _valid_depth(states: np.ndarray, level: np.ndarray) -> np.ndarray:
    """Longest usable prefix per frame: received or concealed cells."""
    T = states.shape[0]
    out = np.zeros(T, dtype=np.int16)
    for t in range(T):
        d = 0
        lvl = int(level[t])
        while d < lvl and states[t, d] in (_R, _C):
            d += 1
        out[t] = d
    return out


def _conceal_window(tokens: np.ndarray, states: np.ndarray,
                    win: ConcealmentWindow, sg: SliceGrid, phi: dict,
                    model, conceal_fine_layers: int, level: np.ndarray,
                    case_counts: dict) -> int:
    """Conceal one window in place. Returns 1 on a coarse blackout."""
    coarse_hi = min(sg.gos.n_coarse, sg.level)
    if not np.any(states[win.start:win.stop, :coarse_hi] == _R):
        # nothing to condition on: hold the last fully usable frame
        src = None
        for t in range(win.start - 1, -1, -1):
            col = states[t, : int(level[t])]
            if col.size and np.all((col == _R) | (col == _C)):
                src = t
                break
        for t in range(win.start, win.stop):
            for k in range(int(level[t])):
                if states[t, k] != _R:
                    tokens[t, k] = tokens[src, k] if src is not None else 0
                    states[t, k] = _C
        return 1
    targets = classify_loss(states, win, sg, phi, conceal_fine_layers)
    if targets:
        visible, frange = build_conceal_mask(targets, states, win, level)
        cells = np.array([(t, k) for t, k, _ in targets], dtype=np.int64)
        query = MaskedQuery(tokens, visible, cells, frame_range=frange)
        preds = model.predict(query)
        for (t, k, case), z in zip(targets, preds):
            tokens[t, k] = int(z)
            states[t, k] = _C
            case_counts[int(case)] = case_counts.get(int(case), 0) + 1
    return 0


def receive_tokens(packets, sg: SliceGrid, model,
                   stream: StreamConfig | None = None,
                   conceal_window: int = 12,
                   conceal_fine_layers: int = 2) -> tuple:
    """Decode surviving packets back into a (grid, states, report) triple.

    Fine slices decode only once everything they were coded against is
    bit-exact at the receiver; anything else is marked lost or invalid and
    handed to windowed concealment. The returned grid's level is the
    per-frame usable depth (received or concealed prefix).
    """
    vocab = model.vocab
    T, K = sg.n_frames, sg.n_layers
    level = np.full(T, sg.level, dtype=np.int16)
    tokens = np.zeros((T, K), dtype=np.int32)
    states = TokenStateGrid.initial(level, K).states

    by_sid: dict = {}
    for p in packets:
        sid = SliceId(p.gos_id, p.unit, p.group)
        if sid not in sg.slices:
            raise DecodeError(f"packet {tuple(sid)} does not match the layout")
        if sid in by_sid:
            raise DecodeError(f"duplicate packet for slice {tuple(sid)}")
        first_frame, n_frames = _packet_extent(sg.slices[sid])
        if p.first_frame != first_frame or p.n_frames != n_frames:
            raise DecodeError(f"packet extent disagrees with layout "
                              f"for slice {tuple(sid)}")
        by_sid[sid] = p

    fec_recovered = _recover_coarse(by_sid, sg, tokens, states, vocab)

    phi = build_coding_dependency(sg, stream)
    decoded: set = set()
    for sid in sg.slices:
        if sid.group == 0:
            continue
        cells = sg.slices[sid]
        ok = True
        for cond in phi[sid]:
            if cond.group == 0:
                cc = sg.slices[cond]
                if np.any(states[cc[:, 0], cc[:, 1]] != _R):
                    ok = False
                    break
            elif cond not in decoded:
                ok = False
                break
        if not ok:
            states[cells[:, 0], cells[:, 1]] = _I
            continue
        if sid not in by_sid:
            continue  # stays LOST
        visible, frange = coding_visibility(sg, sid, stream)
        query = MaskedQuery(tokens, visible, cells, frame_range=frange)
        pmfs, _ = model.pmf(query)
        try:
            syms = decode_symbols(CodedSlice(by_sid[sid].payload, len(cells)),
                                  pmfs)
        except DecodeError:
            continue  # mangled payload: the slice stays LOST, like a drop
        tokens[cells[:, 0], cells[:, 1]] = syms
        states[cells[:, 0], cells[:, 1]] = _R
        decoded.add(sid)

    propagate_invalid(states, level)

    windows = build_windows(states, level, conceal_window)
    case_counts: dict = {}
    n_blackouts = 0
    for win in windows:
        n_blackouts += _conceal_window(tokens, states, win, sg, phi, model,
                                       conceal_fine_layers, level, case_counts)

    depth = _valid_depth(states, level)
    grid = TokenGrid(tokens, depth, vocab)
    names = {_R: "received", int(TokenState.LOST): "lost",
             _I: "invalid", _C: "concealed"}
    encoded = states[:, :sg.level]
    state_counts = {name: int(np.count_nonzero(encoded == code))
                    for code, name in names.items()}
    report = ReceiverReport(
        n_frames=T, level=sg.level, n_packets_seen=len(packets),
        fec_recovered=fec_recovered, state_counts=state_counts,
        case_counts=case_counts, n_windows=len(windows),
        n_blackouts=n_blackouts, valid_depth=depth.copy(),
    )
    return grid, states, report


def send(features: np.ndarray, codec: RvqCodec, model, gos: GosConfig,
         level: int | None = None, fec: bool = True) -> tuple:
    """Feature-level convenience: quantize, lay out slices, send.

    Returns (packets, SenderReport). The receiver rebuilds the layout from
    (n_frames, gos, level), normally recorded in a manifest.
    """
    level = codec.n_layers if level is None else level
    grid = quantize(features, codec, level)
    sg = build_slice_grid(grid.n_frames, gos, level)
    return send_tokens(grid, sg, model, fec=fec)


def receive(packets, trace, codec: RvqCodec, codec_cfg: CodecConfig, model,
            gos: GosConfig, level: int, n_frames: int,
            sample_rate: int = 16000, conceal_window: int = 12,
            conceal_fine_layers: int = 2) -> tuple:
    """Audio-level convenience: filter by the delivery trace, decode,
    conceal, dequantize the usable prefixes, synthesize.

    Returns (AudioSignal, TokenGrid, ReceiverReport).
    """
    packets = list(packets)
    if len(trace) != len(packets):
        raise ValueError("trace length must equal the packet count")
    survivors = [p for p, d in zip(packets, trace) if d]
    sg = build_slice_grid(n_frames, gos, level)
    grid, states, report = receive_tokens(
        survivors, sg, model, conceal_window=conceal_window,
        conceal_fine_layers=conceal_fine_layers)
    feats = dequantize(grid, codec, grid.level)
    audio = synthesize(feats, codec_cfg, sample_rate)
    return audio, grid, report
