"""Coding dependency, visibility, damage windows, loss classification."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenwire.dependency import (
    ConcealmentWindow,
    LossCase,
    build_coding_dependency,
    build_conceal_mask,
    build_windows,
    classify_loss,
    coding_visibility,
    stream_geometry,
)
from tokenwire.grid import (
    GosConfig,
    SliceId,
    StreamConfig,
    TokenState,
    build_slice_grid,
)

R = int(TokenState.RECEIVED)
L = int(TokenState.LOST)
I = int(TokenState.INVALID)
C = int(TokenState.CONCEALED)


def small_layout(level=3, n_frames=6):
    gos = GosConfig(6, 3, (0, 1, 2, 3), key_unit=1)
    sg = build_slice_grid(n_frames, gos, level)
    return sg, build_coding_dependency(sg)


def test_window_validation():
    with pytest.raises(ValueError):
        ConcealmentWindow(3, 3)
    with pytest.raises(ValueError):
        ConcealmentWindow(-1, 2)
    w = ConcealmentWindow(2, 5)
    assert len(w) == 3 and w.contains(4) and not w.contains(5)


def test_stream_geometry_hand_cases():
    cfg = StreamConfig(stride=3, lookahead=3, coding_context=12)
    assert stream_geometry(0, cfg, 20) == (0, 3)
    assert stream_geometry(7, cfg, 20) == (0, 10)
    # Step of frame 13 ends at 14, horizon 17, context reaches back to 6.
    assert stream_geometry(13, cfg, 20) == (6, 16)
    # Horizon and lookahead clamp at the last frame.
    assert stream_geometry(9, cfg, 10) == (0, 9)


def test_periodic_dependency_structure():
    sg, phi = small_layout()
    coarse = {SliceId(0, u, 0) for u in (1, 2, 3)}
    for sid in coarse:
        assert phi[sid] == []
    # Key-unit fine slices condition on exactly the coarse slices.
    assert set(phi[SliceId(0, 1, 1)]) == coarse
    assert set(phi[SliceId(0, 1, 2)]) == coarse
    # Non-key fine adds key groups up to its own group.
    assert set(phi[SliceId(0, 2, 1)]) == coarse | {SliceId(0, 1, 1)}
    assert set(phi[SliceId(0, 3, 2)]) == \
        coarse | {SliceId(0, 1, 1), SliceId(0, 1, 2)}


def gos_strategy():
    return st.builds(
        lambda gos_len, units, steps, key: GosConfig(
            gos_len, min(units, gos_len),
            tuple(np.cumsum([0] + steps).tolist()),
            1 + key % min(units, gos_len)),
        st.integers(1, 8), st.integers(1, 4),
        st.lists(st.integers(1, 2), min_size=1, max_size=4),
        st.integers(0, 3))


def stream_emission_order(sg, cfg):
    """Slice order as the streaming sender actually emits: per step, the
    newly reachable coarse frames first, then the due frames' fine slices."""
    frame_of = {sid: sid.gos * sg.gos.gos_len + sid.unit - 1
                for sid in sg.slices}
    by_frame_coarse = {frame_of[s]: s for s in sg.slices if s.group == 0}
    fine_by_frame = {}
    for s in sg.slices:
        if s.group > 0:
            fine_by_frame.setdefault(frame_of[s], []).append(s)
    T = sg.n_frames
    order = []
    prev_horizon = -1
    for i in range(-(-T // cfg.stride)):
        horizon = min((i + 1) * cfg.stride - 1 + cfg.lookahead, T - 1)
        for f in range(prev_horizon + 1, horizon + 1):
            if f in by_frame_coarse:
                order.append(by_frame_coarse[f])
        for f in range(i * cfg.stride, min((i + 1) * cfg.stride, T)):
            order.extend(sorted(fine_by_frame.get(f, []),
                                key=lambda s: s.group))
        prev_horizon = horizon
    return order


@given(gos_strategy(), st.integers(1, 20), st.data())
@settings(max_examples=60, deadline=None)
def test_dependency_is_topological(gos, n_frames, data):
    """Every condition precedes its dependent in emission order, which also
    proves the relation is acyclic and never self-referential."""
    level = data.draw(st.integers(gos.n_coarse, gos.n_layers))
    mode = data.draw(st.sampled_from(["periodic", "streaming"]))
    stream = StreamConfig(stride=2, lookahead=1, coding_context=6,
                          conceal_context=6) if mode == "streaming" else None
    sg = build_slice_grid(n_frames, gos, level, mode)
    phi = build_coding_dependency(sg, stream)
    ordered = list(sg.slices) if mode == "periodic" \
        else stream_emission_order(sg, stream)
    pos = {sid: i for i, sid in enumerate(ordered)}
    assert set(phi) == set(sg.slices)
    assert len(ordered) == len(sg.slices)
    for sid, conds in phi.items():
        for cond in conds:
            assert pos[cond] < pos[sid]
            assert cond != sid


def test_streaming_dependency_window():
    gos = GosConfig(6, 1, (0, 1, 2))
    sg = build_slice_grid(12, gos, 2, mode="streaming")
    stream = StreamConfig(stride=2, lookahead=1, coding_context=4,
                          conceal_context=4)
    phi = build_coding_dependency(sg, stream)
    # Frame 7: step 3, horizon 8, context [5, 8], fine history [5, 7).
    sid = sg.slice_of(7, 1)
    conds = phi[sid]
    coarse = [c for c in conds if c.group == 0]
    fine = [c for c in conds if c.group > 0]
    assert sorted(sg.slices[c][0, 0] for c in coarse) == [5, 6, 7, 8]
    assert sorted(sg.slices[c][0, 0] for c in fine) == [5, 6]


def test_coding_visibility_periodic():
    gos = GosConfig(6, 3, (0, 2, 4, 6), key_unit=1)
    sg = build_slice_grid(12, gos, 5)
    # Key slice: the whole group-of-slices shows its coarse prefix.
    vis, rng = coding_visibility(sg, SliceId(1, 1, 1))
    assert rng == (6, 12)
    np.testing.assert_array_equal(vis[6:12], [2] * 6)
    np.testing.assert_array_equal(vis[:6], [0] * 6)
    # Non-key group 1: key frames (unit 1 -> frames 6 and 9) deepen to 4.
    vis, _ = coding_visibility(sg, SliceId(1, 2, 1))
    np.testing.assert_array_equal(vis[6:12], [4, 2, 2, 4, 2, 2])
    # Non-key group 2: key depth is capped by the encode level 5.
    vis, _ = coding_visibility(sg, SliceId(1, 3, 2))
    np.testing.assert_array_equal(vis[6:12], [5, 2, 2, 5, 2, 2])
    with pytest.raises(ValueError):
        coding_visibility(sg, SliceId(1, 1, 0))


def test_coding_visibility_streaming():
    gos = GosConfig(6, 1, (0, 1, 3))
    sg = build_slice_grid(20, gos, 3, mode="streaming")
    stream = StreamConfig(stride=3, lookahead=2, coding_context=6,
                          conceal_context=6)
    sid = sg.slice_of(4, 1)
    vis, rng = coding_visibility(sg, sid, stream)
    # Step 1 ends at frame 5, horizon 7, window [2, 7]; frame 4 is the
    # target so frames 2-3 show full depth and 4-6 only coarse.
    assert rng == (2, 7)
    np.testing.assert_array_equal(vis[2:7], [3, 3, 1, 1, 1])
    assert vis[:2].sum() == 0 and vis[7:].sum() == 0


def test_propagate_invalid():
    from tokenwire.dependency import propagate_invalid
    states = np.array([[R, L, R, R], [R, R, R, R], [L, R, C, R]], dtype=np.int8)
    propagate_invalid(states, np.array([4, 4, 3]))
    np.testing.assert_array_equal(states[0], [R, L, I, I])
    np.testing.assert_array_equal(states[1], [R, R, R, R])
    # Level 3: the last layer is beyond the frame's depth and left alone.
    np.testing.assert_array_equal(states[2], [L, I, I, R])


def window_spans(windows):
    return [(w.start, w.stop) for w in windows]


def test_build_windows_hand_cases():
    lvl = np.full(20, 2)
    states = np.full((20, 2), R, dtype=np.int8)
    assert build_windows(states, lvl, 5) == []

    states[5, 1] = L
    assert window_spans(build_windows(states, lvl, 5)) == [(3, 8)]

    # Two nearby single-frame runs with a tight cap stay centered.
    states = np.full((6, 2), R, dtype=np.int8)
    states[1, 0] = L
    states[4, 1] = L
    assert window_spans(build_windows(states, np.full(6, 2), 3)) == \
        [(0, 3), (3, 6)]


def test_build_windows_chunks_long_runs():
    states = np.full((30, 1), L, dtype=np.int8)
    lvl = np.ones(30)
    assert window_spans(build_windows(states, lvl, 12)) == \
        [(0, 12), (12, 24), (24, 30)]
    with pytest.raises(ValueError):
        build_windows(states, lvl, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 8))
@settings(max_examples=80, deadline=None)
def test_build_windows_properties(seed, n_frames, max_len):
    rng = np.random.default_rng(seed)
    states = rng.choice([R, L], size=(n_frames, 2), p=[0.7, 0.3]).astype(np.int8)
    lvl = np.full(n_frames, 2)
    windows = build_windows(states, lvl, max_len)
    damaged = {t for t in range(n_frames) if (states[t] != R).any()}
    covered = set()
    prev_stop = 0
    for w in windows:
        assert len(w) <= max_len
        assert w.start >= prev_stop  # disjoint and ordered
        prev_stop = w.stop
        span = set(range(w.start, w.stop))
        assert span & damaged  # no window without damage
        covered |= span
    assert damaged <= covered


def fresh_states(sg):
    states = np.full((sg.n_frames, sg.n_layers), R, dtype=np.int8)
    states[:, sg.level:] = I
    return states


def test_classify_lost_coarse():
    sg, phi = small_layout()
    states = fresh_states(sg)
    states[2, 0] = L
    states[2, 1:3] = I
    targets = classify_loss(states, ConcealmentWindow(0, 6), sg, phi)
    assert targets == [(2, 0, LossCase.COARSE)]


def test_classify_lost_fine_non_key():
    sg, phi = small_layout()
    states = fresh_states(sg)
    # Non-key unit 2 group 1 lost: frames 1 and 4, layer 1.
    for t in (1, 4):
        states[t, 1] = L
        states[t, 2] = I
    targets = classify_loss(states, ConcealmentWindow(0, 6), sg, phi)
    assert targets == [(1, 1, LossCase.FINE), (4, 1, LossCase.FINE)]


def test_classify_lost_key_slice():
    sg, phi = small_layout()
    states = fresh_states(sg)
    # Key unit 1 group 1 lost (frames 0 and 3); every dependent fine slice
    # becomes undecodable.
    for t in (0, 3):
        states[t, 1] = L
        states[t, 2] = I
    for t in (1, 2, 4, 5):
        states[t, 1] = I
        states[t, 2] = I
    targets = classify_loss(states, ConcealmentWindow(0, 6), sg, phi)
    want = [(t, k, LossCase.KEY_CONTEXT) for t in (1, 2, 4, 5) for k in (1, 2)]
    assert sorted(targets) == sorted(want)
    # The lost key cells themselves never become targets.
    assert not [tg for tg in targets if tg[0] in (0, 3)]


def test_classify_coarse_lost_outside_window():
    sg, phi = small_layout()
    states = fresh_states(sg)
    # Unit 1 coarse lost -> frames 0 and 3; all fine in the GoS undecodable.
    for t in (0, 3):
        states[t, 0] = L
        states[t, 1:3] = I
    for t in (1, 2, 4, 5):
        states[t, 1:3] = I
    # A window that excludes the lost coarse frames conceals fine layers
    # from local context.
    targets = classify_loss(states, ConcealmentWindow(1, 3), sg, phi)
    want = [(t, k, LossCase.COARSE_CONTEXT) for t in (1, 2) for k in (1, 2)]
    assert sorted(targets) == sorted(want)
    # A window that contains a lost coarse frame defers those fine cells.
    targets = classify_loss(states, ConcealmentWindow(0, 3), sg, phi)
    assert targets == [(0, 0, LossCase.COARSE)]


def test_classify_respects_conceal_fine_layers():
    sg, phi = small_layout()
    states = fresh_states(sg)
    for t in (0, 3):
        states[t, 1] = L
        states[t, 2] = I
    for t in (1, 2, 4, 5):
        states[t, 1:3] = I
    targets = classify_loss(states, ConcealmentWindow(0, 6), sg, phi,
                            conceal_fine_layers=1)
    # Cap 1 fine layer: only layer 1 is concealed, layer 2 stays invalid.
    assert {k for _, k, _ in targets} == {1}


def test_conceal_mask_shapes_and_errors():
    sg, _ = small_layout()
    states = fresh_states(sg)
    states[2, 1] = L
    states[2, 2] = I
    win = ConcealmentWindow(0, 6)
    targets = [(2, 1, LossCase.FINE)]
    visible, frame_range = build_conceal_mask(targets, states, win, np.full(6, sg.level))
    assert frame_range == (0, 6)
    np.testing.assert_array_equal(visible, [2, 2, 1, 2, 2, 2])
    with pytest.raises(ValueError):
        build_conceal_mask([], states, win, np.full(6, sg.level))
    with pytest.raises(ValueError):
        build_conceal_mask([(9, 1, LossCase.FINE)], states, win,
                           np.full(6, sg.level))


def test_conceal_mask_excludes_concealed_cells():
    sg, _ = small_layout()
    states = fresh_states(sg)
    states[1, 1] = C  # previously concealed: usable output, not context
    states[2, 1] = L
    states[2, 2] = I
    visible, _ = build_conceal_mask([(2, 1, LossCase.FINE)], states,
                                    ConcealmentWindow(0, 6),
                                    np.full(6, sg.level))
    assert visible[1] == 1


def test_conceal_mask_level_cap():
    sg, _ = small_layout(level=2)
    states = fresh_states(sg)
    states[2, 1] = L
    visible, _ = build_conceal_mask([(2, 1, LossCase.FINE)], states,
                                    ConcealmentWindow(0, 6),
                                    np.full(6, sg.level))
    np.testing.assert_array_equal(visible, [2, 2, 1, 2, 2, 2])
