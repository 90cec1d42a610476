import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings, strategies as st

from twf.buffer import (
    ReservoirBuffer,
    ReplayItem,
    collate,
    make_item,
    mix_pretrain_rehearsal,
    reservoir_add,
    rescale_mask,
    rle_decode,
    rle_encode,
    sample_batch,
)

from .oracles import reservoir_retention


def _item(i, masks=(), task=0, source="stream"):
    return make_item(torch.full((1, 2, 2), float(i)), i % 10, torch.zeros(3), task, masks, source)


class TestReservoir:
    def test_fill_phase_accepts_all(self):
        buf, rng = ReservoirBuffer(10), np.random.default_rng(0)
        assert all(reservoir_add(buf, _item(i), rng) for i in range(10))
        assert len(buf) == 10 and buf.seen_count == 10

    def test_capacity_zero_never_accepts(self):
        buf, rng = ReservoirBuffer(0), np.random.default_rng(0)
        assert not any(buf.add(_item(i), rng) for i in range(20))
        assert len(buf) == 0 and buf.seen_count == 20

    def test_size_invariant(self):
        buf, rng = ReservoirBuffer(7), np.random.default_rng(1)
        for i in range(30):
            buf.add(_item(i), rng)
            assert len(buf) == min(buf.seen_count, 7)

    def test_retention_law(self):
        capacity, stream, trials = 10, 100, 10_000
        counts = np.zeros(stream)
        rng = np.random.default_rng(2024)
        for _ in range(trials):
            buf = ReservoirBuffer(capacity)
            for i in range(stream):
                buf.add(_Lite(i), rng)
            for it in buf.items:
                counts[it.y] += 1
        freq = counts / trials
        assert np.all(np.abs(freq - capacity / stream) <= 0.01)

    def test_oracle_agrees_with_law(self):
        freq = reservoir_retention(5, 40, 4000, seed=1)
        assert np.all(np.abs(freq - 5 / 40) <= 0.03)


class _Lite:
    """Cheap stand-in item for Monte Carlo runs."""

    __slots__ = ("y",)

    def __init__(self, y):
        self.y = y


class TestSample:
    def test_single_item_repeats(self):
        buf, rng = ReservoirBuffer(5), np.random.default_rng(0)
        buf.add(_item(3), rng)
        batch = sample_batch(buf, 4, rng)
        assert len(batch) == 4 and all(it.y == 3 for it in batch)

    def test_empty_buffer(self):
        assert sample_batch(ReservoirBuffer(5), 4, np.random.default_rng(0)) == []

    def test_uniform_with_replacement(self):
        buf, rng = ReservoirBuffer(5), np.random.default_rng(0)
        for i in range(5):
            buf.add(_item(i), rng)
        ys = [it.y for it in buf.sample(10_000, rng)]
        freq = np.bincount(ys, minlength=5) / 10_000
        npt.assert_allclose(freq, 0.2, atol=0.02)

    def test_masks_restored_to_tap_resolution(self):
        rng = np.random.default_rng(0)
        m32 = torch.zeros(2, 32, 32)
        m32[:, :16] = 1
        buf = ReservoirBuffer(2)
        buf.add(_item(0, [m32, torch.ones(4, 8, 8)]), rng)
        assert buf.items[0].stored_resolutions == [(16, 16), (8, 8)]
        (it,) = buf.sample(1, rng)
        assert it.masks[0].shape == (2, 32, 32) and torch.equal(it.masks[0], m32.to(torch.uint8))
        x, y, logits, task, masks = collate([it, it])
        assert masks[0].dtype == torch.float32 and masks[0].shape == (2, 2, 32, 32)

    def test_logits_not_refreshed(self):
        rng = np.random.default_rng(0)
        logits = torch.tensor([1.0, 2.0])
        buf = ReservoirBuffer(1)
        buf.add(make_item(torch.zeros(1), 0, logits, 0), rng)
        logits += 5
        assert torch.equal(buf.items[0].logits, torch.tensor([1.0, 2.0]))


class TestRescale:
    def test_down_32_to_16(self):
        assert rescale_mask(torch.ones(3, 32, 32, dtype=torch.uint8), "down").shape == (3, 16, 16)

    def test_small_untouched(self):
        m = torch.randint(0, 2, (3, 8, 8), dtype=torch.uint8)
        assert rescale_mask(m, "down") is m

    def test_odd_pad_then_crop(self):
        m = torch.randint(0, 2, (1, 17, 17), dtype=torch.uint8)
        down = rescale_mask(m, "down")
        assert down.shape == (1, 9, 9)
        assert rescale_mask(down, "up", (17, 17)).shape == (1, 17, 17)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            rescale_mask(torch.full((1, 32, 32), 2, dtype=torch.uint8), "down")

    def test_up_needs_size(self):
        with pytest.raises(ValueError):
            rescale_mask(torch.zeros(1, 16, 16, dtype=torch.uint8), "up")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(9, 20), st.integers(9, 20), st.integers(0, 10_000))
    def test_block_constant_round_trip(self, bh, bw, seed):
        g = torch.Generator().manual_seed(seed)
        blocks = torch.randint(0, 2, (2, bh, bw), generator=g, dtype=torch.uint8)
        m = blocks.repeat_interleave(2, -2).repeat_interleave(2, -1)
        back = rescale_mask(rescale_mask(m, "down"), "up", m.shape[-2:])
        assert torch.equal(back, m)
        assert set(back.unique().tolist()) <= {0, 1}


class TestRLE:
    def test_definition(self):
        assert rle_encode([1, 1, 1, 0, 0, 1]) == [(1, 3), (0, 2), (1, 1)]

    def test_all_zero(self):
        assert rle_encode(np.zeros(64, dtype=np.uint8)) == [(0, 64)]

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            rle_encode([0, 2, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 1), max_size=300))
    def test_round_trip_and_alternation(self, seq):
        runs = rle_encode(seq)
        npt.assert_array_equal(rle_decode(runs), np.asarray(seq, dtype=np.uint8))
        assert all(a[0] != b[0] for a, b in zip(runs, runs[1:]))


class TestMaskPipeline:
    def test_thousand_masks_survive_storage(self):
        rng = np.random.default_rng(0)
        g = torch.Generator().manual_seed(0)
        for k in range(1000):
            h, w = (int(v) for v in rng.integers(4, 19, size=2))
            blocks = torch.randint(0, 2, (2, h, w), generator=g, dtype=torch.uint8)
            m = blocks.repeat_interleave(2, -2).repeat_interleave(2, -1)
            stored = rescale_mask(m, "down")
            assert set(stored.unique().tolist()) <= {0, 1}
            decoded = torch.from_numpy(rle_decode(rle_encode(stored.numpy())).reshape(stored.shape))
            assert torch.equal(rescale_mask(decoded, "up", m.shape[-2:]), m)


class TestSerialization:
    def test_state_round_trip(self):
        rng = np.random.default_rng(0)
        buf = ReservoirBuffer(4)
        for i in range(9):
            m = (torch.rand(2, 32, 32, generator=torch.Generator().manual_seed(i)) > 0.5).float()
            buf.add(_item(i, [m, torch.ones(3, 4, 4)], task=i // 3), rng)
        state = buf.state_dict()
        assert state["version"] == 1
        back = ReservoirBuffer(1).load_state_dict(state)
        assert back.capacity == 4 and back.seen_count == 9
        for a, b in zip(buf.items, back.items):
            assert a.y == b.y and a.task == b.task and torch.equal(a.x, b.x)
            assert all(torch.equal(p, q) for p, q in zip(a.masks, b.masks))
            assert a.tap_sizes == b.tap_sizes

    def test_version_checked(self):
        with pytest.raises(ValueError):
            ReservoirBuffer(1).load_state_dict({"version": 99})


class TestPretrainRehearsal:
    def test_fraction_zero_is_plain_reservoir(self):
        buf = mix_pretrain_rehearsal(10, 0.0, [_item(0, source="pretrain")])
        assert isinstance(buf, ReservoirBuffer) and len(buf) == 0

    def test_fraction_one_only_pretrain(self):
        rng = np.random.default_rng(0)
        buf = mix_pretrain_rehearsal(8, 1.0, [_item(i, task=-1, source="pretrain") for i in range(20)], rng)
        for i in range(20):
            buf.add(_item(i), rng)
        assert len(buf) == 8 and all(it.source == "pretrain" for it in buf.items)

    def test_half_split(self):
        buf = mix_pretrain_rehearsal(2000, 0.5)
        assert buf.pretrain.capacity == 1000 and buf.stream.capacity == 1000

    @pytest.mark.parametrize("frac", [-0.1, 1.5])
    def test_out_of_range(self, frac):
        with pytest.raises(ValueError):
            mix_pretrain_rehearsal(10, frac)
