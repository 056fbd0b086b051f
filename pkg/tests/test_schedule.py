import pytest
from hypothesis import given
from hypothesis import strategies as st

from sapgan.schedule import (
    FULL_SCALE_BATCH_MAP,
    TrainConfig,
    desk_batch_map,
    n_phases,
    schedule_at,
)

DESK = desk_batch_map()


def at(shown, ipp=1000, n_stages=4):
    return schedule_at(shown, n_stages, ipp, DESK)


class TestBatchMaps:
    def test_reference_map(self):
        assert FULL_SCALE_BATCH_MAP == {4: 256, 8: 256, 16: 128, 32: 64, 64: 32, 128: 16, 256: 8}

    def test_desk_map_divides_with_floor(self):
        assert DESK == {4: 16, 8: 16, 16: 8, 32: 4, 64: 4, 128: 4, 256: 4}

    def test_custom_divisor(self):
        assert desk_batch_map(divisor=4, floor=2)[256] == 2
        with pytest.raises(ValueError):
            desk_batch_map(divisor=0)


class TestTrainConfig:
    def test_default_two_timescale_pair(self):
        cfg = TrainConfig()
        assert cfg.effective_lrs() == (0.001, 0.004)

    def test_ratio_mode(self):
        cfg = TrainConfig(lr_g=1e-3, lr_ratio=5.0)
        assert cfg.effective_lrs() == (0.001, 0.005)

    def test_ratio_overrides_lr_d(self):
        cfg = TrainConfig(lr_g=2e-3, lr_d=99.0, lr_ratio=2.0)
        assert cfg.effective_lrs() == (0.002, 0.004)

    def test_batch_lookup(self):
        cfg = TrainConfig()
        assert cfg.batch_size(16) == 8
        with pytest.raises(ValueError, match="no batch size"):
            cfg.batch_size(512)

    def test_validation(self):
        with pytest.raises(ValueError, match="learning rates"):
            TrainConfig(lr_g=0.0)
        with pytest.raises(ValueError, match="lr_ratio"):
            TrainConfig(lr_ratio=-1.0)
        with pytest.raises(ValueError, match="images_per_phase"):
            TrainConfig(images_per_phase=0)
        with pytest.raises(ValueError, match="d_g_step_ratio"):
            TrainConfig(d_g_step_ratio=0)
        with pytest.raises(ValueError, match="batch size"):
            TrainConfig(batch_by_resolution={4: 0})


class TestSchedule:
    def test_phase_count(self):
        assert n_phases(1) == 1
        assert n_phases(4) == 7

    def test_opening_phase(self):
        s = at(0)
        assert (s.phase, s.phase_kind, s.stage_index, s.alpha) == (0, "stabilize", 0, 1.0)
        assert (s.resolution, s.batch_size) == (4, 16)

    def test_phase_boundary_is_fade_start(self):
        assert at(999).phase == 0
        s = at(1000)
        assert (s.phase, s.phase_kind, s.stage_index, s.alpha) == (1, "fade", 1, 0.0)
        assert s.resolution == 8

    def test_fade_midpoint(self):
        assert at(1500).alpha == 0.5

    def test_stabilize_after_fade(self):
        s = at(2000)
        assert (s.phase_kind, s.stage_index, s.alpha, s.resolution) == ("stabilize", 1, 1.0, 8)

    def test_last_stage_fade(self):
        s = at(5500)
        assert (s.phase, s.stage_index, s.alpha, s.resolution, s.batch_size) == (5, 3, 0.5, 32, 4)

    def test_schedule_exhaustion_clamps(self):
        for shown in (7000, 50_000):
            s = at(shown)
            assert (s.phase, s.phase_kind, s.stage_index, s.alpha) == (6, "stabilize", 3, 1.0)

    def test_single_stage_never_fades(self):
        s = schedule_at(10_000, 1, 1000, DESK)
        assert (s.stage_index, s.alpha, s.phase_kind) == (0, 1.0, "stabilize")

    def test_negative_images_rejected(self):
        with pytest.raises(ValueError, match="images_shown"):
            at(-1)

    def test_missing_batch_entry(self):
        with pytest.raises(ValueError, match="no batch size"):
            schedule_at(1000, 2, 500, {4: 8})

    @given(shown=st.integers(0, 20_000), ipp=st.integers(1, 3000), n=st.integers(1, 4))
    def test_invariants(self, shown, ipp, n):
        s = schedule_at(shown, n, ipp, DESK)
        assert 0 <= s.stage_index < n
        assert 0.0 <= s.alpha <= 1.0
        assert s.resolution == 4 << s.stage_index
        assert (s.alpha == 1.0) == (s.phase_kind == "stabilize")
        assert s.phase < n_phases(n)

    @given(shown=st.integers(0, 20_000))
    def test_monotone_stage_growth(self, shown):
        a = at(shown)
        b = at(shown + 1)
        assert b.stage_index >= a.stage_index
        if a.phase == b.phase and a.phase_kind == "fade":
            assert b.alpha > a.alpha
