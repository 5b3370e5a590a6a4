import numpy as np
import pytest

from lfkm.lightfield import make_synthetic_lf
from lfkm.model import NetworkConfig, init_bank, is_modulator
from lfkm.trainer import TrainSchedule, evaluate, train
from lfkm.transfer import SubsetPattern, TransferError, modulator_snapshot, pattern, transfer


class TestPattern:
    def test_s5(self):
        assert set(pattern("S5", 9, 9).coordinates) == {(4, 4), (0, 0), (0, 8), (8, 0), (8, 8)}

    def test_s13_geometry(self):
        extra = set(pattern(13, 9, 9).coordinates) - set(pattern(9, 9, 9).coordinates)
        assert extra == {(2, 2), (2, 6), (6, 2), (6, 6)}

    @pytest.mark.parametrize("name,size", [("S5", 5), ("S9", 9), ("S13", 13), ("S25", 25), (25, 25)])
    @pytest.mark.parametrize("grid", [(9, 9), (5, 5), (7, 11)])
    def test_sizes_and_range(self, name, size, grid):
        U, V = grid
        coords = pattern(name, U, V).coordinates
        assert len(coords) == len(set(coords)) == size
        assert all(0 <= u < U and 0 <= v < V for u, v in coords)

    def test_nested(self):
        assert set(pattern(9, 9, 9).coordinates) <= set(pattern(25, 9, 9).coordinates)

    @pytest.mark.parametrize("name", ["S5", "S9", "S13", "S25"])
    def test_rotation_symmetric(self, name):
        coords = set(pattern(name, 9, 9).coordinates)
        assert {(v, 8 - u) for u, v in coords} == coords

    def test_invalid(self):
        with pytest.raises(TransferError):
            pattern("S7", 9, 9)
        with pytest.raises(TransferError):
            pattern("S5", 3, 3)


@pytest.fixture
def pair():
    l1 = make_synthetic_lf("checkerboard-parallax", 16, 16, 5, 5, 1, period=8, variant=0)
    l2 = make_synthetic_lf("checkerboard-parallax", 16, 16, 5, 5, 1, period=8, variant=1)
    return l1, l2


@pytest.fixture
def pretrained(pair):
    cfg = NetworkConfig(X=16, Y=16, U=5, V=5, c_m=2, c_d=4)
    bank, _ = train(cfg, TrainSchedule(iterations=30), pair[0])
    return bank


class TestTransfer:
    def test_modulators_frozen(self, pretrained, pair):
        before = modulator_snapshot(pretrained)
        result = transfer(pretrained, pair[1], pattern("S9", 5, 5), TrainSchedule(iterations=15))
        assert modulator_snapshot(result.bank) == before
        assert modulator_snapshot(pretrained) == before
        # the decoder and descriptors do move
        assert not np.array_equal(result.bank.value("L1.desc"), pretrained.value("L1.desc"))
        assert not np.array_equal(result.bank.value("dec.bias"), pretrained.value("dec.bias"))

    def test_involvement(self, pretrained, pair):
        result = transfer(pretrained, pair[1], pattern("S5", 5, 5), TrainSchedule(iterations=3))
        # rows {0,2,4} x cols {0,2,4} share trained row and column modulators
        expected = np.zeros((5, 5), dtype=bool)
        expected[np.ix_([0, 2, 4], [0, 2, 4])] = True
        np.testing.assert_array_equal(result.involved, expected)
        assert np.all(np.isfinite(result.table))

    def test_per_view_involvement(self, pair):
        cfg = NetworkConfig(X=16, Y=16, U=5, V=5, c_m=2, c_d=4, allocate_modulators=False)
        result = transfer(init_bank(cfg), pair[1], pattern("S5", 5, 5), TrainSchedule(iterations=2))
        assert result.involved.sum() == 5

    def test_all_views_matches_plain_retraining(self, pretrained, pair):
        everything = SubsetPattern("all", tuple((u, v) for u in range(5) for v in range(5)))
        schedule = TrainSchedule(iterations=40)
        result = transfer(pretrained, pair[1], everything, schedule)
        assert result.involved.all()
        baseline, _ = train(pretrained.config, schedule, pair[1], bank=pretrained.copy(),
                            trainable=lambda n: not is_modulator(n))
        assert abs(result.involved_mean - evaluate(baseline, pair[1]).mean) < 1.0

    def test_mismatch(self, pretrained):
        other = make_synthetic_lf("checkerboard-parallax", 16, 16, 3, 3, 1)
        with pytest.raises(TransferError):
            transfer(pretrained, other, pattern("S5", 5, 5))

    def test_report(self, pretrained, pair, tmp_path):
        result = transfer(pretrained, pair[1], pattern("S9", 5, 5), TrainSchedule(iterations=2))
        result.write(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert len(lines) == 1 + 25 + 1
        assert "involved_mean=" in lines[-1] and "uninvolved_mean=" in lines[-1]
