import numpy as np
import pytest

from airwaykit.errors import DataError
from airwaykit.labels import AirwayLabel
from airwaykit.plotting import (overlay_grid, pair_grid, patch_grid,
                                plot_loss_curve, read_history_csv)


def write_history(path, rows, header="step,total,style\n"):
    path.write_text(header + "".join(f"{r[0]},{r[1]},{r[2]}\n" for r in rows))
    return path


class TestHistoryCSV:
    def test_round_trip(self, tmp_path):
        rows = [(1, 0.5, 0.3), (2, 0.4, 0.25), (3, 0.35, 0.2)]
        path = write_history(tmp_path / "h.csv", rows)
        header, loaded = read_history_csv(path)
        assert header == ["step", "total", "style"]
        assert loaded == [[1.0, 0.5, 0.3], [2.0, 0.4, 0.25], [3.0, 0.35, 0.2]]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_history_csv(tmp_path / "absent.csv")

    def test_no_rows(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("step,total\n")
        with pytest.raises(DataError):
            read_history_csv(path)

    def test_non_numeric_rejected(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("step,total\n1,fast\n")
        with pytest.raises(DataError):
            read_history_csv(path)


class TestFigures:
    def test_loss_curve_written(self, tmp_path):
        path = write_history(tmp_path / "h.csv",
                             [(i, 1.0 / (i + 1), 0.5 / (i + 1))
                              for i in range(1, 30)])
        out = plot_loss_curve(path, tmp_path / "loss.png")
        assert out.is_file() and out.stat().st_size > 1000

    def test_loss_curve_needs_loss_column(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("step\n1\n2\n")
        with pytest.raises(DataError):
            plot_loss_curve(path, tmp_path / "loss.png")

    def test_patch_grid(self, tmp_path):
        rng = np.random.default_rng(0)
        patches = [rng.normal(-800, 100, size=(80, 80)) for _ in range(5)]
        out = patch_grid(patches, 0.5, tmp_path / "grid.png", n_cols=3)
        assert out.is_file() and out.stat().st_size > 1000

    def test_patch_grid_empty_rejected(self, tmp_path):
        with pytest.raises(DataError):
            patch_grid([], 0.5, tmp_path / "grid.png")

    def test_pair_grid(self, tmp_path):
        rng = np.random.default_rng(1)
        inputs = [rng.normal(-800, 100, size=(80, 80)) for _ in range(4)]
        refined = [p + 10 for p in inputs]
        out = pair_grid(inputs, refined, 0.5, tmp_path / "pairs.png")
        assert out.is_file() and out.stat().st_size > 1000

    def test_pair_grid_mismatch_rejected(self, tmp_path):
        with pytest.raises(DataError):
            pair_grid([np.zeros((8, 8))], [], 0.5, tmp_path / "pairs.png")

    def test_overlay_grid_with_failures(self, tmp_path, clean_patch):
        label = AirwayLabel(R_A=2.0, R_B=1.8, W_A=3.0, W_B=2.8,
                            C_x=0.2, C_y=-0.1, theta=0.4)
        patches = [clean_patch.pixels] * 3
        out = overlay_grid(patches, [label, None, label], 0.5,
                           tmp_path / "overlay.png")
        assert out.is_file() and out.stat().st_size > 1000

    def test_overlay_grid_mismatch_rejected(self, tmp_path):
        with pytest.raises(DataError):
            overlay_grid([np.zeros((8, 8))], [], 0.5, tmp_path / "o.png")

    def test_figures_byte_deterministic(self, tmp_path):
        rng = np.random.default_rng(2)
        patches = [rng.normal(-800, 100, size=(40, 40)) for _ in range(3)]
        a = patch_grid(patches, 0.5, tmp_path / "a.png")
        b = patch_grid(patches, 0.5, tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()
