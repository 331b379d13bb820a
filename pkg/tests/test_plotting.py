import numpy as np

from mfglab import plotting


def test_all_figures_render(tmp_path, holed):
    f = np.sin(np.pi * holed.x) * holed.y
    plotting.field_figure(holed, f, tmp_path / "a.png", title="field")
    plotting.comparison_figure(holed, f, 1.1 * f, tmp_path / "b.png")
    plotting.trace_figure(np.linspace(0, 1, 5), np.linspace(0, 1, 7), np.ones((5, 7)), tmp_path / "c.png")
    plotting.residual_figure(np.array([3.0, 0.1, 2.0]), 1, tmp_path / "d.png")
    plotting.history_figure([1.0, 0.1, 1e-3], tmp_path / "e.png")
    plotting.convergence_figure([1e-2, 1e-3], {"u": [1e-4, 1e-6]}, tmp_path / "f.png")
    for name in "abcdef":
        data = (tmp_path / f"{name}.png").read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"


def test_rendering_is_deterministic(tmp_path, square):
    f = square.x * square.y
    plotting.field_figure(square, f, tmp_path / "a.png")
    plotting.field_figure(square, f, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
