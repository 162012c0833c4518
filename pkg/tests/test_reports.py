from forge.filtering import SweepPoint
from forge.judge import WtlSummary
from forge.reports import render_margin_figure, render_sweep_figure, render_wtl_figure


def test_sweep_figure(tmp_path):
    points = [SweepPoint(tau_k=t, size=s) for t, s in [(0.5, 40), (0.6, 22), (0.7, 9), (0.8, 3)]]
    out = tmp_path / "sweep.png"
    render_sweep_figure(points, out)
    assert out.stat().st_size > 0


def test_margin_figure(tmp_path):
    history = [
        {"step": i, "loss": 0.7 / (1 + i), "mean_margin": 0.1 * i, "accuracy": min(1.0, 0.5 + 0.05 * i)}
        for i in range(20)
    ]
    out = tmp_path / "margins.png"
    render_margin_figure(history, out)
    assert out.stat().st_size > 0


def test_wtl_figure(tmp_path):
    out = tmp_path / "wtl.png"
    render_wtl_figure(WtlSummary(win=10, tie=5, lose=3), out)
    assert out.stat().st_size > 0


def test_figures_deterministic(tmp_path):
    points = [SweepPoint(tau_k=0.5, size=7), SweepPoint(tau_k=0.6, size=2)]
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    render_sweep_figure(points, a)
    render_sweep_figure(points, b)
    assert a.read_bytes() == b.read_bytes()
