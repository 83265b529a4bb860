import numpy as np
import pytest

from photon_dfa.bench import (
    CapacityError,
    GridMismatchError,
    ResumeError,
    ScalingPoint,
    calibrate_latency,
    coefficient_of_variation,
    find_crossover,
    fit_scaling,
    read_points,
    scan_widths,
    summarize,
    time_training,
    with_latency,
)
from photon_dfa.opu import LatencyModel


def fake_point(w, d, alg):
    base = 1e-9 * (2 * d * w * w + 50 * d * w) + 1e-6
    if alg == "bp":
        return ScalingPoint(w, d, alg, 1.6 * base, 0.5 * base, 0.6 * base, 0.5 * base, 0.0)
    opt = 4e-4
    return ScalingPoint(w, d, alg, base + opt, 0.5 * base, 1e-8, 0.5 * base - 1e-8, opt)


def fake_timer(calls):
    def timer(w, d, alg, latency, samples, seed=0, clock="wall"):
        calls.append((alg, d, w))
        return fake_point(w, d, alg)
    return timer


def test_model_clock_is_deterministic_and_consistent():
    a = time_training(64, 2, "odfa", samples=5, clock="model")
    b = time_training(64, 2, "odfa", samples=5, clock="model")
    assert a == b
    assert a.seconds_per_sample == pytest.approx(sum(a.breakdown))
    assert a.optical == pytest.approx(4 / 340)


def test_wall_clock_point_has_positive_stages():
    p = time_training(32, 1, "bp", samples=5, reps=1)
    assert p.forward > 0 and p.feedback > 0 and p.update > 0 and p.optical == 0.0
    q = time_training(32, 2, "odfa", samples=5, reps=1, latency=LatencyModel(0.01, 4))
    assert q.optical == pytest.approx(0.04)
    assert q.seconds_per_sample == pytest.approx(q.digital_seconds + 0.04)


def test_bp_model_cost_is_quadratic_in_width():
    pts = [time_training(w, 3, "bp", clock="model") for w in (100, 200, 400, 800, 1600)]
    fit = fit_scaling(pts)
    assert fit.r_squared > 0.999999
    assert fit.coefficients[0] > 0


def test_fit_recovers_surface():
    pts = [fake_point(w, d, "bp") for d in (1, 2, 4) for w in (100, 200, 300, 500)]
    fit = fit_scaling(pts, "depth_width_surface")
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.predict(3080, 96) == pytest.approx(fake_point(3080, 96, "bp").seconds_per_sample, rel=1e-6)
    with pytest.raises(ValueError):
        fit_scaling([fake_point(100, 1, "bp")] * 5, "quadratic_in_width")
    with pytest.raises(ValueError):
        fit_scaling(pts[:3])


def test_find_crossover():
    bp = [ScalingPoint(w, 1, "bp", w * 1e-3, 0, 0, 0, 0) for w in (1, 2, 3)]
    od = [ScalingPoint(w, 1, "odfa", 2.5e-3, 0, 0, 0, 0) for w in (1, 2, 3)]
    assert find_crossover(bp, od)["width"] == 3
    assert find_crossover(bp[:2], od[:2]) is None
    with pytest.raises(GridMismatchError):
        find_crossover(bp, od[:2])


def test_calibration_reproduces_star_ratio():
    pts = [fake_point(w, d, a) for a in ("bp", "odfa") for d in (1, 2, 4) for w in (100, 200, 300, 500)]
    lat, info = calibrate_latency(pts)
    ratio = (info["odfa_digital_extrapolated"] + lat.seconds(1)) / info["bp_extrapolated"]
    assert ratio == pytest.approx(13.09 / 13.39, rel=1e-9)
    s = summarize(pts, LatencyModel())
    assert s["crossover_extrapolated"] is not None
    assert s["odfa_optical_cv_depth1"] == 0.0
    recost = with_latency(pts, lat)
    assert all(p.optical == lat.seconds(1) for p in recost if p.algorithm == "odfa")


def test_scan_resumes_only_missing_points(tmp_path):
    out = tmp_path / "points.csv"
    calls = []
    scan_widths([1, 2], [64, 128], ["bp", "odfa"], out_csv=out, timer=fake_timer(calls), config_hash="abc")
    assert len(calls) == 8
    lines = out.read_text().splitlines()
    out.write_text("\n".join(lines[:4]) + "\n")  # interrupted after three points
    calls.clear()
    pts = scan_widths([1, 2], [64, 128], ["bp", "odfa"], out_csv=out, timer=fake_timer(calls), config_hash="abc")
    assert len(calls) == 5 and len(pts) == 8
    assert len(read_points(out)) == 8
    with pytest.raises(ResumeError):
        scan_widths([1], [64], ["bp"], out_csv=out, timer=fake_timer([]), config_hash="other")


def test_scan_single_point_and_corrupt_resume(tmp_path):
    out = tmp_path / "p.csv"
    scan_widths([1], [32], ["bp"], out_csv=out, clock="model")
    assert len(out.read_text().splitlines()) == 2
    out.write_text(out.read_text() + "bp,1,64,notanumber\n")
    with pytest.raises(ResumeError):
        scan_widths([1], [32, 64], ["bp"], out_csv=out, clock="model")


def test_capacity_guard():
    with pytest.raises(CapacityError):
        time_training(10 ** 6, 1000, "bp", clock="model")


def test_argument_validation():
    with pytest.raises(ValueError):
        time_training(0, 1, "bp")
    with pytest.raises(ValueError):
        time_training(8, 1, "dfa")
    with pytest.raises(ValueError):
        time_training(8, 1, "bp", clock="sundial")
    assert coefficient_of_variation([2.0, 2.0, 2.0]) == 0.0
    assert np.isfinite(coefficient_of_variation([1.0, 2.0]))
