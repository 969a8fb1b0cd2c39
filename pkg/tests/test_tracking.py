import numpy as np
import pytest

from coopsim import tracking as trk
from coopsim.tracking import (
    DetectionOracleConfig,
    HybridLocalizer,
    KalmanState,
    LocalizerMode,
    hybrid_localize,
    kalman_correct,
    kalman_init,
    kalman_predict,
    predictive_match,
)


# ---------------------------------------------------------------------------
# Kalman filter


def test_predict_moves_with_velocity():
    s = KalmanState(x=np.array([0.0, 0.0, 1.0, -2.0]), p=np.eye(4), time=0.0)
    out = kalman_predict(s, 1.0)
    assert np.allclose(out.x, [1.0, -2.0, 1.0, -2.0])
    assert out.time == 1.0


def test_process_noise_hand_matrix():
    got = trk.process_noise(1.0, q=1.0)
    want = np.array(
        [
            [1 / 3, 0, 1 / 2, 0],
            [0, 1 / 3, 0, 1 / 2],
            [1 / 2, 0, 1, 0],
            [0, 1 / 2, 0, 1],
        ]
    )
    assert np.allclose(got, want, atol=1e-15)
    # scales linearly in q and keeps PSD
    assert np.allclose(trk.process_noise(0.1, q=2.0), 2.0 * trk.process_noise(0.1, q=1.0))
    assert np.linalg.eigvalsh(trk.process_noise(0.25)).min() >= -1e-15


def test_scalar_gain_is_half_with_equal_variances():
    # prior position variance 1 and observation variance 1: textbook gain 0.5
    s = KalmanState(x=np.zeros(4), p=np.diag([1.0, 1.0, 10.0, 10.0]), time=0.0)
    out = kalman_correct(s, [1.0, 0.0], r_obs=1.0)
    assert abs(out.x[0] - 0.5) < 1e-12
    assert abs(out.x[1]) < 1e-12
    assert abs(out.p[0, 0] - 0.5) < 1e-12


def test_noiseless_constant_velocity_converges():
    v = 7.3
    dt = 0.1
    s = kalman_init([0.0, 0.0], 0.0)
    errors = []
    for k in range(1, 31):
        t = k * dt
        s = kalman_predict(s, dt)
        s = kalman_correct(s, [v * t, 0.0], r_obs=1e-12)
        errors.append(abs(s.x[0] - v * t))
    assert max(errors[10:]) < 1e-6
    assert abs(s.x[2] - v) < 1e-3


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(77)
    for _ in range(500):
        s = kalman_init(rng.normal(size=2), 0.0)
        for _ in range(20):
            if rng.uniform() < 0.5:
                s = kalman_predict(s, float(rng.uniform(0.01, 0.5)))
            else:
                s = kalman_correct(s, rng.normal(scale=5.0, size=2),
                                   r_obs=float(rng.uniform(1e-6, 1.0)))
            assert np.allclose(s.p, s.p.T, atol=1e-9)
            assert np.linalg.eigvalsh(s.p).min() >= -1e-9


def test_predict_rejects_negative_dt():
    with pytest.raises(ValueError):
        kalman_predict(kalman_init([0, 0], 0.0), -0.1)


# ---------------------------------------------------------------------------
# predictive matching


def test_match_prefers_nearer_predicted_track():
    predicted = {1: (0.0, 0.0), 2: (1.0, 0.0)}
    assert predictive_match((0.9, 0.0), predicted) == 2
    assert predictive_match((0.1, 0.0), predicted) == 1


def test_match_crossing_tracks():
    # two tracks heading through the same point; the observation sits just
    # past the crossing on track 5's side
    predicted = {5: (1.0, 1.0), 9: (1.0, -1.0)}
    assert predictive_match((1.0, 0.4), predicted) == 5


def test_match_gate_rejects_far_observation():
    assert predictive_match((10.0, 10.0), {1: (0.0, 0.0)}, gate=3.0) is None
    # boundary: exactly at the gate is rejected (strict inequality)
    assert predictive_match((3.0, 0.0), {1: (0.0, 0.0)}, gate=3.0) is None


def test_match_tie_breaks_to_smallest_id():
    predicted = {4: (0.0, 0.0), 2: (2.0, 0.0)}
    assert predictive_match((1.0, 0.0), predicted) == 2


# ---------------------------------------------------------------------------
# hybrid localization


def _noise_free_cfg() -> DetectionOracleConfig:
    return DetectionOracleConfig(sigma_det=0.0, miss_prob=0.0, sigma_trk=0.0)


def _run_slots(loc, truths, rng):
    results = []
    for k, truth in enumerate(truths):
        results.append(loc.step(k * 0.1, truth, rng))
    return results


def test_zero_rle_switches_to_tracking_and_charges_tracker_time():
    rng = np.random.default_rng(0)
    loc = HybridLocalizer(_noise_free_cfg())
    truths = [{1: (0.1 * k, 0.0), 2: (5.0, 0.1 * k)} for k in range(400)]
    results = _run_slots(loc, truths, rng)
    assert results[0].detection_charged  # boots in detection
    assert all(r.next_mode is LocalizerMode.TRACKING for r in results)
    tracked = [r.charged_ms for r in results[1:]]
    assert all(not r.detection_charged for r in results[1:])
    # charged time follows the tracker distribution (mean 0.73 ms)
    assert abs(np.mean(tracked) - 0.73) < 0.12


def test_large_gap_forces_detection_next_slot():
    cfg = DetectionOracleConfig(sigma_det=0.0, miss_prob=0.0, sigma_trk=5.0)
    rng = np.random.default_rng(1)
    loc = HybridLocalizer(cfg)
    truths = [{1: (0.0, 0.0)} for _ in range(200)]
    results = _run_slots(loc, truths, rng)
    for prev, nxt in zip(results, results[1:]):
        if prev.rle_max >= loc.rle_threshold:
            assert nxt.detection_charged
            assert prev.next_mode is LocalizerMode.DETECTION


def test_new_object_rides_on_detector_in_tracking_mode():
    rng = np.random.default_rng(2)
    loc = HybridLocalizer(_noise_free_cfg())
    loc.step(0.0, {1: (0.0, 0.0)}, rng)
    res = loc.step(0.1, {1: (0.0, 0.0), 7: (3.0, 3.0)}, rng)
    assert not res.detection_charged
    assert res.sources[1] == "tracker"
    assert res.sources[7] == "detector"
    assert 7 in loc.tracks


def test_all_missed_detection_mode_publishes_nothing():
    cfg = DetectionOracleConfig(sigma_det=0.0, miss_prob=1.0, sigma_trk=0.0)
    rng = np.random.default_rng(3)
    tracks = {}
    res = hybrid_localize({1: (0.0, 0.0)}, LocalizerMode.DETECTION, tracks, cfg, rng, 0.0)
    assert res.observations == {}
    assert res.detection_charged


def test_tracks_retire_after_silence():
    rng = np.random.default_rng(4)
    loc = HybridLocalizer(_noise_free_cfg())
    loc.step(0.0, {1: (0.0, 0.0)}, rng)
    assert 1 in loc.tracks
    for k in range(1, 30):
        loc.step(k * 0.1, {}, rng)
    assert 1 not in loc.tracks


def test_tracker_error_mixture_mean_matches_sigma():
    cfg = DetectionOracleConfig()
    pi_b = cfg.maneuver_stationary()
    base = cfg.tracker_base_error()
    mix = (1 - pi_b) * base + pi_b * base * cfg.maneuver_error_ratio
    assert mix == pytest.approx(cfg.sigma_trk, rel=1e-12)


def test_hybrid_error_and_cost_between_pure_modes():
    # lighter rehearsal of the acceptance-scale run
    cfg = DetectionOracleConfig()
    rng = np.random.default_rng(5)
    loc = HybridLocalizer(cfg)
    errs, charges, det_slots = [], [], 0
    n = 3000
    for k in range(n):
        t = k * 0.1
        truth = {i: (10.0 * i + 3.0 * t, 2.0 * i) for i in range(3)}
        res = loc.step(t, truth, rng)
        for obj_id, obs in res.observations.items():
            errs.append(float(np.linalg.norm(obs - np.asarray(truth[obj_id]))))
        charges.append(res.charged_ms)
        det_slots += int(res.detection_charged)
    assert 0.06 < np.mean(errs) < 0.13
    assert np.mean(charges) < 3.5
    assert det_slots / n < 0.25
