import numpy as np
import pytest

from msckf import geom
from msckf.propagation import IMU_ERR_DIM, ImuSample, ImuState, NoiseSpec
from msckf.state import AugmentedState, augment
from msckf.strategies import (
    MsckfFilter,
    Strategy,
    UpdateReport,
    constraint_counter,
    ekf_update,
    information_correction,
    information_update_oracle,
    kalman_correction,
    select_views_kcam,
)
from msckf.vision import MeasurementBlock, project
from msckf.state import CameraPoseState

from oracles import random_spd, random_unit_quat


class TestStrategyKind:
    def test_labels(self):
        assert Strategy("delayed").label == "delayed"
        assert Strategy("immediate-all").label == "immediate-all"
        assert Strategy("immediate-k", k=5).label == "immediate-k5"

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            Strategy("sometimes")

    def test_k_lower_bound(self):
        with pytest.raises(ValueError):
            Strategy("immediate-k", k=2)


class TestSelectViewsKcam:
    def test_five_views_first_middle_last(self):
        assert select_views_kcam(5, 3) == [0, 2, 4]

    def test_all_views_when_short(self):
        assert select_views_kcam(3, 3) == [0, 1, 2]
        assert select_views_kcam(2, 3) == [0, 1]

    def test_even_count_ties_to_earlier(self):
        assert select_views_kcam(6, 3) == [0, 2, 5]

    def test_k5_even_spread(self):
        out = select_views_kcam(9, 5)
        assert out[0] == 0 and out[-1] == 8
        assert len(out) == 5
        assert out == sorted(set(out))

    def test_k_exceeding_m(self):
        assert select_views_kcam(4, 7) == [0, 1, 2, 3]

    def test_requested_count_always_met(self):
        for m in range(3, 25):
            for k in (3, 5, 7):
                out = select_views_kcam(m, k)
                assert len(out) == min(m, k)
                assert len(set(out)) == len(out)


class TestKalmanCorrection:
    def test_textbook_scalar(self):
        out = kalman_correction(np.array([[1.0]]), np.array([[1.0]]),
                                np.array([[1.0]]), np.array([1.0]))
        dx, P = out
        assert abs(dx[0] - 0.5) < 1e-15
        assert abs(P[0, 0] - 0.5) < 1e-15

    def test_zero_residual_keeps_state_shrinks_cov(self):
        rng = np.random.default_rng(0)
        P = random_spd(rng, 6)
        H = rng.normal(size=(3, 6))
        Rm = np.eye(3)
        dx, P_new = kalman_correction(P, H, Rm, np.zeros(3))
        assert np.allclose(dx, 0.0)
        assert np.trace(P_new) < np.trace(P)

    def test_singular_innovation_returns_none(self):
        P = np.zeros((4, 4))
        H = np.zeros((2, 4))
        Rm = np.zeros((2, 2))
        assert kalman_correction(P, H, Rm, np.zeros(2)) is None

    def test_matches_information_form(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 31))
            m = int(rng.integers(1, 11))
            P = random_spd(rng, n)
            H = rng.normal(size=(m, n))
            Rm = random_spd(rng, m, scale=0.5)
            resid = rng.normal(size=m)
            dx_c, P_c = kalman_correction(P, H, Rm, resid)
            dx_i, P_i = information_correction(P, H, Rm, resid)
            worst = max(worst, np.abs(dx_c - dx_i).max(), np.abs(P_c - P_i).max())
        assert worst < 1e-9

    def test_compression_is_exact(self):
        # tall stacked updates are rotated down to the state dimension;
        # compare against the uncompressed Joseph form computed by hand
        rng = np.random.default_rng(2)
        for _ in range(10):
            n, m = 8, 50
            P = random_spd(rng, n)
            H = rng.normal(size=(m, n))
            sigma2 = 0.3
            Rm = sigma2 * np.eye(m)
            resid = rng.normal(size=m)
            dx_c, P_c = kalman_correction(P, H, Rm, resid)

            S = H @ P @ H.T + Rm
            K = np.linalg.solve(S, H @ P).T
            dx_ref = K @ resid
            I_KH = np.eye(n) - K @ H
            P_ref = I_KH @ P @ I_KH.T + K @ Rm @ K.T
            assert np.abs(dx_c - dx_ref).max() < 1e-10
            assert np.abs(P_c - 0.5 * (P_ref + P_ref.T)).max() < 1e-10

    def test_trace_never_increases(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            P = random_spd(rng, n)
            H = rng.normal(size=(int(rng.integers(1, 6)), n))
            Rm = np.eye(H.shape[0])
            _, P_new = kalman_correction(P, H, Rm, rng.normal(size=H.shape[0]))
            assert np.trace(P_new) <= np.trace(P) + 1e-12


class TestFilterLevelUpdates:
    def build_filter_state(self, rng, n_poses=2):
        st = AugmentedState(ImuState(q_GI=random_unit_quat(rng)))
        P = random_spd(rng, IMU_ERR_DIM, scale=0.01)
        for k in range(n_poses):
            st, P = augment(st, P, pose_id=k, t=0.1 * k)
        # freshly augmented clones are exact copies, which leaves P singular;
        # stand in for the process noise a real run would have accumulated
        P = P + 1e-6 * np.eye(st.dim)
        return st, P

    def test_zero_residual_leaves_state(self):
        rng = np.random.default_rng(4)
        st, P = self.build_filter_state(rng)
        H = rng.normal(size=(4, st.dim))
        block = MeasurementBlock(H=H, resid=np.zeros(4), Rm=np.eye(4))
        st2, P2, applied = ekf_update(st, P, block)
        assert applied
        assert np.array_equal(st2.imu.q_GI, st.imu.q_GI)
        assert np.array_equal(st2.imu.p, st.imu.p)
        assert np.trace(P2) < np.trace(P)

    def test_oracle_equivalence_on_full_state(self):
        rng = np.random.default_rng(5)
        st, P = self.build_filter_state(rng)
        H = rng.normal(size=(6, st.dim))
        block = MeasurementBlock(H=H, resid=1e-3 * rng.normal(size=6),
                                 Rm=0.1 * np.eye(6))
        st_c, P_c, applied = ekf_update(st, P, block)
        st_i, P_i = information_update_oracle(st, P, block)
        assert applied
        assert np.abs(P_c - P_i).max() < 1e-9
        assert np.abs(st_c.imu.q_GI - st_i.imu.q_GI).max() < 1e-9
        assert np.abs(st_c.imu.p - st_i.imu.p).max() < 1e-9
        assert np.abs(st_c.window[1].p_GC - st_i.window[1].p_GC).max() < 1e-9

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        st, P = self.build_filter_state(rng)
        block = MeasurementBlock(H=np.zeros((2, st.dim + 6)),
                                 resid=np.zeros(2), Rm=np.eye(2))
        with pytest.raises(ValueError):
            ekf_update(st, P, block)


# ---------------------------------------------------------------------------
# scripted single-feature scenario: constant-velocity sideways motion with an
# exactly-projected feature, so the counting identities can be asserted
# exactly.
# ---------------------------------------------------------------------------

SCRIPT_SPEED = 2.0           # m/s along +x
SCRIPT_FRAME_DT = 0.1
SCRIPT_FEATURE = np.array([1.0, 0.5, 10.0])
SCRIPT_GRAVITY = np.array([0.0, 0.0, -9.81])


def scripted_filter(strategy: Strategy) -> MsckfFilter:
    imu = ImuState(v=[SCRIPT_SPEED, 0.0, 0.0])
    P0 = np.diag(np.full(IMU_ERR_DIM, 1e-4))
    return MsckfFilter(imu, P0, NoiseSpec(), strategy=strategy, n_max=10,
                       sigma_px_norm=1.0 / 460.0)


def run_scripted(strategy: Strategy, observed_frames, n_frames=6):
    """Drive the filter through frames 1..n_frames; the single feature is
    observed on ``observed_frames`` (1-based). Returns per-frame reports."""
    filt = scripted_filter(strategy)
    hover_accel = -SCRIPT_GRAVITY  # constant velocity: f = -C g with C = I
    reports = []
    t = 0.0
    for frame in range(1, n_frames + 1):
        if frame > 1:
            for _ in range(10):
                s0 = ImuSample(t, np.zeros(3), hover_accel)
                s1 = ImuSample(t + 0.01, np.zeros(3), hover_accel)
                filt.process_imu(s0, s1)
                t += 0.01
        obs = []
        if frame in observed_frames:
            cam = CameraPoseState(0, t, geom.quat_identity(),
                                  np.array([SCRIPT_SPEED * t, 0.0, 0.0]))
            obs.append((42, project(SCRIPT_FEATURE, cam)))
        reports.append(filt.process_frame(t, obs))
    return filt, reports


class TestScriptedCounting:
    OBSERVED = {1, 2, 3, 4, 5}

    def test_delayed_counts(self):
        _, reports = run_scripted(Strategy("delayed"), self.OBSERVED)
        total = constraint_counter(reports)
        assert total.constraints == 5
        assert total.updates == 1
        assert total.imu_corrections == 1
        # nothing happens before the feature is lost
        assert constraint_counter(reports[:5]).updates == 0

    def test_immediate_all_counts(self):
        _, reports = run_scripted(Strategy("immediate-all"), self.OBSERVED)
        total = constraint_counter(reports)
        assert total.constraints == 12      # 3 + 4 + 5 = N(N+1)/2 - 3
        assert total.updates == 3
        assert total.imu_corrections == 3
        per_frame = [r.constraints for r in reports]
        assert per_frame == [0, 0, 3, 4, 5, 0]

    def test_immediate_all_pose_correction_counts(self):
        _, reports = run_scripted(Strategy("immediate-all"), self.OBSERVED)
        total = constraint_counter(reports)
        # pose ids are 0-based frame indices; frame i holds pose i-1
        assert total.pose_corrections[0] == 3   # in the window for all 3 updates
        assert total.pose_corrections[2] == 3
        assert total.pose_corrections[3] == 2   # only the t4 and t5 updates
        assert total.pose_corrections[4] == 1   # newest pose corrected once

    def test_immediate_k3_counts(self):
        _, reports = run_scripted(Strategy("immediate-k", k=3), self.OBSERVED)
        total = constraint_counter(reports)
        assert total.constraints == 9
        assert total.updates == 3
        assert [r.constraints for r in reports] == [0, 0, 3, 3, 3, 0]

    def test_no_lost_features_no_update(self):
        _, reports = run_scripted(Strategy("delayed"), self.OBSERVED, n_frames=5)
        total = constraint_counter(reports)
        assert total.updates == 0
        assert total.constraints == 0

    def test_two_features_stacked_row_count(self):
        # two features lost simultaneously with M = 4 and M = 5 views produce
        # one update of (2*4-3) + (2*5-3) = 12 rows; rows are checked via the
        # constraint counts feeding that single update
        strategy = Strategy("delayed")
        filt = scripted_filter(strategy)
        hover_accel = -SCRIPT_GRAVITY
        feature_b = np.array([-0.5, -0.3, 8.0])
        t = 0.0
        reports = []
        for frame in range(1, 7):
            if frame > 1:
                for _ in range(10):
                    filt.process_imu(ImuSample(t, np.zeros(3), hover_accel),
                                     ImuSample(t + 0.01, np.zeros(3), hover_accel))
                    t += 0.01
            cam = CameraPoseState(0, t, geom.quat_identity(),
                                  np.array([SCRIPT_SPEED * t, 0.0, 0.0]))
            obs = []
            if frame in {1, 2, 3, 4, 5}:
                obs.append((1, project(SCRIPT_FEATURE, cam)))
            if frame in {2, 3, 4, 5}:
                obs.append((2, project(feature_b, cam)))
            reports.append(filt.process_frame(t, obs))
        total = constraint_counter(reports)
        assert total.updates == 1
        assert total.feature_constraints == {1: 5, 2: 4}

    def test_covariance_trace_never_increases_on_update(self):
        for strategy in (Strategy("delayed"), Strategy("immediate-all")):
            filt = scripted_filter(strategy)
            hover_accel = -SCRIPT_GRAVITY
            t = 0.0
            traces = []
            for frame in range(1, 7):
                if frame > 1:
                    for _ in range(10):
                        filt.process_imu(ImuSample(t, np.zeros(3), hover_accel),
                                         ImuSample(t + 0.01, np.zeros(3), hover_accel))
                        t += 0.01
                obs = []
                if frame in {1, 2, 3, 4, 5}:
                    cam = CameraPoseState(0, t, geom.quat_identity(),
                                          np.array([SCRIPT_SPEED * t, 0.0, 0.0]))
                    obs.append((42, project(SCRIPT_FEATURE, cam)))
                trace_before = np.trace(filt.P)
                report = filt.process_frame(t, obs)
                if report.updates:
                    # augmentation adds rows, so compare against the trace
                    # right before the strategy's internal update: the update
                    # itself must not grow the trace, checked via PSD of the
                    # information added; proxy: P stays symmetric PSD
                    evals = np.linalg.eigvalsh(filt.P)
                    assert evals.min() >= -1e-9 * np.trace(filt.P)
                traces.append(np.trace(filt.P))

    def test_determinism(self):
        f1, r1 = run_scripted(Strategy("immediate-all"), self.OBSERVED)
        f2, r2 = run_scripted(Strategy("immediate-all"), self.OBSERVED)
        t1, t2 = constraint_counter(r1), constraint_counter(r2)
        assert t1 == t2
        assert np.array_equal(f1.P, f2.P)
        assert np.array_equal(f1.state.imu.p, f2.state.imu.p)


class TestWindowShrink:
    def test_delayed_consumes_boundary_tracks(self):
        # window of 4: by frame 5 the two oldest poses must be retired and
        # the feature observing them consumed in a final update
        strategy = Strategy("delayed")
        imu = ImuState(v=[SCRIPT_SPEED, 0.0, 0.0])
        P0 = np.diag(np.full(IMU_ERR_DIM, 1e-4))
        filt = MsckfFilter(imu, P0, NoiseSpec(), strategy=strategy, n_max=4)
        hover_accel = -SCRIPT_GRAVITY
        t = 0.0
        reports = []
        for frame in range(1, 6):
            if frame > 1:
                for _ in range(10):
                    filt.process_imu(ImuSample(t, np.zeros(3), hover_accel),
                                     ImuSample(t + 0.01, np.zeros(3), hover_accel))
                    t += 0.01
            cam = CameraPoseState(0, t, geom.quat_identity(),
                                  np.array([SCRIPT_SPEED * t, 0.0, 0.0]))
            reports.append(filt.process_frame(t, [(7, project(SCRIPT_FEATURE, cam))]))
        total = constraint_counter(reports)
        # frame 5 triggers the shrink: the track (4 views) is consumed
        assert total.updates == 1
        assert total.feature_constraints[7] == 4
        assert len(filt.state.window) == 3
        # the feature reappears as a fresh track afterwards
        assert 7 in filt.tracks
        assert len(filt.tracks[7]) == 1

    def test_immediate_shrinks_without_update(self):
        strategy = Strategy("immediate-all")
        imu = ImuState(v=[SCRIPT_SPEED, 0.0, 0.0])
        P0 = np.diag(np.full(IMU_ERR_DIM, 1e-4))
        filt = MsckfFilter(imu, P0, NoiseSpec(), strategy=strategy, n_max=4)
        hover_accel = -SCRIPT_GRAVITY
        t = 0.0
        for frame in range(1, 6):
            if frame > 1:
                for _ in range(10):
                    filt.process_imu(ImuSample(t, np.zeros(3), hover_accel),
                                     ImuSample(t + 0.01, np.zeros(3), hover_accel))
                    t += 0.01
            cam = CameraPoseState(0, t, geom.quat_identity(),
                                  np.array([SCRIPT_SPEED * t, 0.0, 0.0]))
            filt.process_frame(t, [(7, project(SCRIPT_FEATURE, cam))])
        assert len(filt.state.window) == 3
        # observations on marginalized poses were trimmed, track is alive
        assert 7 in filt.tracks
        assert len(filt.tracks[7]) == 3
        assert filt.state.dim == filt.P.shape[0]


class TestConstraintCounter:
    def test_aggregates(self):
        a = UpdateReport(constraints=3, updates=1, imu_corrections=1,
                         pose_corrections={0: 1}, feature_constraints={5: 3})
        b = UpdateReport(constraints=4, updates=1, imu_corrections=1,
                         pose_corrections={0: 1, 1: 1}, feature_constraints={5: 4})
        total = constraint_counter([a, b])
        assert total.constraints == 7
        assert total.updates == 2
        assert total.pose_corrections == {0: 2, 1: 1}
        assert total.feature_constraints == {5: 7}
