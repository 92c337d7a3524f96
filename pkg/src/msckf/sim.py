"""Synthetic world and sensor generation for the Monte-Carlo benchmark.

The vehicle flies a closed-form circular trajectory (with a sinusoidal
height profile) inside a cylinder of randomly placed landmarks.  The IMU
body frame is right-forward-up with the body x axis pointing radially
outward, and the camera looks along body +x, so the landmark wall stays
in view.  IMU and camera streams are pure functions of (config, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geom import quat_to_rot, rot_to_quat
from .propagation import ImuSample, NoiseSpec

G0 = 9.81

# consumer-grade IMU per the simulation setup: 50 deg/h and 100 ug constant
# biases, 0.6 deg/sqrt(h) angle random walk, 200 ug/sqrt(Hz) velocity noise
GYRO_BIAS_MAG = 50.0 * np.pi / 180.0 / 3600.0
ACCEL_BIAS_MAG = 100e-6 * G0
SIGMA_G = 0.6 * (np.pi / 180.0) / 60.0
SIGMA_A = 200e-6 * G0
# stabilizing bias random walks, an order below the white-noise effect
SIGMA_BG = 1e-5
SIGMA_BA = 1e-4

# camera axes expressed in the IMU frame: optical axis along body +x,
# image x along body -y, image y along body -z (right-down-forward camera)
CAM_TO_IMU_ROT = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def default_noise() -> NoiseSpec:
    return NoiseSpec(sigma_g=SIGMA_G, sigma_a=SIGMA_A,
                     sigma_bg=SIGMA_BG, sigma_ba=SIGMA_BA)


@dataclass
class SimConfig:
    imu_rate: int = 100
    cam_rate: int = 10
    duration: float = 120.0
    n_features: int = 300
    cylinder_radius: float = 50.0
    cylinder_z: tuple = (-10.0, 10.0)
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 255.0
    cy: float = 255.0
    image_size: tuple = (640, 640)
    pixel_sigma: float = 1.0
    p_IC: np.ndarray = field(default_factory=lambda: np.array([0.05, 0.04, 0.03]))
    q_CI: np.ndarray = field(default_factory=lambda: rot_to_quat(CAM_TO_IMU_ROT))
    noise: NoiseSpec = field(default_factory=default_noise)
    gyro_bias_mag: float = GYRO_BIAS_MAG
    accel_bias_mag: float = ACCEL_BIAS_MAG
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -G0]))
    # closed-form trajectory parameters: 60 s loop of 25 m radius with a
    # +-2 m height bounce every 30 s; the loop is flown clockwise so the
    # right-pointing camera faces the interior of the landmark cylinder
    circle_radius: float = 25.0
    circle_rate: float = -2.0 * np.pi / 60.0
    bounce_amp: float = 2.0
    bounce_period: float = 30.0
    seed: int = 0

    def __post_init__(self):
        self.p_IC = np.asarray(self.p_IC, dtype=float)
        self.q_CI = np.asarray(self.q_CI, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        if self.imu_rate <= 0 or self.cam_rate <= 0 or self.duration <= 0:
            raise ValueError("rates and duration must be positive")
        if self.imu_rate % self.cam_rate != 0:
            raise ValueError("imu_rate must be an integer multiple of cam_rate")


@dataclass
class TruthSample:
    t: float
    q_GI: np.ndarray
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray   # body angular rate
    f: np.ndarray       # body specific force


@dataclass
class ImuSeries:
    """IMU stream stored as arrays; samples materialize on demand."""

    ts: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __len__(self):
        return len(self.ts)

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.ts[i]), self.gyro[i], self.accel[i])


@dataclass
class CameraFrame:
    t: float
    observations: list  # (feature_id, z_normalized) pairs, ordered by id


@dataclass
class SimWorld:
    cfg: SimConfig
    features: np.ndarray
    truth: object                 # t -> TruthSample
    imu: ImuSeries
    frames: list
    bg0: np.ndarray               # constant gyro bias drawn for this run
    ba0: np.ndarray               # constant accel bias drawn for this run


def _truth_arrays(cfg: SimConfig, ts):
    """Vectorized closed-form trajectory evaluation."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    R, w = cfg.circle_radius, cfg.circle_rate
    A = cfg.bounce_amp
    wb = 2.0 * np.pi / cfg.bounce_period if cfg.bounce_period > 0 else 0.0
    th = w * ts
    cos, sin = np.cos(th), np.sin(th)

    p = np.stack([R * cos, R * sin, A * np.sin(wb * ts)], axis=1)
    v = np.stack([-R * w * sin, R * w * cos, A * wb * np.cos(wb * ts)], axis=1)
    a = np.stack([-R * w * w * cos, -R * w * w * sin,
                  -A * wb * wb * np.sin(wb * ts)], axis=1)

    # right-forward-up body frame: y along the horizontal velocity, z up,
    # x = y cross z; a stationary variant keeps the radial frame
    sgn = np.sign(w) if w != 0.0 else 1.0
    fwd_x, fwd_y = -sgn * sin, sgn * cos
    # C_G_I rows are the body axes expressed in global coordinates
    C_GI = np.zeros((len(ts), 3, 3))
    C_GI[:, 0, 0] = sgn * cos
    C_GI[:, 0, 1] = sgn * sin
    C_GI[:, 1, 0] = fwd_x
    C_GI[:, 1, 1] = fwd_y
    C_GI[:, 2, 2] = 1.0

    omega = np.zeros((len(ts), 3))
    omega[:, 2] = w
    f = np.einsum("kij,kj->ki", C_GI, a - cfg.gravity)
    return {"t": ts, "p": p, "v": v, "a": a, "C_GI": C_GI, "omega": omega, "f": f}


def gen_trajectory(cfg: SimConfig):
    """Analytic ground-truth function ``t -> TruthSample``."""

    def truth(t: float) -> TruthSample:
        arr = _truth_arrays(cfg, [t])
        return TruthSample(
            t=float(t),
            q_GI=rot_to_quat(arr["C_GI"][0]),
            p=arr["p"][0],
            v=arr["v"][0],
            omega=arr["omega"][0],
            f=arr["f"][0],
        )

    return truth


def gen_features(cfg: SimConfig, rng) -> np.ndarray:
    """Landmarks uniform in the cylinder volume (area-uniform radius)."""
    r = cfg.cylinder_radius * np.sqrt(rng.uniform(size=cfg.n_features))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_features)
    z = rng.uniform(cfg.cylinder_z[0], cfg.cylinder_z[1], size=cfg.n_features)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def synth_imu(cfg: SimConfig, rng) -> tuple:
    """Noisy IMU stream; returns (series, bg0, ba0).

    Constant biases are drawn once per run with the configured magnitude and
    a random direction; white noise is scaled from the continuous densities
    by sqrt(rate); the bias random walks integrate per sample.
    """
    n = int(round(cfg.duration * cfg.imu_rate)) + 1
    ts = np.arange(n) / cfg.imu_rate
    arr = _truth_arrays(cfg, ts)

    def random_direction():
        d = rng.normal(size=3)
        return d / np.linalg.norm(d)

    bg0 = cfg.gyro_bias_mag * random_direction()
    ba0 = cfg.accel_bias_mag * random_direction()

    dt = 1.0 / cfg.imu_rate
    sqrt_rate = np.sqrt(cfg.imu_rate)
    gyro = arr["omega"] + bg0
    accel = arr["f"] + ba0
    if cfg.noise.sigma_g > 0:
        gyro = gyro + rng.normal(scale=cfg.noise.sigma_g * sqrt_rate, size=(n, 3))
    if cfg.noise.sigma_a > 0:
        accel = accel + rng.normal(scale=cfg.noise.sigma_a * sqrt_rate, size=(n, 3))
    if cfg.noise.sigma_bg > 0:
        walk = np.cumsum(rng.normal(scale=cfg.noise.sigma_bg * np.sqrt(dt), size=(n, 3)), axis=0)
        gyro = gyro + walk
    if cfg.noise.sigma_ba > 0:
        walk = np.cumsum(rng.normal(scale=cfg.noise.sigma_ba * np.sqrt(dt), size=(n, 3)), axis=0)
        accel = accel + walk
    return ImuSeries(ts=ts, gyro=gyro, accel=accel), bg0, ba0


def synth_camera_frames(cfg: SimConfig, features, rng) -> list:
    """Project all landmarks at each camera epoch and keep in-image hits.

    Pixel noise is added in the pixel domain (after the field-of-view test)
    and converted back to normalized coordinates.
    """
    n = int(round(cfg.duration * cfg.cam_rate)) + 1
    ts = np.arange(n) / cfg.cam_rate
    arr = _truth_arrays(cfg, ts)
    C_IC = quat_to_rot(cfg.q_CI).T
    W, Hpx = cfg.image_size

    frames = []
    for k in range(n):
        C_GI = arr["C_GI"][k]
        C_GC = C_IC @ C_GI
        p_GC = arr["p"][k] + C_GI.T @ cfg.p_IC
        p_C = (features - p_GC) @ C_GC.T
        depth = p_C[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            zn = p_C[:, :2] / depth[:, None]
            u = cfg.fx * zn[:, 0] + cfg.cx
            v = cfg.fy * zn[:, 1] + cfg.cy
        visible = (depth > 1e-6) & (u >= 0) & (u < W) & (v >= 0) & (v < Hpx)
        idx = np.flatnonzero(visible)
        u_n, v_n = u[idx], v[idx]
        if cfg.pixel_sigma > 0 and len(idx):
            u_n = u_n + rng.normal(scale=cfg.pixel_sigma, size=len(idx))
            v_n = v_n + rng.normal(scale=cfg.pixel_sigma, size=len(idx))
        zx = (u_n - cfg.cx) / cfg.fx
        zy = (v_n - cfg.cy) / cfg.fy
        obs = [(int(fid), np.array([zx[j], zy[j]]))
               for j, fid in enumerate(idx)]
        frames.append(CameraFrame(t=float(ts[k]), observations=obs))
    return frames


def simulate(cfg: SimConfig) -> SimWorld:
    """Full sensor generation from independent seeded substreams."""
    ss = np.random.SeedSequence(cfg.seed)
    rng_feat, rng_imu, rng_cam = (np.random.default_rng(s) for s in ss.spawn(3))
    features = gen_features(cfg, rng_feat)
    imu, bg0, ba0 = synth_imu(cfg, rng_imu)
    frames = synth_camera_frames(cfg, features, rng_cam)
    return SimWorld(cfg=cfg, features=features, truth=gen_trajectory(cfg),
                    imu=imu, frames=frames, bg0=bg0, ba0=ba0)


# -- sensor-stream CSV interchange -------------------------------------------

def export_sensors(world: SimWorld, out_dir: str):
    """Write the IMU, track, and truth-pose streams as CSV files."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "imu.csv"), "w") as fh:
        fh.write("t,gx,gy,gz,ax,ay,az\n")
        for i in range(len(world.imu)):
            g = world.imu.gyro[i]
            a = world.imu.accel[i]
            fh.write(f"{world.imu.ts[i]:.17g},{g[0]:.17g},{g[1]:.17g},{g[2]:.17g},"
                     f"{a[0]:.17g},{a[1]:.17g},{a[2]:.17g}\n")
    with open(os.path.join(out_dir, "tracks.csv"), "w") as fh:
        fh.write("t,feature_id,zx,zy\n")
        for frame in world.frames:
            for fid, z in frame.observations:
                fh.write(f"{frame.t:.17g},{fid},{z[0]:.17g},{z[1]:.17g}\n")
    with open(os.path.join(out_dir, "truth.csv"), "w") as fh:
        fh.write("t,qx,qy,qz,qw,px,py,pz\n")
        for frame in world.frames:
            s = world.truth(frame.t)
            q, p = s.q_GI, s.p
            fh.write(f"{frame.t:.17g},{q[0]:.17g},{q[1]:.17g},{q[2]:.17g},{q[3]:.17g},"
                     f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")


def load_sensors(in_dir: str):
    """Read streams written by :func:`export_sensors`.

    Returns ``(imu_series, frames, truth_rows)`` where ``truth_rows`` is a
    list of (t, q_GI, p) tuples at the camera epochs.
    """
    imu_path = os.path.join(in_dir, "imu.csv")
    data = np.loadtxt(imu_path, delimiter=",", skiprows=1)
    imu = ImuSeries(ts=data[:, 0], gyro=data[:, 1:4], accel=data[:, 4:7])

    frames = []
    by_time = {}
    with open(os.path.join(in_dir, "tracks.csv")) as fh:
        header = fh.readline()
        for line in fh:
            t_s, fid_s, zx_s, zy_s = line.rstrip("\n").split(",")
            by_time.setdefault(float(t_s), []).append(
                (int(fid_s), np.array([float(zx_s), float(zy_s)])))
    truth_rows = []
    with open(os.path.join(in_dir, "truth.csv")) as fh:
        header = fh.readline()
        for line in fh:
            vals = [float(x) for x in line.rstrip("\n").split(",")]
            truth_rows.append((vals[0], np.array(vals[1:5]), np.array(vals[5:8])))

    for t, _, _ in truth_rows:
        frames.append(CameraFrame(t=t, observations=sorted(
            by_time.get(t, []), key=lambda ob: ob[0])))
    return imu, frames, truth_rows
