"""Fixed-budget point-cloud codec and its measurement bookkeeping.

An object cloud is always resampled to 1024 points before encoding.  The
representation factor (RF) divides that budget: a latent holds exactly
``1024 / rf`` float32 scalars.  The codec itself is geometric rather than
learned: the latent stores farthest-point anchor coordinates plus one
spread scalar, and decoding replicates the anchors with isotropic jitter.
Reconstruction quality therefore degrades as RF grows, which is the property
the control plane trades against payload size.

Measured or synthetic (loss, encode time, decode time) triples live in a
``MeasurementDataset`` keyed by (rf, raw-point-count bucket); the optimizer
treats that dataset as its sampling oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    CalibrationError,
    DatasetMissError,
    DecodeError,
    ProfileIncompleteError,
    SizeMismatchError,
)
from .geometry import (
    Bbox3,
    PointCloud,
    farthest_point_indices,
    reconstruction_loss,
    resample,
    sample_visible_surface,
)
from .sampling import TruncatedNormal

RF_SET = (4, 8, 16, 32, 64)
CODEC_INPUT_POINTS = 1024
DESCRIPTOR_OVERHEAD_BYTES = 128
RAW_OBJECT_BYTES = CODEC_INPUT_POINTS * 3 * 4  # uncompressed float32 xyz
LOSSLESS_RATIO = 1.91  # entropy-coder ratio applied to raw uploads
DEFAULT_BETA = 1e-4

# raw point-count bucket boundaries; the last bucket is open-ended
BUCKET_EDGES = (0, 128, 256, 512, 1024, 2048, 4096)
N_BUCKETS = len(BUCKET_EDGES)

# per-RF reconstruction loss calibration: rf -> (mean, sd)
DEFAULT_LOSS_CALIBRATION = {
    4: (0.26, 0.1),
    8: (0.32, 0.1),
    16: (0.38, 0.3),
    32: (0.46, 0.3),
    64: (0.48, 0.4),
}
DEFAULT_TIME_MS = (1.72, 0.53)  # one distribution for encode and decode


def latent_dim(rf: int) -> int:
    if rf < 2 or CODEC_INPUT_POINTS % rf != 0:
        raise ValueError(f"rf must divide {CODEC_INPUT_POINTS}, got {rf}")
    return CODEC_INPUT_POINTS // rf


def anchor_count(rf: int) -> int:
    """Anchors fitting the latent: 3 coords each plus one spread scalar."""
    return (latent_dim(rf) - 1) // 3


def payload_bytes(rf: int) -> int:
    """Latent wire size; the fixed descriptor overhead is accounted separately."""
    return latent_dim(rf) * 4


def lossless_bytes() -> int:
    return int(np.ceil(RAW_OBJECT_BYTES / LOSSLESS_RATIO))


def bucket_index(raw_count: int) -> int:
    return int(np.searchsorted(np.asarray(BUCKET_EDGES[1:]), raw_count, side="right"))


@dataclass
class Latent:
    rf: int
    payload: np.ndarray  # float32, length 1024 // rf
    source_count: int  # raw points before resampling
    frame: str = "global"


def encode(cloud: PointCloud, rf: int, seed: int = 0) -> Latent:
    """Compress a 1024-point cloud into a ``1024/rf``-scalar latent.

    The seed is part of the interface for codec variants with stochastic
    encoders; this scheme is fully deterministic.
    """
    dim = latent_dim(rf)
    if len(cloud) != CODEC_INPUT_POINTS:
        raise SizeMismatchError(
            f"encoder expects {CODEC_INPUT_POINTS} points, got {len(cloud)}"
        )
    k = anchor_count(rf)
    idx = farthest_point_indices(cloud.points, k)
    anchors = cloud.points[idx]
    owner = np.argmin(cdist(cloud.points, anchors, "sqeuclidean"), axis=1)
    spread = float(np.linalg.norm(cloud.points - anchors[owner], axis=1).mean())
    payload = np.zeros(dim, dtype=np.float32)
    payload[: 3 * k] = anchors.astype(np.float32).ravel()
    payload[3 * k] = spread
    return Latent(rf=rf, payload=payload, source_count=len(cloud), frame=cloud.frame)


def decode(latent: Latent, seed: int = 0) -> PointCloud:
    """Reconstruct 1024 points: anchors replicated evenly plus Gaussian jitter."""
    dim = latent_dim(latent.rf)
    payload = np.asarray(latent.payload, dtype=np.float64).ravel()
    if payload.shape[0] != dim:
        raise DecodeError(f"payload length {payload.shape[0]}, expected {dim}")
    if not np.isfinite(payload).all():
        raise DecodeError("payload contains non-finite values")
    k = anchor_count(latent.rf)
    anchors = payload[: 3 * k].reshape(k, 3)
    spread = float(payload[3 * k])
    if spread < 0:
        raise DecodeError(f"negative spread scalar {spread}")
    counts = np.full(k, CODEC_INPUT_POINTS // k, dtype=np.int64)
    counts[: CODEC_INPUT_POINTS % k] += 1
    base = np.repeat(anchors, counts, axis=0)
    rng = np.random.default_rng(seed)
    pts = base + rng.normal(scale=spread, size=base.shape)
    return PointCloud(pts, frame=latent.frame)


# ---------------------------------------------------------------------------
# measurement dataset


class MeasurementDataset:
    """Samples of (loss, encode ms, decode ms) keyed by (rf, count bucket)."""

    COLUMNS = ("loss", "t_enc_ms", "t_dec_ms")

    def __init__(self):
        self._rows: dict = {}  # (rf, bucket) -> [losses, encs, decs]
        self._cache: dict = {}

    def add(self, rf: int, raw_count: int, loss: float, t_enc_ms: float, t_dec_ms: float):
        key = (int(rf), bucket_index(raw_count))
        cell = self._rows.setdefault(key, ([], [], []))
        cell[0].append(float(loss))
        cell[1].append(float(t_enc_ms))
        cell[2].append(float(t_dec_ms))
        self._cache.pop(key, None)

    def keys(self):
        return sorted(self._rows)

    def count(self, rf: int, bucket: int) -> int:
        cell = self._rows.get((rf, bucket))
        return len(cell[0]) if cell else 0

    def _arrays(self, rf: int, bucket: int):
        key = (rf, bucket)
        if key not in self._cache:
            cell = self._rows.get(key)
            if not cell or not cell[0]:
                raise DatasetMissError(f"no samples for rf={rf} bucket={bucket}")
            self._cache[key] = tuple(np.asarray(c, dtype=np.float64) for c in cell)
        return self._cache[key]

    def loss_samples(self, rf: int, bucket: int) -> np.ndarray:
        return self._arrays(rf, bucket)[0]

    def enc_time_samples(self, rf: int, bucket: int) -> np.ndarray:
        return self._arrays(rf, bucket)[1]

    def dec_time_samples(self, rf: int, bucket: int) -> np.ndarray:
        return self._arrays(rf, bucket)[2]

    def mean_loss(self, rf: int, bucket: int) -> float:
        return float(self.loss_samples(rf, bucket).mean())

    def missing_keys(self, rf_set=RF_SET, min_samples: int = 30):
        return [
            (rf, b)
            for rf in rf_set
            for b in range(N_BUCKETS)
            if self.count(rf, b) < min_samples
        ]

    def validate(self, rf_set=RF_SET, min_samples: int = 30):
        missing = self.missing_keys(rf_set, min_samples)
        if missing:
            raise ProfileIncompleteError(missing)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("rf,bucket,loss,t_enc_ms,t_dec_ms\n")
            for (rf, bucket), (losses, encs, decs) in sorted(self._rows.items()):
                for lo, te, td in zip(losses, encs, decs):
                    fh.write(f"{rf},{bucket},{lo!r},{te!r},{td!r}\n")

    @classmethod
    def load(cls, path) -> "MeasurementDataset":
        ds = cls()
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "rf,bucket,loss,t_enc_ms,t_dec_ms":
                raise CalibrationError(f"unrecognized dataset header: {header!r}")
            for line in fh:
                rf, bucket, lo, te, td = line.strip().split(",")
                key = (int(rf), int(bucket))
                cell = ds._rows.setdefault(key, ([], [], []))
                cell[0].append(float(lo))
                cell[1].append(float(te))
                cell[2].append(float(td))
        return ds


# ---------------------------------------------------------------------------
# profiling and the synthetic stand-in


def default_profile_clouds(seed: int = 0, per_bucket: int = 30):
    """Yield (raw_count, 1024-point cloud) pairs covering every count bucket."""
    rng = np.random.default_rng(seed)
    ranges = []
    for i, lo in enumerate(BUCKET_EDGES):
        hi = BUCKET_EDGES[i + 1] if i + 1 < len(BUCKET_EDGES) else int(1.5 * lo)
        ranges.append((max(lo, 16), max(hi - 1, 17)))  # need a few points to sample
    for lo, hi in ranges:
        for _ in range(per_bucket):
            count = int(rng.integers(lo, hi + 1))
            extent = np.array([4.5, 1.8, 1.5]) * rng.uniform(0.8, 1.2, size=3)
            box = Bbox3(center=np.zeros(3), extent=extent, yaw=float(rng.uniform(-np.pi, np.pi)))
            az = rng.uniform(-np.pi, np.pi)
            dist = rng.uniform(8.0, 40.0)
            vp = np.array([dist * np.cos(az), dist * np.sin(az), rng.uniform(0.5, 2.5)])
            cloud = sample_visible_surface(box, vp, count, seed=int(rng.integers(2**31)))
            yield count, resample(cloud, CODEC_INPUT_POINTS)


def profile(clouds, rf_set=RF_SET, beta: float = DEFAULT_BETA,
            dataset: MeasurementDataset | None = None, min_samples: int = 30,
            validate: bool = True) -> MeasurementDataset:
    """Measure codec loss and wall-clock timings over an input cloud stream.

    Raises ProfileIncompleteError when any (rf, bucket) key ends up with fewer
    than ``min_samples`` entries, unless validation is disabled.
    """
    ds = dataset or MeasurementDataset()
    for i, (raw_count, cloud) in enumerate(clouds):
        for rf in rf_set:
            t0 = time.perf_counter()
            lat = encode(cloud, rf)
            t1 = time.perf_counter()
            rec = decode(lat, seed=i)
            t2 = time.perf_counter()
            loss = reconstruction_loss(cloud, rec, beta=beta)
            ds.add(rf, raw_count, loss, (t1 - t0) * 1e3, (t2 - t1) * 1e3)
    if validate:
        ds.validate(rf_set, min_samples)
    return ds


def _stratified(tn: TruncatedNormal, rng: np.random.Generator, n: int) -> np.ndarray:
    """n draws via shuffled stratified inverse-CDF sampling.

    One draw per probability stratum keeps every key's sample mean pinned to
    the calibrated mean; plain iid draws of this size would wobble by more
    than the smallest per-RF loss gap and tilt the optimizer's surface.
    """
    u = (np.arange(n) + 0.5) / n
    return tn.ppf(rng.permutation(u))


def surrogate_dataset(loss_calibration: dict | None = None,
                      time_ms=DEFAULT_TIME_MS, rf_time_scale: dict | None = None,
                      samples_per_key: int = 120, seed: int = 0,
                      rf_set=RF_SET) -> MeasurementDataset:
    """Dataset drawn from calibrated truncated normals instead of the codec.

    Loss samples per RF come from a lower-truncated normal whose realized
    mean equals the calibrated mean; all count buckets share the per-RF
    distribution.  Encode/decode times share one distribution, optionally
    scaled per RF.
    """
    calib = dict(DEFAULT_LOSS_CALIBRATION if loss_calibration is None else loss_calibration)
    for rf in rf_set:
        if rf not in calib:
            raise CalibrationError(f"no loss calibration for rf={rf}")
        mean, sd = calib[rf]
        if sd <= 0 or mean <= 0:
            raise CalibrationError(f"calibration for rf={rf} must be positive, got {calib[rf]}")
    t_mean, t_sd = time_ms
    if t_sd <= 0 or t_mean <= 0:
        raise CalibrationError(f"time calibration must be positive, got {time_ms}")
    scale = rf_time_scale or {}
    rng = np.random.default_rng(seed)
    ds = MeasurementDataset()
    for rf in rf_set:
        loss_tn = TruncatedNormal(*calib[rf])
        s = float(scale.get(rf, 1.0))
        time_tn = TruncatedNormal(t_mean * s, t_sd * s)
        for bucket in range(N_BUCKETS):
            losses = _stratified(loss_tn, rng, samples_per_key)
            encs = _stratified(time_tn, rng, samples_per_key)
            decs = _stratified(time_tn, rng, samples_per_key)
            rep = BUCKET_EDGES[bucket]  # representative count for the bucket key
            for lo, te, td in zip(losses, encs, decs):
                ds.add(rf, rep, lo, te, td)
    return ds
