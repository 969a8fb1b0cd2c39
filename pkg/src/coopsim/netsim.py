"""Uplink radio model, FCFS edge queue, and per-frame latency assembly.

The radio side is a closed-form street-canyon path-loss plus Shannon capacity
over the shared band, with optional log-normal fading.  The server side is an
exact first-come-first-serve multi-server queue advanced per frame.  Every
stochastic quantity is drawn from a caller-supplied generator so whole runs
replay bit-exactly.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sampling import TruncatedNormal

SHARE_MODES = ("fdma", "tdma")

# per-frame vehicle-side module times, ms: (mean, sd), truncated at zero
MODULE_TIMES_MS = {
    "localization": (0.061, 0.023),
    "transform": (0.006, 0.012),
    "matching": (0.014, 0.023),
}
DEFAULT_DECODE_MS = (1.72, 0.53)


@dataclass
class RadioConfig:
    bandwidth_hz: float = 200e3
    carrier_ghz: float = 3.5
    tx_power_dbm: float = 23.0
    noise_dbm_per_hz: float = -174.0
    noise_figure_db: float = 9.0
    share_mode: str = "fdma"  # equal-FDMA split or round-robin TDMA duty
    fading_sigma: float = 0.2  # log-domain sd; 0 disables fading
    base_station: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # antenna sectors at the base station; each sector reuses the full band
    # for the CAVs it covers, so sectors=1 is plain single-cell sharing
    sectors: int = 1

    def __post_init__(self):
        if self.bandwidth_hz <= 0 or self.carrier_ghz <= 0:
            raise ConfigError("bandwidth and carrier must be positive")
        if self.share_mode not in SHARE_MODES:
            raise ConfigError(f"share_mode must be one of {SHARE_MODES}")
        if self.sectors < 1:
            raise ConfigError(f"sectors must be >= 1, got {self.sectors}")
        if self.fading_sigma < 0:
            raise ConfigError("fading sigma must be >= 0")
        self.base_station = np.asarray(self.base_station, dtype=np.float64).reshape(3)


@dataclass
class ServerConfig:
    decode_ms: tuple = DEFAULT_DECODE_MS  # per-object (mean, sd)
    servers: int = 1

    def __post_init__(self):
        if self.servers < 1:
            raise ConfigError(f"servers must be >= 1, got {self.servers}")
        if self.decode_ms[0] < 0 or self.decode_ms[1] < 0:
            raise ConfigError("decode time parameters must be >= 0")


@dataclass
class LatencyBreakdown:
    cav_id: int
    vehicle_ms: float
    uplink_ms: float
    queue_ms: float
    server_ms: float
    b_ms: float  # aggregated baseline: module table plus any detection charge

    @property
    def total_ms(self) -> float:
        return self.vehicle_ms + self.uplink_ms + self.queue_ms + self.server_ms + self.b_ms

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.total_ms)


def path_loss_db(distance_m: float, carrier_ghz: float) -> float:
    """Street-canyon line-of-sight form; distances under 1 m clamp to 1 m."""
    d = max(float(distance_m), 1.0)
    return 32.4 + 21.0 * math.log10(d) + 20.0 * math.log10(carrier_ghz)


def snr_db(distance_m: float, band_hz: float, radio: RadioConfig) -> float:
    noise_dbm = radio.noise_dbm_per_hz + 10.0 * math.log10(band_hz) + radio.noise_figure_db
    return radio.tx_power_dbm - path_loss_db(distance_m, radio.carrier_ghz) - noise_dbm


def uplink_rate(position, sharers: int, radio: RadioConfig, fading: float = 1.0) -> float:
    """Shannon rate in bits/s for one CAV sharing its sector with ``sharers``.

    Equal-FDMA gives each CAV a band slice with proportionally less noise;
    TDMA gives the full band at a 1/sharers duty cycle.  The fading factor is
    drawn by the caller (see draw_fading) so frames stay replayable.
    """
    if sharers < 1:
        raise ConfigError(f"sharers must be >= 1, got {sharers}")
    d = float(np.linalg.norm(np.asarray(position, dtype=np.float64).reshape(-1)[:3]
                             - radio.base_station))
    if radio.share_mode == "fdma":
        band = radio.bandwidth_hz / sharers
        rate = band * math.log2(1.0 + 10.0 ** (snr_db(d, band, radio) / 10.0))
    else:
        full = radio.bandwidth_hz
        rate = full * math.log2(1.0 + 10.0 ** (snr_db(d, full, radio) / 10.0)) / sharers
    return rate * float(fading)


def draw_fading(rng: np.random.Generator, sigma: float, size=None):
    if sigma == 0:
        return 1.0 if size is None else np.ones(size)
    return np.exp(sigma * rng.standard_normal(size))


def sector_index(position, radio: RadioConfig) -> int:
    """Sector id by azimuth around the base station, 0 at +x, counterclockwise."""
    rel = np.asarray(position, dtype=np.float64).reshape(-1)[:2] - radio.base_station[:2]
    az = math.atan2(rel[1], rel[0]) % (2.0 * math.pi)
    return int(az // (2.0 * math.pi / radio.sectors)) % radio.sectors


def sector_sharers(positions, radio: RadioConfig) -> np.ndarray:
    """Per-CAV count of active CAVs assigned to the same sector (incl. itself)."""
    ids = np.array([sector_index(p, radio) for p in positions], dtype=np.int64)
    counts = np.bincount(ids, minlength=radio.sectors)
    return counts[ids]


def uplink_ms(payload_bytes: float, rate_bps: float) -> float:
    if payload_bytes <= 0:
        return 0.0
    if rate_bps <= 0:
        return math.inf
    return payload_bytes * 8.0 / rate_bps * 1e3


def _fcfs_waits(arrivals: np.ndarray, services: np.ndarray, servers: int) -> np.ndarray:
    """Exact FCFS waits; jobs are served in the order given."""
    free: list[float] = [0.0] * servers
    heapq.heapify(free)
    waits = np.zeros(len(arrivals))
    for j, (arr, srv) in enumerate(zip(arrivals, services)):
        avail = heapq.heappop(free)
        start = max(arr, avail)
        waits[j] = start - arr
        heapq.heappush(free, start + srv)
    return waits


def sample_module_times_ms(rng: np.random.Generator) -> float:
    """One draw of the per-frame baseline: localization + transform + matching."""
    total = 0.0
    for mean, sd in MODULE_TIMES_MS.values():
        total += float(TruncatedNormal.cached(mean, sd).sample(rng))
    return total


def simulate_frame_latency(payload_bytes, vehicle_ms, rates_bps, object_counts,
                           server: ServerConfig, rng: np.random.Generator,
                           extra_b_ms=None, cav_ids=None) -> list[LatencyBreakdown]:
    """Assemble per-CAV latency for one frame.

    Arrival order at the server is ascending vehicle + uplink completion time,
    ties broken by CAV id.  Server time per CAV is the sum of per-object
    decode draws.  ``extra_b_ms`` carries charges outside the module table,
    e.g. the detector when the hybrid localizer ran detection this frame.
    A zero rate with a nonzero payload yields an infinite, infeasible total.
    """
    n = len(payload_bytes)
    if not (len(vehicle_ms) == len(rates_bps) == len(object_counts) == n):
        raise ConfigError("per-CAV input lengths differ")
    ids = list(range(n)) if cav_ids is None else list(cav_ids)
    extra = [0.0] * n if extra_b_ms is None else list(extra_b_ms)
    decode_tn = TruncatedNormal.cached(*server.decode_ms)

    up = np.array([uplink_ms(b, r) for b, r in zip(payload_bytes, rates_bps)])
    b_base = np.array([sample_module_times_ms(rng) + extra[i] for i in range(n)])
    service = np.array([
        float(decode_tn.sample(rng, size=k).sum()) if k > 0 else 0.0
        for k in object_counts
    ])

    arrival = np.asarray(vehicle_ms, dtype=np.float64) + up
    order = sorted(range(n), key=lambda i: (not math.isfinite(arrival[i]), arrival[i], ids[i]))
    finite = [i for i in order if math.isfinite(arrival[i])]
    waits = np.full(n, math.inf)
    w = _fcfs_waits(arrival[finite], service[finite], server.servers)
    for j, i in enumerate(finite):
        waits[i] = w[j]

    out = []
    for i in range(n):
        out.append(LatencyBreakdown(
            cav_id=ids[i],
            vehicle_ms=float(vehicle_ms[i]),
            uplink_ms=float(up[i]),
            queue_ms=float(waits[i]),
            server_ms=float(service[i]),
            b_ms=float(b_base[i]),
        ))
    return out
