"""Synthetic stream-reservoir temperature benchmark.

The "truth" is a first-order relaxation model, simple enough to check by
hand::

    T[i, t+1] = T[i, t] + kappa_i (Tair[i, t] - T[i, t])
                        + mu_i (mean upstream T[t] - T[i, t])
                        + rho[i, t] (T_hypo - T[i, t])

``rho`` is nonzero only on the segment directly below a reservoir and scales
with that reservoir's total release volume. Releases consist of a yearly
varying conservation baseline, randomly timed early-summer direct-release
pulses and occasional spills after heavy rain, so the cooling they cause is
not predictable from the weather alone.

"Simulation" labels rerun the same model with every release set to zero and
add a warm bias, i.e. a reservoir-blind, uncalibrated process model.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta

import numpy as np

from .graph import Edge

DRIVER_NAMES = (
    "precip_mm", "air_temp_c", "day_of_year", "solar_wm2", "shade_frac", "pet_mm",
    "elevation_m", "length_m", "slope", "width_m",
)
RELEASE_TYPES = ("conservation_m3", "direct_m3", "spill_m3")
META_NAMES = ("dam_height_m", "dam_length_m", "depth_m", "elevation_m", "catchment_km2")


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_segments: int = 8
    n_reservoirs: int = 2
    n_days: int = 1460
    seed: int = 0
    start_date: str = "2000-01-01"
    air_mean: float = 10.0
    air_amplitude: float = 12.0
    air_period: float = 365.0
    air_noise: float = 2.0
    kappa_range: tuple[float, float] = (0.1, 0.5)
    mu_range: tuple[float, float] = (0.0, 0.4)
    t_hypo: float = 7.0
    release_ref_m3: float = 2.0e6
    rho_max: float = 0.8
    obs_fraction: float = 1.0
    sensor_noise: float = 0.3
    sim_bias: float = 2.0

    def validate(self) -> None:
        if self.n_segments < 2:
            raise SynthError("need at least 2 segments")
        if not 0 <= self.n_reservoirs < self.n_segments:
            raise SynthError("need 0 <= n_reservoirs < n_segments")
        if self.n_days < 730:
            raise SynthError("need at least 730 days (two seasonal cycles)")
        lo, hi = self.kappa_range
        if not 0.1 <= lo <= hi <= 0.5:
            raise SynthError(f"kappa_range {self.kappa_range} outside [0.1, 0.5]")
        lo, hi = self.mu_range
        if not 0.0 <= lo <= hi <= 0.4:
            raise SynthError(f"mu_range {self.mu_range} outside [0, 0.4]")
        if not 0 < self.obs_fraction <= 1:
            raise SynthError("obs_fraction must lie in (0, 1]")
        if self.sensor_noise < 0 or self.air_noise < 0 or not 0 < self.rho_max < 1:
            raise SynthError("noise levels must be >= 0 and rho_max in (0, 1)")


@dataclass
class SynthDataset:
    config: SynthConfig
    segments: list[str]
    reservoirs: list[str]
    dates: list[str]
    edges: list[Edge]
    drivers: np.ndarray          # (T, N, 10)
    releases: np.ndarray         # (T, M, 3)
    reservoir_meta: np.ndarray   # (M, 5)
    truth: np.ndarray            # (T, N)
    simulation: np.ndarray       # (T, N)
    obs: np.ndarray              # (T, N), NaN where unobserved
    below_reservoir: list[str] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @property
    def obs_mask(self) -> np.ndarray:
        return ~np.isnan(self.obs)


def _topology(rng: np.random.Generator, n: int, m: int):
    parent = np.full(n, -1)
    for i in range(n - 1):
        parent[i] = rng.integers(i + 1, min(n, i + 3))
    links = list(range(n - 1))
    dammed: list[int] = []
    # Reservoir k sits on the link a -> parent[a]; keep dammed links disjoint.
    candidates = [i for i in links if parent[i] != n - 1 or n == 2]
    rng.shuffle(candidates)
    used_below: set[int] = set()
    for a in candidates:
        if len(dammed) == m:
            break
        if parent[a] in used_below or a in used_below:
            continue
        dammed.append(int(a))
        used_below.add(int(parent[a]))
    if len(dammed) < m:
        for a in links:
            if len(dammed) == m:
                break
            if a not in dammed and parent[a] not in used_below:
                dammed.append(a)
                used_below.add(int(parent[a]))
    if len(dammed) < m:
        raise SynthError("could not place reservoirs on distinct links")
    return parent, dammed


def _descendants(parent: np.ndarray, i: int) -> list[int]:
    out = []
    j = parent[i]
    while j >= 0:
        out.append(int(j))
        j = parent[j]
    return out


def _build_edges(parent, dammed, lengths, res_reach, seg_ids, res_ids):
    n = len(parent)
    blocked = {(a, int(parent[a])) for a in dammed}
    # Segment-only channel: a path through a dam is not a segment-segment link.
    seg_parent = np.array([-1 if (i, int(parent[i])) in blocked else parent[i] for i in range(n)])
    edges = []
    for i in range(n):
        dist = 0.0
        for j in _descendants(seg_parent, i):
            dist += lengths[j]
            edges.append(Edge(seg_ids[i], seg_ids[j], "ss", dist))
    for k, a in enumerate(dammed):
        ups = [i for i in range(n) if i == a or a in _descendants(seg_parent, i)]
        for i in ups:
            # seg_parent chains stop at the dammed segment a
            dist = res_reach[k] + sum(lengths[j] for j in _descendants(seg_parent, i))
            edges.append(Edge(seg_ids[i], res_ids[k], "sr", dist))
        b = int(parent[a])
        dist = lengths[b]
        edges.append(Edge(res_ids[k], seg_ids[b], "rs", dist))
        for j in _descendants(seg_parent, b):
            dist += lengths[j]
            edges.append(Edge(res_ids[k], seg_ids[j], "rs", dist))
    return edges, seg_parent


def _releases(rng, n_days, doy, years, precip, scale):
    n_years = int(years.max()) + 1
    cons = np.zeros(n_days)
    direct = np.zeros(n_days)
    spill = np.zeros(n_days)
    for y in range(n_years):
        sel = years == y
        level = scale * rng.uniform(0.08, 0.2)
        cons[sel] = level * (1.0 + 0.3 * np.cos(2 * np.pi * (doy[sel] - 200) / 365.0))
        idx = np.flatnonzero(sel)
        for _ in range(rng.integers(3, 7)):
            onset = rng.uniform(110, 240)
            dur = rng.uniform(4, 20)
            mag = scale * rng.uniform(0.15, 0.6)
            on = idx[(doy[idx] >= onset) & (doy[idx] < onset + dur)]
            direct[on] += mag
        # a winter release pulse
        onset = rng.uniform(0, 60)
        on = idx[(doy[idx] >= onset) & (doy[idx] < onset + rng.uniform(5, 20))]
        direct[on] += scale * rng.uniform(0.1, 0.3)
    heavy = precip > np.quantile(precip, 0.97)
    spill_days = np.flatnonzero(heavy)
    for d in spill_days:
        spill[d : d + 3] += scale * rng.uniform(0.05, 0.2)
    cons *= np.exp(0.1 * rng.standard_normal(n_days))
    return np.stack([cons, direct, spill], axis=1)


def simulate_truth(air: np.ndarray, up_lists: list[list[int]], kappa, mu, rho: np.ndarray, t_hypo: float,
                   t0: np.ndarray | None = None) -> np.ndarray:
    """Iterate the relaxation recurrence; ``air`` and ``rho`` are (T, N)."""
    T, n = air.shape
    out = np.empty((T, n))
    temp = air[0].copy() if t0 is None else np.asarray(t0, dtype=np.float64).copy()
    for t in range(T):
        out[t] = temp
        upmean = np.array([temp[u].mean() if u else temp[i] for i, u in enumerate(up_lists)])
        nxt = temp + kappa * (air[t] - temp) + mu * (upmean - temp) + rho[t] * (t_hypo - temp)
        temp = np.maximum(nxt, 0.0)
    return out


def generate(config: SynthConfig = SynthConfig()) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, m, T = config.n_segments, config.n_reservoirs, config.n_days
    seg_ids = [f"seg{i:02d}" for i in range(n)]
    res_ids = [f"res{k}" for k in range(m)]
    start = date.fromisoformat(config.start_date)
    days = [start + timedelta(days=t) for t in range(T)]
    dates = [d.isoformat() for d in days]
    doy = np.array([d.timetuple().tm_yday for d in days], dtype=np.float64)
    years = np.array([d.year - start.year for d in days])

    parent, dammed = _topology(rng, n, m)
    lengths = rng.uniform(2000.0, 20000.0, n)
    res_reach = rng.uniform(1000.0, 6000.0, m)
    edges, seg_parent = _build_edges(parent, dammed, lengths, res_reach, seg_ids, res_ids)
    up_lists = [[j for j in range(n) if seg_parent[j] == i] for i in range(n)]

    elevation = np.sort(rng.uniform(200.0, 800.0, n))[::-1].copy()
    slope = rng.uniform(0.001, 0.02, n)
    width = np.linspace(5.0, 40.0, n) * rng.uniform(0.8, 1.2, n)
    shade0 = rng.uniform(0.1, 0.6, n)

    season = np.cos(2 * np.pi * (doy - 200.0) / config.air_period)
    weather = np.zeros(T)
    phi = 0.7
    innov = rng.standard_normal(T) * config.air_noise * np.sqrt(1 - phi**2)
    for t in range(1, T):
        weather[t] = phi * weather[t - 1] + innov[t]
    local = 0.3 * rng.standard_normal((T, n))
    lapse = -0.0065 * (elevation - elevation.mean())
    air = config.air_mean + config.air_amplitude * season[:, None] + weather[:, None] + lapse[None, :] + local

    precip = rng.gamma(0.6, 5.0, size=T)
    precip[rng.random(T) < 0.5] = 0.0
    precip_n = precip[:, None] * rng.uniform(0.8, 1.2, (T, n))
    cloud = np.clip(precip / 20.0, 0, 0.7)
    solar = (200.0 + 120.0 * season)[:, None] * (1 - cloud)[:, None] + 10 * rng.standard_normal((T, n))
    shade = shade0[None, :] * (1.0 + 0.4 * season[:, None])
    pet = np.maximum(0.0, 0.1 * (air + 5) * solar / 250.0)

    drivers = np.empty((T, n, 10))
    drivers[..., 0] = precip_n
    drivers[..., 1] = air
    drivers[..., 2] = doy[:, None]
    drivers[..., 3] = solar
    drivers[..., 4] = shade
    drivers[..., 5] = pet
    drivers[..., 6] = elevation[None, :]
    drivers[..., 7] = lengths[None, :]
    drivers[..., 8] = slope[None, :]
    drivers[..., 9] = width[None, :]

    scale = config.release_ref_m3
    releases = np.zeros((T, m, 3))
    meta = np.zeros((m, 5))
    for k in range(m):
        releases[:, k, :] = _releases(rng, T, doy, years, precip, scale)
        meta[k] = [rng.uniform(20, 60), rng.uniform(200, 900), rng.uniform(10, 40),
                   elevation[dammed[k]] - rng.uniform(5, 30), rng.uniform(100, 1200)]

    kappa = rng.uniform(*config.kappa_range, n)
    mu = np.array([rng.uniform(*config.mu_range) if up_lists[i] else 0.0 for i in range(n)])
    rho = np.zeros((T, n))
    below = []
    for k, a in enumerate(dammed):
        b = int(parent[a])
        below.append(seg_ids[b])
        rho[:, b] = np.minimum(config.rho_max, releases[:, k, :].sum(axis=1) / scale)

    t0 = np.maximum(air[0], 0.0)
    truth = simulate_truth(air, up_lists, kappa, mu, rho, config.t_hypo, t0)
    counterfactual = simulate_truth(air, up_lists, kappa, mu, np.zeros_like(rho), config.t_hypo, t0)
    summer = np.isin([d.month for d in days], (6, 7, 8))
    for k, a in enumerate(dammed):
        b = int(parent[a])
        gap = (counterfactual[summer, b] - truth[summer, b]).mean()
        if gap < 1.0:
            raise SynthError(f"reservoir {res_ids[k]} cools {seg_ids[b]} by only {gap:.2f} C in summer")
    if truth.min() < -1 or truth.max() > 35:
        raise SynthError("truth outside physical range [-1, 35] C")

    simulation = counterfactual + config.sim_bias
    noisy = truth + config.sensor_noise * rng.standard_normal(truth.shape)
    keep = sparsify_mask(truth.shape, config.obs_fraction, config.seed + 7919)
    obs = np.where(keep, noisy, np.nan)

    return SynthDataset(
        config=config, segments=seg_ids, reservoirs=res_ids, dates=dates, edges=edges,
        drivers=drivers, releases=releases, reservoir_meta=meta, truth=truth,
        simulation=simulation, obs=obs, below_reservoir=below,
        params={"kappa": kappa.tolist(), "mu": mu.tolist(), "parent": seg_parent.tolist(),
                "dammed_links": [[seg_ids[a], seg_ids[int(parent[a])]] for a in dammed]},
    )


def sparsify_mask(shape: tuple[int, ...], fraction: float, seed: int) -> np.ndarray:
    """Uniformly chosen ``round(fraction * size)`` cells, without replacement."""
    if not 0 < fraction <= 1:
        raise SynthError(f"fraction must lie in (0, 1], got {fraction}")
    size = int(np.prod(shape))
    count = int(round(fraction * size))
    rng = np.random.default_rng(seed)
    flat = np.zeros(size, dtype=bool)
    flat[rng.choice(size, size=count, replace=False)] = True
    return flat.reshape(shape)


def sparsify(values: np.ndarray, fraction: float, seed: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Keep a uniform random ``fraction`` of the available records, NaN elsewhere.

    ``mask`` (default: non-NaN entries of ``values``) marks which records exist.
    """
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = ~np.isnan(values)
    idx = np.flatnonzero(mask)
    if not 0 < fraction <= 1:
        raise SynthError(f"fraction must lie in (0, 1], got {fraction}")
    count = int(round(fraction * idx.size))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(idx, size=count, replace=False))
    out = np.full(values.shape, np.nan)
    out.flat[chosen] = values.flat[chosen]
    return out


def config_digest(config: SynthConfig) -> str:
    return hashlib.sha256(repr(sorted(asdict(config).items())).encode()).hexdigest()[:16]
