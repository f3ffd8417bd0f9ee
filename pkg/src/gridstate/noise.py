"""Simulated SCADA/PMU measurement chains and fault injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measurements import (
    PMU_KINDS,
    Measurement,
    MeasurementModel,
    MeasurementSet,
    _expand,
)
from .network import Network

__all__ = [
    "ErrorChainConfig",
    "sample_gmm",
    "simulate_scada",
    "simulate_pmu",
    "inject_faults",
    "add_gaussian_noise",
]


@dataclass(frozen=True)
class ErrorChainConfig:
    """Error magnitudes for each stage of the measurement chain.

    Transformer ratio errors are uniform in ``+-bound`` (half systematic,
    half random); cable errors are Gaussian with a non-zero mean; IED errors
    are zero-mean Gaussian; the communication stage is a Gaussian mixture
    given as ``(weight, mean, std)`` triples.  Angle errors are in radians.
    """

    vt_ratio_bound: float = 0.005
    ct_ratio_bound: float = 0.005
    cab_mean: float = 0.001
    cab_std: float = 0.002
    ied_std: float = 0.001
    cn_gmm: tuple[tuple[float, float, float], ...] = ((0.95, 0.0, 0.001), (0.05, 0.0, 0.01))
    vt_angle_bound: float = 1e-3
    ct_angle_bound: float = 1e-3
    cab_angle_std: float = 1e-4
    drop_probability: float = 0.0

    def __post_init__(self):
        w = np.array([c[0] for c in self.cn_gmm], dtype=float)
        if self.cn_gmm and (np.any(w <= 0) or not np.isclose(w.sum(), 1.0)):
            raise ValueError("GMM weights must be positive and sum to 1")
        stds = [self.cab_std, self.ied_std, self.cab_angle_std] + [c[2] for c in self.cn_gmm]
        if min(stds) < 0:
            raise ValueError("standard deviations must be non-negative")
        bounds = [self.vt_ratio_bound, self.ct_ratio_bound, self.vt_angle_bound, self.ct_angle_bound]
        if min(bounds) < 0:
            raise ValueError("error bounds must be non-negative")
        if not 0 <= self.drop_probability <= 1:
            raise ValueError("drop probability must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "ErrorChainConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (), 0.0, 0.0, 0.0)


def sample_gmm(components, size, rng) -> np.ndarray:
    """Draw ``size`` samples from a 1-D Gaussian mixture."""
    if not components:
        return np.zeros(size)
    w = np.array([c[0] for c in components], dtype=float)
    mu = np.array([c[1] for c in components], dtype=float)
    sd = np.array([c[2] for c in components], dtype=float)
    comp = rng.choice(len(w), size=size, p=w / w.sum())
    return mu[comp] + sd[comp] * rng.standard_normal(size)


def _ratio_error(bound, size, sensor_rng, rng):
    # systematic part fixed per sensor, random part per sample; |sum| <= bound
    sys = sensor_rng.uniform(-bound / 2, bound / 2, size) if bound else np.zeros(size)
    ran = rng.uniform(-bound / 2, bound / 2, size) if bound else np.zeros(size)
    return sys + ran


def _gauss(mean, std, size, rng):
    if std == 0:
        return np.full(size, float(mean))
    return mean + std * rng.standard_normal(size)


def _chain_rngs(seed, sensor_seed):
    rng = np.random.default_rng(seed)
    sensor_rng = np.random.default_rng(seed if sensor_seed is None else sensor_seed)
    return rng, sensor_rng


def _drop(entries, cfg, rng):
    if cfg.drop_probability == 0:
        return entries
    keep = rng.random(len(entries)) >= cfg.drop_probability
    return [e for e, k in zip(entries, keep) if k]


def simulate_scada(v, net: Network, plan, cfg: ErrorChainConfig, seed, sensor_seed=None,
                   weight=1.0) -> MeasurementSet:
    """Pass the true quantities of state ``v`` through the SCADA chain.

    Voltage magnitudes follow ``|v|(1+e_VT) + e_CAB + e_IED + e_CN``.  Powers
    are recombined from perturbed voltage and current phasors as
    ``|v|''|i|'' cos/sin(theta'' - theta_i'')`` and then pass the IED and
    communication stages.  ``sensor_seed`` fixes the systematic transformer
    errors so that a time series can share them.
    """
    plan = _expand(net, plan)
    if any(k in PMU_KINDS for k, _ in plan):
        raise ValueError("simulate_scada only handles SCADA kinds")
    rng, sensor_rng = _chain_rngs(seed, sensor_seed)
    L = len(plan)
    model = MeasurementModel(net)
    q = model.quantities(v)
    v = np.asarray(v, dtype=complex)

    volt = np.empty(L, dtype=complex)
    curr = np.empty(L, dtype=complex)
    for j, (kind, target) in enumerate(plan):
        if kind in ("vm", "p", "q"):
            volt[j] = v[target]
            curr[j] = q["pmu_i"][target]
        elif kind in ("pf", "qf"):
            volt[j] = v[model.f[target]]
            curr[j] = q["pmu_if"][target]
        else:
            volt[j] = v[model.t[target]]
            curr[j] = q["pmu_it"][target]

    e_vt = _ratio_error(cfg.vt_ratio_bound, L, sensor_rng, rng)
    e_ct = _ratio_error(cfg.ct_ratio_bound, L, sensor_rng, rng)
    e_vt_ang = _ratio_error(cfg.vt_angle_bound, L, sensor_rng, rng)
    e_ct_ang = _ratio_error(cfg.ct_angle_bound, L, sensor_rng, rng)
    e_cab_v = _gauss(cfg.cab_mean, cfg.cab_std, L, rng)
    e_cab_i = _gauss(cfg.cab_mean, cfg.cab_std, L, rng)
    e_cab_vang = _gauss(0.0, cfg.cab_angle_std, L, rng)
    e_cab_iang = _gauss(0.0, cfg.cab_angle_std, L, rng)
    e_ied = _gauss(0.0, cfg.ied_std, L, rng)
    e_cn = sample_gmm(cfg.cn_gmm, L, rng)

    vm2 = np.abs(volt) * (1 + e_vt) + e_cab_v
    th2 = np.angle(volt) + e_vt_ang + e_cab_vang
    im2 = np.abs(curr) * (1 + e_ct) + e_cab_i
    thi2 = np.angle(curr) + e_ct_ang + e_cab_iang

    # perturbation expressed as a difference so that zero errors reproduce
    # the clean values bit for bit
    vm0, th0, im0, thi0 = np.abs(volt), np.angle(volt), np.abs(curr), np.angle(curr)
    entries = []
    for j, (kind, target) in enumerate(plan):
        if kind == "vm":
            value = np.sqrt(q["vm"][target]) + (vm2[j] - vm0[j])
        elif kind in ("p", "pf", "pt"):
            value = q[kind][target] + (vm2[j] * im2[j] * np.cos(th2[j] - thi2[j])
                                       - vm0[j] * im0[j] * np.cos(th0[j] - thi0[j]))
        else:
            value = q[kind][target] + (vm2[j] * im2[j] * np.sin(th2[j] - thi2[j])
                                       - vm0[j] * im0[j] * np.sin(th0[j] - thi0[j]))
        entries.append(Measurement(kind, target, value + e_ied[j] + e_cn[j], weight))
    return MeasurementSet(_drop(entries, cfg, rng))


def simulate_pmu(v, net: Network, plan, cfg: ErrorChainConfig, seed, sensor_seed=None,
                 weight=1.0) -> MeasurementSet:
    """Pass true phasors through the PMU chain: magnitude
    ``|x|(1+e_VT/CT) + e_CAB`` and angle ``theta + e_VT/CT + e_CAB``."""
    plan = _expand(net, plan)
    if any(k not in PMU_KINDS for k, _ in plan):
        raise ValueError("simulate_pmu only handles PMU kinds")
    rng, sensor_rng = _chain_rngs(seed, sensor_seed)
    L = len(plan)
    true = MeasurementModel(net).evaluate(v, plan)
    is_v = np.array([k == "pmu_v" for k, _ in plan])
    ratio = np.where(is_v, _ratio_error(cfg.vt_ratio_bound, L, sensor_rng, rng),
                     _ratio_error(cfg.ct_ratio_bound, L, sensor_rng, rng))
    ang = np.where(is_v, _ratio_error(cfg.vt_angle_bound, L, sensor_rng, rng),
                   _ratio_error(cfg.ct_angle_bound, L, sensor_rng, rng))
    cab = _gauss(cfg.cab_mean, cfg.cab_std, L, rng)
    cab_ang = _gauss(0.0, cfg.cab_angle_std, L, rng)
    mag = np.abs(true) * (1 + ratio) + cab
    theta = np.angle(true) + ang + cab_ang
    values = true + (mag * np.exp(1j * theta) - np.abs(true) * np.exp(1j * np.angle(true)))
    entries = [Measurement(k, t, val, weight) for (k, t), val in zip(plan, values)]
    return MeasurementSet(_drop(entries, cfg, rng))


def _noise_std(m, scale, floor):
    return np.sqrt(scale * np.maximum(np.abs(m), floor))


def inject_faults(ms: MeasurementSet, p_f: float, seed, clean_scale=0.1, fault_scale=100.0,
                  floor=1e-4) -> MeasurementSet:
    """Mark each entry faulty with probability ``p_f`` and add Gaussian noise
    of variance ``clean_scale*|m|`` (``fault_scale*|m|`` when faulty), where
    ``m`` is the entry's clean value and ``|m|`` is floored at ``floor``.
    Complex entries receive that variance on each component."""
    if not 0 <= p_f <= 1:
        raise ValueError(f"fault probability must lie in [0, 1], got {p_f}")
    rng = np.random.default_rng(seed)
    L = len(ms)
    faulty = rng.random(L) < p_f
    m = ms.values()
    scale = np.where(faulty, fault_scale, clean_scale)
    sd = _noise_std(m, scale, floor)
    re = rng.standard_normal(L)
    im = rng.standard_normal(L)
    is_pmu = np.array([e.is_pmu for e in ms], dtype=bool)
    noise = sd * (re + 1j * np.where(is_pmu, im, 0.0))
    return ms.with_values(m + noise, faulty)


def add_gaussian_noise(ms: MeasurementSet, seed, scale=0.1, floor=1e-4) -> MeasurementSet:
    """Gaussian noise of variance ``scale*|m|`` on every entry, no faults."""
    return inject_faults(ms, 0.0, seed, clean_scale=scale, floor=floor)
