"""Transporter communication and propulsion energy.

All quantities are SI: W, J, s, m, Hz, bits. The link is line-of-sight
free-space at the hover altitude, so the channel gain is beta0 / H**2 and the
rate follows Shannon's capacity formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RadioParams:
    p: float  # transmit power, W
    B: float  # bandwidth, Hz
    N0: float  # noise PSD, W/Hz
    beta0: float  # channel power gain at 1 m
    H: float  # hover altitude, m
    S: float  # model size, bits
    rate_override: float | None = None  # bits/s; bypasses the Shannon rate

    def __post_init__(self):
        for name in ("p", "B", "N0", "beta0", "H"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"RadioParams.{name} must be positive and finite, got {v}")
        if not (self.S >= 0 and math.isfinite(self.S)):
            raise ValueError(f"RadioParams.S must be non-negative, got {self.S}")
        if self.rate_override is not None and not self.rate_override > 0:
            raise ValueError("rate_override must be positive")

    @property
    def channel_gain(self) -> float:
        return self.beta0 / self.H**2

    @property
    def snr(self) -> float:
        return self.channel_gain * self.p / (self.B * self.N0)


@dataclass(frozen=True)
class PropulsionParams:
    c1: float  # parasitic coefficient, W s^3/m^3
    c2: float  # induced coefficient, W m/s
    p_hover: float  # W
    V: float  # straight-and-level speed, m/s

    def __post_init__(self):
        for name in ("c1", "c2", "p_hover", "V"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"PropulsionParams.{name} must be positive and finite, got {v}")

    @property
    def slf_power(self) -> float:
        return self.c1 * self.V**3 + self.c2 / self.V

    @classmethod
    def calibrated(
        cls,
        V: float,
        slf_power: float = 30.0,
        parasitic_share: float = 0.5,
        p_hover: float = 20.0,
    ) -> "PropulsionParams":
        """Pick c1, c2 so that SLF power at speed V equals ``slf_power``."""
        if not 0 < parasitic_share < 1:
            raise ValueError("parasitic_share must be in (0, 1)")
        c1 = parasitic_share * slf_power / V**3
        c2 = (1 - parasitic_share) * slf_power * V
        return cls(c1, c2, p_hover, V)


@dataclass(frozen=True)
class EnergyReport:
    e_trans: float
    e_slf: float
    e_hover: float
    e_prop: float
    e_total: float
    budget: float
    feasible: bool

    def as_dict(self) -> dict:
        return {
            "e_trans": self.e_trans,
            "e_slf": self.e_slf,
            "e_hover": self.e_hover,
            "e_prop": self.e_prop,
            "e_total": self.e_total,
            "budget": self.budget,
            "feasible": self.feasible,
        }


def transmission_rate(radio: RadioParams) -> float:
    if radio.rate_override is not None:
        return radio.rate_override
    return radio.B * math.log2(1.0 + radio.snr)


def transmission_time(radio: RadioParams) -> float:
    return radio.S / transmission_rate(radio)


def transmission_energy(radio: RadioParams, r_k: int) -> float:
    """Broadcast energy for one tour over r_k clients."""
    return radio.p * transmission_time(radio) * r_k


def slf_time(prop: PropulsionParams, tour_length: float) -> float:
    if tour_length < 0:
        raise ValueError(f"tour_length must be >= 0, got {tour_length}")
    return tour_length / prop.V


def slf_energy(prop: PropulsionParams, tour_length: float) -> float:
    return slf_time(prop, tour_length) * prop.slf_power


def hover_energy(prop: PropulsionParams, t_trans: float, r_k: int) -> float:
    return r_k * t_trans * prop.p_hover


def optimal_slf_speed(prop: PropulsionParams) -> float:
    """Speed minimising SLF power c1 V^3 + c2 / V."""
    return (prop.c2 / (3.0 * prop.c1)) ** 0.25


def tour_energy_report(
    radio: RadioParams,
    prop: PropulsionParams,
    tour_length: float,
    r_k: int,
    budget: float = math.inf,
) -> EnergyReport:
    t_trans = transmission_time(radio)
    e_trans = transmission_energy(radio, r_k)
    e_slf = slf_energy(prop, tour_length)
    e_hover = hover_energy(prop, t_trans, r_k)
    e_prop = e_slf + e_hover
    e_total = e_prop + e_trans
    return EnergyReport(e_trans, e_slf, e_hover, e_prop, e_total, budget, e_total <= budget)


def calibrate_noise_psd(p: float, B: float, beta0: float, H: float, target_rate: float) -> float:
    """Noise PSD N0 that makes the Shannon rate equal ``target_rate``."""
    snr = 2.0 ** (target_rate / B) - 1.0
    return beta0 / H**2 * p / (B * snr)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0
