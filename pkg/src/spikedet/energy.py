"""Synaptic-operation energy model for the spiking gate versus a MAC-based detector.

All figures are model estimates from per-operation energy costs at 45 nm,
not hardware measurements.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream, SensorGeometry, TimeBase, quantize_array

KERNEL_SYNAPSES = 9

# reference constants for the reproduction check
REF_WIDTH, REF_HEIGHT = 346, 260
REF_INPUT_RATE = 0.0151
REF_SNN_ENERGY_J = 11.03e-9
REF_MACS = 9.58e9
REF_MAC_ENERGY_J = 44.06e-3


@dataclass(frozen=True)
class EnergyModel:
    e_ac: float = 0.9e-12  # J per accumulate
    e_mac: float = 4.6e-12  # J per multiply-accumulate

    def __post_init__(self) -> None:
        if not (self.e_ac > 0 and self.e_mac > 0):
            raise ValueError("energy costs must be > 0")


@dataclass(frozen=True)
class OpsReport:
    m_neurons: int
    c_synapses: int
    f_rate: float
    steps: int
    snn_energy_j: float  # model estimate, per step

    def to_dict(self) -> dict:
        return {
            "m_neurons": self.m_neurons,
            "c_synapses": self.c_synapses,
            "f_rate": self.f_rate,
            "steps": self.steps,
            "snn_energy_j_per_step": self.snn_energy_j,
            "note": "model estimate from per-operation energy, not a measurement",
        }


def snn_energy(m: int, c: int, f: float, model: EnergyModel = EnergyModel()) -> float:
    """Energy of one step of the spiking layer: ``m * c * f`` accumulates."""
    if m < 1 or c < 1:
        raise ValueError("m and c must be >= 1")
    if f < 0:
        raise ValueError("f must be >= 0")
    return m * c * f * model.e_ac


def mac_energy(num_macs: float, model: EnergyModel = EnergyModel()) -> float:
    if num_macs < 0:
        raise ValueError("num_macs must be >= 0")
    return num_macs * model.e_mac


def stimulated_synapses(stream: EventStream, geometry: SensorGeometry) -> int:
    """Synapses driven by the stream: each event reaches every in-bounds neuron of its 3x3 neighbourhood."""
    if not len(stream):
        return 0
    x, y = stream.x.astype(np.int64), stream.y.astype(np.int64)
    nx = 1 + (x > 0) + (x < geometry.width - 1)
    ny = 1 + (y > 0) + (y < geometry.height - 1)
    return int((nx * ny).sum())


def measure_input_rate(stream: EventStream, geometry: SensorGeometry, tb: TimeBase) -> float:
    """Mean fraction of synapses stimulated per step over the stream's step span."""
    return ops_report(stream, geometry, tb).f_rate


def ops_report(stream: EventStream, geometry: SensorGeometry, tb: TimeBase,
               model: EnergyModel = EnergyModel()) -> OpsReport:
    m, c = geometry.num_pixels, KERNEL_SYNAPSES
    if not len(stream):
        return OpsReport(m, c, 0.0, 0, 0.0)
    steps = quantize_array(stream.t, tb)
    n_steps = int(steps.max() - steps.min()) + 1
    f = stimulated_synapses(stream, geometry) / (m * c * n_steps)
    return OpsReport(m, c, f, n_steps, snn_energy(m, c, f, model))


@dataclass(frozen=True)
class Reproduction:
    snn_energy_j: float
    snn_ratio: float  # against the reference figure
    mac_energy_j: float
    mac_ratio: float

    def to_dict(self) -> dict:
        return {
            "snn_energy_j": self.snn_energy_j,
            "snn_reference_j": REF_SNN_ENERGY_J,
            "snn_ratio": self.snn_ratio,
            "mac_energy_j": self.mac_energy_j,
            "mac_reference_j": REF_MAC_ENERGY_J,
            "mac_ratio": self.mac_ratio,
            "note": "model estimates from per-operation energy, not measurements",
        }


def reproduce_reference(model: EnergyModel = EnergyModel()) -> Reproduction:
    e_snn = snn_energy(REF_WIDTH * REF_HEIGHT, KERNEL_SYNAPSES, REF_INPUT_RATE, model)
    e_mac = mac_energy(REF_MACS, model)
    return Reproduction(e_snn, e_snn / REF_SNN_ENERGY_J, e_mac, e_mac / REF_MAC_ENERGY_J)
