"""Energy metering for pipeline regions and CO2 accounting.

A sampler thread reads instantaneous CPU/GPU power from a probe while the
metered region runs; energy is the trapezoidal integral of power over wall
time. CO2 is the exact arithmetic identity (cpu_kwh + gpu_kwh) * intensity.
The clock is injectable so integration arithmetic is testable without
waiting out real seconds.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

JOULES_PER_KWH = 3.6e6
DEFAULT_CARBON_INTENSITY = 0.27  # kg CO2 per kWh, configurable per deployment grid


@dataclass
class EmissionsReport:
    cpu_kwh: float
    gpu_kwh: float
    co2_kg: float
    carbon_intensity_kg_per_kwh: float
    duration_s: float
    sample_period_s: float
    probe_kind: str

    def to_dict(self) -> dict:
        return {
            "cpu_kwh": self.cpu_kwh,
            "gpu_kwh": self.gpu_kwh,
            "co2_kg": self.co2_kg,
            "carbon_intensity_kg_per_kwh": self.carbon_intensity_kg_per_kwh,
            "duration_s": self.duration_s,
            "sample_period_s": self.sample_period_s,
            "probe_kind": self.probe_kind,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "EmissionsReport":
        return cls(**raw)

    @classmethod
    def from_energy(cls, cpu_kwh, gpu_kwh, intensity, duration_s, sample_period_s, probe_kind):
        return cls(
            cpu_kwh=cpu_kwh,
            gpu_kwh=gpu_kwh,
            co2_kg=(cpu_kwh + gpu_kwh) * intensity,
            carbon_intensity_kg_per_kwh=intensity,
            duration_s=duration_s,
            sample_period_s=sample_period_s,
            probe_kind=probe_kind,
        )


class StubProbe:
    """Constant-power probe for tests and deterministic accounting."""

    kind = "stub"

    def __init__(self, cpu_watts: float = 100.0, gpu_watts: float = 0.0):
        self.cpu_watts = cpu_watts
        self.gpu_watts = gpu_watts

    def read(self) -> tuple[float, float]:
        return self.cpu_watts, self.gpu_watts


class TdpEstimateProbe:
    """CPU utilization scaled by a TDP figure; used when no hardware meter exists."""

    kind = "tdp-estimate"

    def __init__(self, cpu_tdp_watts: float = 65.0, gpu_tdp_watts: float = 0.0):
        self.cpu_tdp_watts = cpu_tdp_watts
        self.gpu_tdp_watts = gpu_tdp_watts
        try:
            import psutil

            self._psutil = psutil
            psutil.cpu_percent(interval=None)  # prime the counter
        except ImportError:  # pragma: no cover
            self._psutil = None

    def read(self) -> tuple[float, float]:
        if self._psutil is None:  # pragma: no cover
            return self.cpu_tdp_watts, self.gpu_tdp_watts
        util = self._psutil.cpu_percent(interval=None) / 100.0
        return self.cpu_tdp_watts * util, self.gpu_tdp_watts


class RaplProbe:
    """Reads the Linux powercap energy counter; raises if unavailable."""

    kind = "measured"
    _RAPL = Path("/sys/class/powercap/intel-rapl:0/energy_uj")

    def __init__(self, clock=time.monotonic):
        self._clock = clock
        self._last = self._read_counter(), clock()

    def _read_counter(self) -> float:
        return int(self._RAPL.read_text()) / 1e6  # joules

    def read(self) -> tuple[float, float]:
        now_j, now_t = self._read_counter(), self._clock()
        last_j, last_t = self._last
        self._last = now_j, now_t
        dt = now_t - last_t
        watts = (now_j - last_j) / dt if dt > 0 and now_j >= last_j else 0.0
        return watts, 0.0


def default_probe():
    """Hardware meter when readable, TDP estimate otherwise (with a warning)."""
    try:
        return RaplProbe()
    except OSError:
        logger.warning("hardware power meter unavailable, falling back to TDP estimate")
        return TdpEstimateProbe()


def integrate_power(times_s, watts) -> float:
    """Trapezoidal integral of a power series, in kWh."""
    times_s = np.asarray(times_s, dtype=np.float64)
    watts = np.asarray(watts, dtype=np.float64)
    if len(times_s) < 2:
        return 0.0
    return float(np.trapz(watts, times_s)) / JOULES_PER_KWH


class EnergyMeter:
    """Context manager sampling a probe on its own timer while a region runs."""

    def __init__(
        self,
        probe=None,
        carbon_intensity: float = DEFAULT_CARBON_INTENSITY,
        sample_period_s: float = 1.0,
        clock=time.monotonic,
    ):
        self.probe = probe or default_probe()
        self.carbon_intensity = carbon_intensity
        self.sample_period_s = sample_period_s
        self.clock = clock
        self.report: EmissionsReport | None = None
        self._samples: list[tuple[float, float, float]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _sample(self):
        cpu_w, gpu_w = self.probe.read()
        self._samples.append((self.clock(), cpu_w, gpu_w))

    def _run(self):
        while not self._stop.wait(self.sample_period_s):
            self._sample()

    def __enter__(self):
        self._samples.clear()
        self._stop.clear()
        self._sample()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sample()
        ordered = sorted(self._samples)
        times = [s[0] for s in ordered]
        self.report = EmissionsReport.from_energy(
            cpu_kwh=integrate_power(times, [s[1] for s in ordered]),
            gpu_kwh=integrate_power(times, [s[2] for s in ordered]),
            intensity=self.carbon_intensity,
            duration_s=times[-1] - times[0],
            sample_period_s=self.sample_period_s,
            probe_kind=self.probe.kind,
        )
        return False


def meter(region, probe=None, carbon_intensity=DEFAULT_CARBON_INTENSITY, sample_period_s=1.0, clock=time.monotonic):
    """Run region() under an EnergyMeter; returns (region result, EmissionsReport)."""
    m = EnergyMeter(probe, carbon_intensity, sample_period_s, clock)
    with m:
        result = region()
    return result, m.report


def compare(labeled_reports: list[tuple[str, EmissionsReport]]):
    """Per-label mean energy and CO2 with a ratio column against the smallest CO2."""
    import pandas as pd

    if not labeled_reports:
        return pd.DataFrame(columns=["label", "cpu_kwh", "gpu_kwh", "total_kwh", "co2_kg", "co2_ratio"])
    rows = {}
    for label, rep in labeled_reports:
        rows.setdefault(label, []).append(rep)
    table = []
    for label, reps in rows.items():
        cpu = float(np.mean([r.cpu_kwh for r in reps]))
        gpu = float(np.mean([r.gpu_kwh for r in reps]))
        co2 = float(np.mean([r.co2_kg for r in reps]))
        table.append(
            {"label": label, "cpu_kwh": cpu, "gpu_kwh": gpu, "total_kwh": cpu + gpu, "co2_kg": co2}
        )
    df = pd.DataFrame(table)
    floor = df["co2_kg"].min()
    df["co2_ratio"] = df["co2_kg"] / floor if floor > 0 else np.nan
    return df
