"""Deterministic manipulator and instrument simulation.

The sim advances on a fixed virtual clock: each step moves the joints
toward the active trajectory setpoint under per-joint rate limits,
updates the contact sensor (end-effector height vs. terrain, 1 mm make
threshold with hysteresis), and freezes guarded trajectories on contact.

The XRF instrument is synthetic: expected counts per channel are a
voltage-scaled background ramp plus Gaussian emission peaks whose areas
scale with element concentration, tube current, and live time; realized
counts are Poisson draws from a seeded generator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import KinematicChain, forward_kinematics
from .planner import Trajectory
from .scene import Heightfield, SceneGraph, surface_normal
from .transforms import quat_rotate

CONTACT_MAKE_M = 0.001  # contact closes within 1 mm of the surface
CONTACT_BREAK_M = 0.003  # and re-opens only beyond 3 mm (hysteresis)

N_CHANNELS = 1024
EV_PER_CHANNEL = 20.0

CORE_PLACEMENT_TOL_M = 0.01
CORE_TILT_TOL_DEG = 10.0


class NotInContact(RuntimeError):
    pass


class ContactLost(RuntimeError):
    def __init__(self, spectrum):
        super().__init__(f"contact lost after {spectrum.live_time:.2f} s of integration")
        self.partial_spectrum = spectrum


# ---------------------------------------------------------------------------
# worksite chemistry


@dataclass(frozen=True)
class SiteRegion:
    label: str
    polygon: tuple  # ((x, y), ...) in the terrain plane
    concentrations: dict  # element -> mass fraction

    def __post_init__(self):
        _check_fractions(self.concentrations, self.label)
        object.__setattr__(self, "polygon", tuple(tuple(p) for p in self.polygon))


def _check_fractions(conc, where):
    if any(v < 0 for v in conc.values()):
        raise ValueError(f"negative mass fraction in {where}")
    if sum(conc.values()) > 1.0:
        raise ValueError(f"mass fractions sum above 1 in {where}")


def _point_in_polygon(x, y, polygon) -> bool:
    inside = False
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        if (y0 > y) != (y1 > y):
            xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xi:
                inside = not inside
    return inside


@dataclass(frozen=True)
class SiteComposition:
    regions: tuple
    default: dict  # element -> mass fraction

    def __post_init__(self):
        _check_fractions(self.default, "default region")
        object.__setattr__(self, "regions", tuple(self.regions))

    def region_at(self, x: float, y: float):
        """(label, concentrations) of the composition under (x, y)."""
        for region in self.regions:
            if _point_in_polygon(x, y, region.polygon):
                return region.label, region.concentrations
        return "ambient", self.default


# ---------------------------------------------------------------------------
# XRF model


@dataclass(frozen=True)
class XRFSourceParams:
    tube_voltage_kv: float = 40.0
    tube_current_ua: float = 100.0
    integration_s: float = 60.0

    def __post_init__(self):
        if not 5.0 <= self.tube_voltage_kv <= 50.0:
            raise ValueError("tube voltage must be in [5, 50] kV")
        if not 5.0 <= self.tube_current_ua <= 200.0:
            raise ValueError("tube current must be in [5, 200] uA")
        if self.integration_s <= 0:
            raise ValueError("integration time must be positive")


@dataclass(frozen=True)
class XRFSpectrum:
    counts: np.ndarray  # 1024 non-negative integers
    live_time: float
    params: XRFSourceParams
    ev_per_channel: float = EV_PER_CHANNEL

    def __post_init__(self):
        c = np.asarray(self.counts)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    def channel_energies_kev(self) -> np.ndarray:
        return (np.arange(N_CHANNELS) + 0.5) * self.ev_per_channel / 1000.0


BACKGROUND_SCALE = 0.02  # counts per (uA * s) per channel at zero energy
PEAK_SCALE = 20.0  # peak-area counts per (unit fraction * uA * s * overvoltage)
PEAK_SIGMA_EV = 80.0

DEFAULT_LINE_TABLE = {"Fe": 6.40, "Mn": 5.90, "Ca": 3.69, "Ti": 4.51}


def expected_spectrum(
    concentrations: dict,
    params: XRFSourceParams,
    live_time: float,
    line_table: dict | None = None,
) -> np.ndarray:
    """Closed-form per-channel expectation of the synthetic instrument."""
    lines = DEFAULT_LINE_TABLE if line_table is None else line_table
    e_kev = (np.arange(N_CHANNELS) + 0.5) * EV_PER_CHANNEL / 1000.0
    dose = params.tube_current_ua * live_time
    bg = BACKGROUND_SCALE * dose * (params.tube_voltage_kv / 50.0) * np.clip(
        1.0 - e_kev / params.tube_voltage_kv, 0.0, None
    )
    expect = bg
    sigma_kev = PEAK_SIGMA_EV / 1000.0
    for element, fraction in concentrations.items():
        line = lines.get(element)
        if line is None or fraction <= 0:
            continue
        overvoltage = max(0.0, params.tube_voltage_kv / line - 1.0)
        if overvoltage == 0.0:
            continue  # the source cannot excite this line
        area = PEAK_SCALE * fraction * dose * overvoltage
        pdf = np.exp(-0.5 * ((e_kev - line) / sigma_kev) ** 2) / (sigma_kev * math.sqrt(2 * math.pi))
        expect = expect + area * pdf * (EV_PER_CHANNEL / 1000.0)
    return expect


def line_window(element: str, line_table: dict | None = None, n_sigma: float = 3.0):
    """Channel slice around an element's emission line."""
    lines = DEFAULT_LINE_TABLE if line_table is None else line_table
    center = lines[element] * 1000.0 / EV_PER_CHANNEL
    half = n_sigma * PEAK_SIGMA_EV / EV_PER_CHANNEL
    return slice(max(int(center - half), 0), min(int(center + half) + 1, N_CHANNELS))


def net_line_area(spectrum_counts, concentrations, params, live_time, element):
    """Background-subtracted counts in the element's line window."""
    window = line_window(element)
    bg_only = expected_spectrum({}, params, live_time)
    return float(np.sum(np.asarray(spectrum_counts, dtype=float)[window] - bg_only[window]))


# ---------------------------------------------------------------------------
# manipulator sim


@dataclass
class Disturbance:
    at_s: float
    offset: np.ndarray
    applied: bool = False


class VehicleSim:
    def __init__(self, chain: KinematicChain, scene: SceneGraph, site: SiteComposition, q0, rng_seed: int = 0):
        self.chain = chain
        self.scene = scene
        self.site = site
        self.q = chain.check_q(q0).copy()
        self.clock = 0.0
        self.halted = False
        self.contact = False
        self.contact_point = None
        self.contact_normal = None
        self.trajectory: Trajectory | None = None
        self.traj_start: float = 0.0
        self.traj_frozen = False
        self.disturbances: list[Disturbance] = []
        self.disturbance = np.zeros(3)
        self.correction = np.zeros(3)
        self.rng = np.random.default_rng(rng_seed)

    # -- commands

    def start_trajectory(self, traj: Trajectory):
        self.trajectory = traj
        self.traj_start = self.clock
        self.traj_frozen = False

    def halt(self):
        self.halted = True
        self.trajectory = None

    def resume(self):
        self.halted = False

    def inject_disturbance(self, at_s: float, offset):
        self.disturbances.append(Disturbance(at_s, np.asarray(offset, dtype=float)))

    # -- state

    def ee_pose(self):
        return forward_kinematics(self.chain, self.q)

    def ee_position(self) -> np.ndarray:
        """End-effector position including disturbance and hold correction."""
        return self.ee_pose().position + self.disturbance + self.correction

    def tool_axis(self) -> np.ndarray:
        """World direction the tool points (end-effector +z)."""
        return quat_rotate(self.ee_pose().orientation, np.array([0.0, 0.0, 1.0]))

    def trajectory_done(self) -> bool:
        if self.trajectory is None:
            return True
        if self.traj_frozen:
            return True
        return self.clock - self.traj_start >= self.trajectory.duration

    # -- integration

    def step(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.clock += dt
        for d in self.disturbances:
            if not d.applied and self.clock >= d.at_s:
                self.disturbance = self.disturbance + d.offset
                d.applied = True
        if not self.halted and self.trajectory is not None and not self.traj_frozen:
            setpoint = self.trajectory.setpoint(self.clock - self.traj_start)
            delta = setpoint - self.q
            limit = self.chain.max_rates * dt
            self.q = self.q + np.clip(delta, -limit, limit)
        self._update_contact()

    def _update_contact(self):
        p = self.ee_position()
        terrain = self.scene.terrain
        if not terrain.contains(p[0], p[1]):
            height = math.inf
        else:
            height = p[2] - terrain.height(p[0], p[1])
        if not self.contact and height <= CONTACT_MAKE_M:
            self.contact = True
            self.contact_point = np.array([p[0], p[1], p[2] - height])
            self.contact_normal = surface_normal(terrain, p[0], p[1])
            if self.trajectory is not None and self.trajectory.guarded:
                self.traj_frozen = True  # guarded move halts on contact
        elif self.contact and height > CONTACT_BREAK_M:
            self.contact = False
            self.contact_point = None
            self.contact_normal = None

    # -- instruments

    def spectrum_at(self, point_xy, params: XRFSourceParams, live_time: float) -> XRFSpectrum:
        """Draw a spectrum for the composition under (x, y) over live_time."""
        _, conc = self.site.region_at(point_xy[0], point_xy[1])
        expect = expected_spectrum(conc, params, live_time)
        counts = self.rng.poisson(expect).astype(np.int64)
        return XRFSpectrum(counts=counts, live_time=live_time, params=params)

    def acquire_spectrum(
        self,
        params: XRFSourceParams,
        contact_monitor=None,
        tick_s: float = 0.05,
    ) -> XRFSpectrum:
        """Integrate a spectrum at the current contact point.

        contact_monitor, when given, is called once per tick and returns
        True while contact holds; on loss the acquisition aborts and the
        partial spectrum rides out in the ContactLost error.
        """
        if not self.contact:
            raise NotInContact("spectrum acquisition requires surface contact")
        live = 0.0
        lost = False
        if contact_monitor is None:
            live = params.integration_s
        else:
            while live < params.integration_s:
                step = min(tick_s, params.integration_s - live)
                if not contact_monitor(step):
                    lost = True
                    break
                live += step
        spectrum = self.spectrum_at(self.contact_point[:2], params, live)
        if lost:
            raise ContactLost(spectrum)
        return spectrum

    def push_core(self, target) -> "CoreResult":
        """Drive the corer at the current contact point and score placement."""
        if not self.contact:
            raise NotInContact("push core requires surface contact")
        target = np.asarray(target, dtype=float)
        achieved = self.ee_position()
        horiz = math.hypot(achieved[0] - target[0], achieved[1] - target[1])
        normal = surface_normal(self.scene.terrain, achieved[0], achieved[1])
        axis = -self.tool_axis()  # pressing direction, pointing away from terrain
        cos_tilt = float(np.clip(np.dot(axis, normal), -1.0, 1.0))
        tilt_deg = math.degrees(math.acos(cos_tilt))
        label, _ = self.site.region_at(achieved[0], achieved[1])
        # closed interval at the tolerance, robust to float roundoff
        success = horiz <= CORE_PLACEMENT_TOL_M + 1e-12 and tilt_deg <= CORE_TILT_TOL_DEG + 1e-9
        return CoreResult(success, achieved.copy(), horiz, tilt_deg, label)


@dataclass(frozen=True)
class CoreResult:
    success: bool
    achieved: np.ndarray
    distance_m: float
    tilt_deg: float
    region: str


# ---------------------------------------------------------------------------
# worksite fixtures


class FixtureError(ValueError):
    pass


def site_from_dict(data: dict) -> SiteComposition:
    regions = []
    for r in data.get("regions", []):
        try:
            regions.append(
                SiteRegion(r["label"], tuple(tuple(p) for p in r["polygon"]), dict(r["concentrations"]))
            )
        except ValueError as exc:
            raise FixtureError(f"region '{r.get('label', '?')}': {exc}") from exc
    try:
        return SiteComposition(tuple(regions), dict(data.get("default", {})))
    except ValueError as exc:
        raise FixtureError(str(exc)) from exc


@dataclass(frozen=True)
class Worksite:
    scene: SceneGraph
    site: SiteComposition
    lines_kev: dict


def load_worksite(path) -> Worksite:
    from .scene import scene_from_dict

    with open(path) as f:
        data = json.load(f)
    scene = scene_from_dict(data)
    site = site_from_dict(data.get("site", {}))
    lines = dict(data.get("lines_kev", DEFAULT_LINE_TABLE))
    return Worksite(scene, site, lines)


def spectrum_to_columns(spectrum: XRFSpectrum) -> str:
    """Columnar export: channel_keV counts, one row per channel."""
    lines = ["channel_keV counts"]
    for e, c in zip(spectrum.channel_energies_kev(), spectrum.counts):
        lines.append(f"{e:.3f} {int(c)}")
    return "\n".join(lines) + "\n"
