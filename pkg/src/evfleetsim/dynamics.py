"""Vehicle energy model: longitudinal power flows, recuperation, range extender,
battery state-of-charge integration, and the trapezoidal drive-profile
integrator that turns a route edge into a velocity/power/SOC trace.

Sign conventions
----------------
* wheel (traction) power: positive = propulsion demand, negative = surplus
  braking power available for recuperation;
* battery terminal power: positive = discharge.

All step bookkeeping is exact by construction: the SOC change over a step is
precisely ``-p_net * dt / (capacity * 3600)``, so summed flows and SOC deltas
reconcile to float precision even across clamping at the 0/1 bounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

J_PER_KWH = 3.6e6
S_PER_H = 3600.0


class DynamicsError(ValueError):
    pass


class InfeasibleSegmentError(DynamicsError):
    """Entry speed too high to reach the exit target within the edge."""


@dataclass(frozen=True)
class Environment:
    gravity: float = 9.81  # m/s^2
    air_density: float = 1.2  # kg/m^3

    def __post_init__(self):
        if self.gravity <= 0 or self.air_density <= 0:
            raise DynamicsError("environment constants must be positive")


@dataclass(frozen=True)
class RangeExtenderParams:
    """Fuel-powered onboard generator with relay (hysteresis) control."""

    power_w: float
    soc_on: float = 0.20
    soc_off: float = 0.40
    specific_fuel_l_per_kwh: float = 0.28

    def __post_init__(self):
        if self.power_w <= 0:
            raise DynamicsError("range extender power must be positive")
        if not (0.0 <= self.soc_on < self.soc_off <= 1.0):
            raise DynamicsError(
                "range extender thresholds need 0 <= soc_on < soc_off <= 1"
            )
        if self.specific_fuel_l_per_kwh < 0:
            raise DynamicsError("specific fuel rate must be non-negative")


@dataclass(frozen=True)
class VehicleParams:
    mass_kg: float
    drag_coefficient: float
    frontal_area_m2: float
    rolling_coefficient: float
    drivetrain_efficiency: float
    recuperation_efficiency: float
    max_recuperation_power_w: float
    auxiliary_power_w: float
    battery_capacity_wh: float
    max_charging_power_w: float
    max_acceleration_mps2: float
    max_deceleration_mps2: float
    range_extender: RangeExtenderParams | None = None
    charging_efficiency: float = 1.0

    def __post_init__(self):
        positive = {
            "mass_kg": self.mass_kg,
            "drag_coefficient": self.drag_coefficient,
            "frontal_area_m2": self.frontal_area_m2,
            "rolling_coefficient": self.rolling_coefficient,
            "battery_capacity_wh": self.battery_capacity_wh,
            "max_charging_power_w": self.max_charging_power_w,
            "max_acceleration_mps2": self.max_acceleration_mps2,
            "max_deceleration_mps2": self.max_deceleration_mps2,
        }
        for name, value in positive.items():
            if value <= 0:
                raise DynamicsError(f"{name} must be positive")
        for name, value in (
            ("drivetrain_efficiency", self.drivetrain_efficiency),
            ("recuperation_efficiency", self.recuperation_efficiency),
            ("charging_efficiency", self.charging_efficiency),
        ):
            if not (0.0 < value <= 1.0):
                raise DynamicsError(f"{name} must be in (0, 1]")
        # zero disables the respective flow
        if self.max_recuperation_power_w < 0:
            raise DynamicsError("max_recuperation_power_w must be non-negative")
        if self.auxiliary_power_w < 0:
            raise DynamicsError("auxiliary_power_w must be non-negative")


@dataclass
class Cumulative:
    """Non-decreasing per-vehicle energy and distance counters."""

    consumed_wh: float = 0.0
    recuperated_wh: float = 0.0
    range_extended_wh: float = 0.0
    fuel_liters: float = 0.0
    distance_m: float = 0.0


@dataclass
class VehicleState:
    soc: float
    velocity: float = 0.0
    edge_id: str | None = None
    offset_m: float = 0.0
    range_extender_on: bool = False
    cumulative: Cumulative = field(default_factory=Cumulative)


def traction_power(v, a, gradient: float, params: VehicleParams, env: Environment):
    """Wheel power (W) for velocity ``v`` (m/s) and acceleration ``a`` (m/s^2)
    on a road with the given gradient (rise/run).

    ``P = (m*a + m*g*sin(theta) + c_rr*m*g*cos(theta)*[v>0]
          + 0.5*rho*c_d*A*v^2) * v`` with ``theta = atan(gradient)``.
    Accepts scalars or numpy arrays for ``v`` and ``a``.
    """
    theta = math.atan(gradient)
    m = params.mass_kg
    g = env.gravity
    rolling = params.rolling_coefficient * m * g * math.cos(theta) * (v > 0)
    aero = 0.5 * env.air_density * params.drag_coefficient * params.frontal_area_m2 * v * v
    return (m * a + m * g * math.sin(theta) + rolling + aero) * v


def recuperation_power(p_traction, params: VehicleParams):
    """Battery inflow (W, >= 0) recovered from surplus braking power."""
    surplus = np.maximum(-np.asarray(p_traction, dtype=float), 0.0)
    capped = np.minimum(
        surplus * params.recuperation_efficiency, params.max_recuperation_power_w
    )
    return float(capped) if np.ndim(p_traction) == 0 else capped


def battery_power(p_traction: float, params: VehicleParams) -> float:
    """Signed battery terminal power (positive = discharge) for a wheel power
    demand, including drivetrain losses, recuperation, and the hotel load."""
    if p_traction >= 0:
        return p_traction / params.drivetrain_efficiency + params.auxiliary_power_w
    return -recuperation_power(p_traction, params) + params.auxiliary_power_w


def range_extender_step(
    soc: float, on: bool, params: VehicleParams, dt: float
) -> tuple[float, float, bool]:
    """One relay-control step of the range extender while driving.

    Turns on below ``soc_on``, off at or above ``soc_off``, keeps its state in
    between. Returns ``(generated power W, fuel liters for dt, new flag)``.
    """
    if dt <= 0:
        raise DynamicsError("dt must be positive")
    re = params.range_extender
    if re is None:
        return 0.0, 0.0, False
    if soc < re.soc_on:
        on = True
    elif soc >= re.soc_off:
        on = False
    if not on:
        return 0.0, 0.0, False
    fuel = re.specific_fuel_l_per_kwh * re.power_w * dt / J_PER_KWH * 1000.0
    return re.power_w, fuel, True


def integrate_soc(soc: float, p_battery_net: float, dt: float, capacity_wh: float) -> float:
    """Advance SOC by a constant net terminal power over ``dt`` seconds,
    clamped to [0, 1]."""
    if dt <= 0 or capacity_wh <= 0:
        raise DynamicsError("dt and capacity must be positive")
    return min(1.0, max(0.0, soc - p_battery_net * dt / (capacity_wh * S_PER_H)))


# ---------------------------------------------------------------------------
# drive profile
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Profile:
    """Piecewise-constant-acceleration velocity profile over one edge."""

    v_in: float
    v_peak: float
    v_out: float
    t_acc: float
    t_cruise: float
    t_dec: float
    accel: float
    decel: float

    @property
    def duration(self) -> float:
        return self.t_acc + self.t_cruise + self.t_dec

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        t1 = self.t_acc
        t2 = self.t_acc + self.t_cruise
        v = np.where(
            t <= t1,
            self.v_in + self.accel * t,
            np.where(t <= t2, self.v_peak, self.v_peak - self.decel * (t - t2)),
        )
        return np.maximum(v, 0.0)

    def position(self, t):
        t = np.asarray(t, dtype=float)
        t1 = self.t_acc
        t2 = self.t_acc + self.t_cruise
        s1 = self.v_in * t1 + 0.5 * self.accel * t1 * t1
        s2 = s1 + self.v_peak * self.t_cruise
        tau = t - t2
        return np.where(
            t <= t1,
            self.v_in * t + 0.5 * self.accel * t * t,
            np.where(
                t <= t2,
                s1 + self.v_peak * (t - t1),
                s2 + self.v_peak * tau - 0.5 * self.decel * tau * tau,
            ),
        )


def _plan_profile(
    length: float, v_in: float, v_out_target: float, v_cruise: float,
    a_max: float, d_max: float,
) -> _Profile:
    eps = 1e-9
    v_in = min(v_in, v_cruise)
    v_out = min(v_out_target, v_cruise)

    if v_in > v_out:
        brake_dist = (v_in * v_in - v_out * v_out) / (2.0 * d_max)
        if brake_dist > length * (1.0 + eps) + eps:
            raise InfeasibleSegmentError(
                f"cannot brake from {v_in:.2f} to {v_out:.2f} m/s "
                f"within {length:.1f} m"
            )

    d_acc = max(0.0, (v_cruise * v_cruise - v_in * v_in) / (2.0 * a_max))
    d_dec = max(0.0, (v_cruise * v_cruise - v_out * v_out) / (2.0 * d_max))
    if d_acc + d_dec <= length:
        v_peak = v_cruise
        cruise_len = length - d_acc - d_dec
    else:
        cruise_len = 0.0
        peak_sq = (
            2.0 * a_max * d_max * length + d_max * v_in * v_in + a_max * v_out * v_out
        ) / (a_max + d_max)
        hi = max(v_in, v_out)
        if peak_sq >= hi * hi - eps:
            v_peak = math.sqrt(max(peak_sq, hi * hi))
        elif peak_sq < v_out * v_out:
            # exit target unreachable: accelerate for the whole edge
            v_peak = v_out = math.sqrt(v_in * v_in + 2.0 * a_max * length)
        else:
            raise InfeasibleSegmentError(
                f"no feasible profile on {length:.1f} m "
                f"(v_in={v_in:.2f}, v_out={v_out:.2f})"
            )

    t_acc = max(0.0, (v_peak - v_in) / a_max)
    t_dec = max(0.0, (v_peak - v_out) / d_max)
    t_cruise = cruise_len / v_peak if cruise_len > 0.0 else 0.0
    return _Profile(v_in, v_peak, v_out, t_acc, t_cruise, t_dec, a_max, d_max)


@dataclass
class DriveTrace:
    """Fixed-step samples over one edge; the last step may be shorter.

    ``time_s`` marks the start of each step; ``v``/``a`` are the exact step
    averages; ``soc`` is the state at the end of the step.
    """

    time_s: np.ndarray
    dt_s: np.ndarray
    v_mps: np.ndarray
    a_mps2: np.ndarray
    gradient: float
    p_traction_w: np.ndarray
    p_battery_w: np.ndarray
    p_recup_w: np.ndarray
    p_re_w: np.ndarray
    soc: np.ndarray

    def __len__(self) -> int:
        return len(self.time_s)

    def write_csv(self, path, vehicle_id: str, edge_id: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["time_s", "vehicle_id", "edge_id", "v_mps", "a_mps2", "gradient",
                 "p_traction_w", "p_battery_w", "p_recup_w", "p_re_w", "soc"]
            )
            for i in range(len(self.time_s)):
                writer.writerow([
                    f"{self.time_s[i]:.3f}", vehicle_id, edge_id,
                    f"{self.v_mps[i]:.4f}", f"{self.a_mps2[i]:.4f}",
                    f"{self.gradient:.6f}", f"{self.p_traction_w[i]:.3f}",
                    f"{self.p_battery_w[i]:.3f}", f"{self.p_recup_w[i]:.3f}",
                    f"{self.p_re_w[i]:.3f}", f"{self.soc[i]:.9f}",
                ])


@dataclass
class SegmentResult:
    trace: DriveTrace
    duration_s: float
    distance_m: float
    exit_velocity: float
    stranded: bool
    consumed_wh: float
    recuperated_wh: float
    range_extended_wh: float
    fuel_l: float
    battery_delta_wh: float  # negative = net discharge, equals capacity * dSOC
    toggles: list[tuple[float, bool]]  # (time offset s, new range-extender flag)


def drive_segment(
    state: VehicleState,
    edge,
    v_entry: float,
    v_exit_target: float,
    params: VehicleParams,
    env: Environment,
    dt: float,
    speed_factor: float = 1.0,
) -> SegmentResult:
    """Drive one edge with a trapezoidal velocity profile and integrate the
    power-flow chain into the vehicle state.

    ``edge`` needs ``edge_id``, ``length_m``, ``speed_limit_mps`` and
    ``gradient`` attributes. The vehicle accelerates at its limit toward
    ``speed_limit * speed_factor``, cruises, and decelerates so the exit speed
    does not exceed ``v_exit_target``; if the edge is too short to reach the
    target the exit speed is whatever acceleration achieves. Entering faster
    than braking allows raises :class:`InfeasibleSegmentError`. When the
    battery empties and the range extender cannot carry the demand, the
    segment is truncated and flagged stranded.
    """
    if dt <= 0:
        raise DynamicsError("dt must be positive")
    if not (0.0 < speed_factor <= 1.0):
        raise DynamicsError("speed_factor must be in (0, 1]")
    v_cruise = edge.speed_limit_mps * speed_factor
    if v_entry > v_cruise * (1.0 + 1e-9):
        raise DynamicsError(
            f"entry speed {v_entry:.2f} exceeds effective limit {v_cruise:.2f}"
        )

    profile = _plan_profile(
        edge.length_m, v_entry, v_exit_target, v_cruise,
        params.max_acceleration_mps2, params.max_deceleration_mps2,
    )
    total = profile.duration

    n_full = int(math.floor(total / dt + 1e-12))
    bounds = np.arange(n_full + 1, dtype=float) * dt
    if total - bounds[-1] > 1e-9:
        bounds = np.append(bounds, total)
    else:
        bounds[-1] = total
    dts = np.diff(bounds)
    n = len(dts)

    pos = profile.position(bounds)
    vel = profile.velocity(bounds)
    v_bar = np.diff(pos) / dts
    a_bar = np.diff(vel) / dts

    p_trac = traction_power(v_bar, a_bar, edge.gradient, params, env)
    p_drive = np.where(p_trac >= 0.0, p_trac / params.drivetrain_efficiency, 0.0)
    p_recup = np.where(
        p_trac < 0.0,
        np.minimum(-p_trac * params.recuperation_efficiency,
                   params.max_recuperation_power_w),
        0.0,
    )
    p_consume = p_drive + params.auxiliary_power_w
    p_net0 = p_consume - p_recup  # before range extender

    cap = params.battery_capacity_wh
    soc0 = state.soc
    re = params.range_extender
    toggles: list[tuple[float, bool]] = []
    stranded = False

    re_power_arr = np.zeros(n)
    p_net_eff = p_net0.copy()
    flag = state.range_extender_on

    fast = False
    if re is None:
        soc_traj = soc0 - np.cumsum(p_net0 * dts) / (cap * S_PER_H)
        fast = soc_traj.min() > 0.0 and soc_traj.max() <= 1.0
        flag = False
    elif not flag:
        soc_traj = soc0 - np.cumsum(p_net0 * dts) / (cap * S_PER_H)
        fast = (soc_traj.min() >= re.soc_on and soc_traj.max() <= 1.0
                and soc0 >= re.soc_on)
    else:
        p_net1 = p_net0 - re.power_w
        soc_traj = soc0 - np.cumsum(p_net1 * dts) / (cap * S_PER_H)
        fast = (0.0 < soc_traj.min() and soc_traj.max() < re.soc_off
                and soc0 < re.soc_off)
        if fast:
            re_power_arr[:] = re.power_w
            p_net_eff = p_net1

    if not fast:
        # step loop handling relay toggles and clamping at the SOC bounds
        soc_traj = np.empty(n)
        soc = soc0
        steps_done = n
        trunc_dt = None
        for k in range(n):
            dt_k = dts[k]
            re_power, _, new_flag = range_extender_step(soc, flag, params, dt_k)
            if re is not None and new_flag != flag:
                toggles.append((float(bounds[k]), new_flag))
                flag = new_flag
            p_net = p_net0[k] - re_power
            if p_net > 0.0:
                t_empty = soc * cap * S_PER_H / p_net
                if t_empty < dt_k * (1.0 - 1e-12):
                    # battery empties mid-step: truncate and strand
                    re_power_arr[k] = re_power
                    p_net_eff[k] = p_net
                    soc = 0.0
                    soc_traj[k] = soc
                    steps_done = k + 1
                    trunc_dt = max(t_empty, 0.0)
                    stranded = True
                    break
                soc -= p_net * dt_k / (cap * S_PER_H)
            elif p_net < 0.0:
                t_full = (1.0 - soc) * cap * S_PER_H / (-p_net)
                if t_full < dt_k * (1.0 - 1e-12):
                    # battery full mid-step: curtail inflow for the remainder
                    frac = t_full / dt_k
                    absorbed_re = min(re_power, p_consume[k])
                    re_power_arr[k] = re_power * frac + absorbed_re * (1.0 - frac)
                    p_recup[k] = p_recup[k] * frac + (
                        p_consume[k] - absorbed_re) * (1.0 - frac)
                    p_net_eff[k] = p_consume[k] - p_recup[k] - re_power_arr[k]
                    soc = 1.0
                    soc_traj[k] = soc
                    continue
                soc -= p_net * dt_k / (cap * S_PER_H)
            re_power_arr[k] = re_power
            p_net_eff[k] = p_net
            soc_traj[k] = soc
        if stranded:
            n = steps_done
            dts = dts[:n].copy()
            if trunc_dt is not None:
                dts[-1] = trunc_dt
            bounds = bounds[: n + 1]
            v_bar, a_bar = v_bar[:n], a_bar[:n]
            p_trac, p_recup = p_trac[:n], p_recup[:n]
            p_consume = p_consume[:n]
            re_power_arr, p_net_eff = re_power_arr[:n], p_net_eff[:n]
            soc_traj = soc_traj[:n]

    hours = dts / S_PER_H
    consumed_wh = float(np.dot(p_consume, hours))
    recuperated_wh = float(np.dot(p_recup, hours))
    range_extended_wh = float(np.dot(re_power_arr, hours))
    battery_delta_wh = float(-np.dot(p_net_eff, hours))
    fuel_l = 0.0
    if re is not None:
        fuel_l = re.specific_fuel_l_per_kwh * range_extended_wh / 1000.0

    if stranded:
        duration = float(bounds[-2] + dts[-1]) if n > 1 else float(dts[-1])
        distance = float(pos[n - 1] + v_bar[n - 1] * dts[-1])
        exit_velocity = 0.0
    else:
        duration = total
        distance = float(pos[-1])
        exit_velocity = profile.v_out

    trace = DriveTrace(
        time_s=bounds[:-1].copy(),
        dt_s=dts,
        v_mps=v_bar,
        a_mps2=a_bar,
        gradient=edge.gradient,
        p_traction_w=p_trac,
        p_battery_w=p_net_eff,
        p_recup_w=p_recup,
        p_re_w=re_power_arr,
        soc=soc_traj,
    )

    final_soc = float(soc_traj[-1]) if n > 0 else soc0
    state.soc = final_soc
    state.velocity = exit_velocity
    state.edge_id = edge.edge_id
    state.offset_m = distance
    state.range_extender_on = flag
    state.cumulative.consumed_wh += consumed_wh
    state.cumulative.recuperated_wh += recuperated_wh
    state.cumulative.range_extended_wh += range_extended_wh
    state.cumulative.fuel_liters += fuel_l
    state.cumulative.distance_m += distance

    return SegmentResult(
        trace=trace,
        duration_s=duration,
        distance_m=distance,
        exit_velocity=exit_velocity,
        stranded=stranded,
        consumed_wh=consumed_wh,
        recuperated_wh=recuperated_wh,
        range_extended_wh=range_extended_wh,
        fuel_l=fuel_l,
        battery_delta_wh=battery_delta_wh,
        toggles=toggles,
    )


def estimate_route_energy(net, route, params: VehicleParams, env: Environment,
                          hour: int = 0) -> float:
    """Conservative battery-energy estimate (Wh) for driving a route.

    Uses steady cruising at each edge's effective speed plus one launch from
    standstill; downhill recuperation credit is deliberately ignored so the
    estimate errs on the safe side for feasibility gates.
    """
    total_j = 0.0
    v_first = None
    for eid in route.edges:
        e = net.edges[eid]
        v = net.effective_speed(eid, hour)
        if v_first is None:
            v_first = v
        p_wheel = traction_power(v, 0.0, e.gradient, params, env)
        p_batt = params.auxiliary_power_w
        if p_wheel > 0:
            p_batt += p_wheel / params.drivetrain_efficiency
        total_j += p_batt * (e.length_m / v)
    if v_first is not None:
        total_j += 0.5 * params.mass_kg * v_first * v_first / params.drivetrain_efficiency
    return total_j / S_PER_H
