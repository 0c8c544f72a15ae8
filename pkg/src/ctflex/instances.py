"""Synthetic test systems.

The shipped 12-node feeder follows the published device placements (PV and
storage at nodes 5/9/12, loads at 3/5/7/8/9/10/12, SVCs at 2 and 6, a
capacitor bank at 6, an SOP between 3 and 6, a regulator between 3 and 4,
and an OLTC at the TDI) with synthetic impedances and profiles: the exact
line data and measured curves live in an external supplement, so profiles
of the same shape (rising evening load, midday PV bell) are substituted.

The small instances are oracle fixtures: a hand-solvable radial toy whose
per-direction optimum is affine in time, and an origin-symmetric
ESS-plus-SOP rectangle for geometry tests.

Run ``python -m ctflex.instances --out DIR`` to write them as model files.
"""

from __future__ import annotations

import math

import numpy as np

from .netmodel import (
    Branch, CapacitorBank, EssDevice, Horizon, LoadPoint, NetworkModel,
    Profile, PvUnit, SopDevice, SvcDevice,
)

__all__ = ["twelve_node", "two_node", "three_node", "ess_symmetric"]

HOUR = 3600.0
PERIOD = 900.0

PV_BREAKS = (0.95 ** 2, 0.98 ** 2, 1.02 ** 2, 1.05 ** 2)


def _sampled(fn, samples_per_period: int = 16, horizon: float = HOUR,
             period: float = PERIOD) -> Profile:
    n = int(horizon / period) * samples_per_period
    t = np.linspace(0.0, horizon, n + 1)
    return Profile(tuple(t), tuple(float(fn(tt / horizon)) for tt in t))


def _load_shape(scale: float):
    return lambda tau: scale * (0.9 + 0.25 * tau + 0.05 * math.sin(2 * math.pi * tau))


def _pv_shape(scale: float):
    return lambda tau: scale * (0.75 + 0.25 * math.sin(math.pi * tau))


def twelve_node(*, sop: bool = True, ess: bool = True, pv_scale: float = 1.0,
                alpha: float = 0.1, sigma_pv2: float = 0.005,
                sigma_load2: float = 0.001) -> NetworkModel:
    """12-node radial feeder behind an OLTC-coupled TDI.

    ``pv_scale`` scales the PV forecast; zero removes the PV units
    entirely (a zero forecast cannot carry the chance margin).  The SOP
    and ESS toggles support the with/without comparisons.
    """
    branches = [Branch(0, 1, 0.003, 0.010, kind="oltc",
                       taps=(0.95, 0.975, 1.0, 1.025, 1.05))]
    plain = dict(r=0.008, x=0.008)
    chain = []
    for child in range(2, 13):
        chain.append((child - 1, child))
    for fr, to in chain:
        if (fr, to) == (3, 4):
            branches.append(Branch(fr, to, 0.004, 0.006, kind="regulator",
                                   tau_min=0.97, tau_max=1.03))
        else:
            branches.append(Branch(fr, to, **plain))

    load_base = {3: 0.12, 5: 0.10, 7: 0.08, 8: 0.10, 9: 0.12, 10: 0.08,
                 12: 0.10}
    loads = tuple(
        LoadPoint(node, _sampled(_load_shape(base)), phi=0.33,
                  sigma2=sigma_load2)
        for node, base in load_base.items()
    )
    pv_units = ()
    if pv_scale > 0.0:
        pv_units = tuple(
            PvUnit(node, s_max=0.35, q_max=0.25, u_breaks=PV_BREAKS,
                   forecast=_sampled(_pv_shape(0.30 * pv_scale)),
                   sigma2=sigma_pv2)
            for node in (5, 9, 12)
        )
    ess_devices = ()
    if ess:
        ess_devices = tuple(
            EssDevice(node, e_max=540.0, e_init=270.0, eta_c=0.95,
                      eta_d=0.95, p_c=0.15, p_d=0.15,
                      t_min_charge=PERIOD, t_min_discharge=PERIOD)
            for node in (5, 9, 12)
        )
    sops = (SopDevice((3, 6), s_max=0.25, p_min=-0.25, p_max=0.25),) if sop \
        else ()
    return NetworkModel(
        n_nodes=13,
        branches=tuple(branches),
        horizon=Horizon(0.0, HOUR, PERIOD),
        pv_units=pv_units,
        loads=loads,
        ess_devices=ess_devices,
        sop_devices=sops,
        svc_devices=(SvcDevice(2, slope=5.0, u_ref=1.0),
                     SvcDevice(6, slope=5.0, u_ref=1.0)),
        cap_banks=(CapacitorBank(6, steps=(0.0, 0.05, 0.10)),),
        alpha=alpha,
        base_mva=10.0,
        base_kv=12.66,
    )


def two_node() -> NetworkModel:
    """Minimal valid model: one branch, one constant unity-power-factor
    load, so the import direction is feasible and every other sampled
    direction is a gap."""
    return NetworkModel(
        n_nodes=2,
        branches=(Branch(0, 1, 0.01, 0.01),),
        horizon=Horizon(0.0, 2 * PERIOD, PERIOD),
        loads=(LoadPoint(1, _sampled(lambda tau: 0.5, horizon=2 * PERIOD),
                         phi=0.0),),
        alpha=0.5,
    )


def three_node(ramping: bool = True) -> NetworkModel:
    """Hand-solvable LP toy: pure-active load at 1, curtailable PV at 2.

    With negligible impedance and no reactive devices the per-direction
    optimum has the closed form S0(t) = load(t) at theta = 0,
    S0(t) = forecast(t) - load(t) at theta = pi, and A(pi/2) = 0; the load
    ramp keeps the optimum affine in t.
    """
    lo, hi = (0.4, 0.6) if ramping else (0.5, 0.5)
    load = _sampled(lambda tau: lo + (hi - lo) * tau)
    forecast = _sampled(lambda tau: 0.7)
    return NetworkModel(
        n_nodes=3,
        branches=(Branch(0, 1, 1e-4, 1e-4), Branch(1, 2, 1e-4, 1e-4)),
        horizon=Horizon(0.0, HOUR, PERIOD),
        loads=(LoadPoint(1, load, phi=0.0),),
        pv_units=(PvUnit(2, s_max=0.9, q_max=0.0, u_breaks=PV_BREAKS,
                         forecast=forecast),),
        alpha=0.5,
    )


def ess_symmetric() -> NetworkModel:
    """Origin-symmetric rectangular region: storage sets the P range,
    SOP terminals supply the Q range, nothing else moves."""
    return NetworkModel(
        n_nodes=3,
        branches=(Branch(0, 1, 1e-5, 1e-5), Branch(1, 2, 1e-5, 1e-5)),
        horizon=Horizon(0.0, HOUR, PERIOD),
        ess_devices=(EssDevice(1, e_max=1440.0, e_init=720.0, eta_c=1.0,
                               eta_d=1.0, p_c=0.2, p_d=0.2,
                               t_min_charge=PERIOD,
                               t_min_discharge=PERIOD),),
        sop_devices=(SopDevice((1, 2), s_max=0.3, p_min=-0.3, p_max=0.3),),
        alpha=0.5,
    )


def _main(argv=None) -> int:
    import argparse
    import os

    from .netmodel import serialize

    parser = argparse.ArgumentParser(
        description="write the bundled synthetic instances as model files")
    parser.add_argument("--out", default="instances", help="output directory")
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    for name, build in (("twelve_node", twelve_node), ("two_node", two_node),
                        ("three_node", three_node),
                        ("ess_symmetric", ess_symmetric)):
        path = os.path.join(args.out, f"{name}.json")
        serialize(build(), path)
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
