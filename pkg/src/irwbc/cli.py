"""Command-line front end: scenario files in, CSV logs and SVG plots out.

The JSON config mirrors the Scenario fields, grouped into model / surfaces /
impact_spec / controller / schedule / sim / outputs blocks.  Paths with a
``pkg:`` prefix resolve inside the installed package, so the bundled
scenarios work from any working directory.  ``compare`` runs the nominal and
impact-robust variants from the same initial state (in parallel processes
when the platform allows) and emits a machine-readable report next to the
per-variant logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import xml.etree.ElementTree as ET
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from .control import Activation
from .errors import (
    ControllerInfeasible,
    IrwbcError,
    NumericalBlowup,
    ParseError,
    PartialFailure,
    ScenarioError,
    ValidationError,
)
from .rbd import build_model
from .sensitivity import ImpactSpec
from .sim import ContactSurface, Scenario, run_scenario

logger = logging.getLogger(__name__)

_SIM_ERRORS = (ScenarioError, NumericalBlowup, ControllerInfeasible)


def _resolve_path(path: str) -> str:
    if path.startswith("pkg:"):
        return str(resources.files("irwbc").joinpath(*path[4:].split("/")))
    return path


def _check_keys(block: dict, allowed, where: str):
    extra = sorted(set(block) - set(allowed))
    if extra:
        raise ValidationError(f"{where}: unknown keys {extra}")


def _section(doc: dict, name: str) -> dict:
    if name not in doc:
        raise ValidationError(f"config is missing the '{name}' section")
    block = doc[name]
    if not isinstance(block, dict):
        raise ValidationError(f"config section '{name}' must be an object")
    return block


def _get(block: dict, key: str, where: str):
    if key not in block:
        raise ValidationError(f"{where} is missing '{key}'")
    return block[key]


def _bounds(value, where: str):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValidationError(f"{where} must be [lower, upper] or null")
    return (value[0], value[1])


def load_scenario(path: str | Path) -> tuple[Scenario, dict]:
    """Parse a scenario config file; returns (Scenario, outputs block)."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    _check_keys(doc, ("model_path", "surfaces", "impact_spec", "controller",
                      "schedule", "sim", "outputs"), f"config {path}")

    model = build_model(_resolve_path(_get(doc, "model_path", "config")))

    raw_surfaces = _get(doc, "surfaces", "config")
    if not isinstance(raw_surfaces, list) or not raw_surfaces:
        raise ValidationError("'surfaces' must be a non-empty list")
    surfaces = []
    for i, s in enumerate(raw_surfaces):
        _check_keys(s, ("point", "normal", "stiffness", "damping"),
                    f"surfaces[{i}]")
        surfaces.append(ContactSurface(
            point=_get(s, "point", f"surfaces[{i}]"),
            normal=_get(s, "normal", f"surfaces[{i}]"),
            stiffness=s.get("stiffness", 1e4),
            damping=s.get("damping", 50.0),
        ))

    spec_blk = _section(doc, "impact_spec")
    _check_keys(spec_blk, ("contact_frame", "normal", "lambda_bar",
                           "restitution"), "impact_spec")
    spec = ImpactSpec(
        contact_frame=_get(spec_blk, "contact_frame", "impact_spec"),
        normal=_get(spec_blk, "normal", "impact_spec"),
        lambda_bar=_get(spec_blk, "lambda_bar", "impact_spec"),
        restitution=spec_blk.get("restitution", 0.0),
    )

    ctrl = _section(doc, "controller")
    _check_keys(ctrl, ("mode", "ee_axes", "ee_kp", "ee_kd", "ee_weight",
                       "posture_kp", "posture_kd", "posture_weight",
                       "k_gradient", "u_bounds", "nudot_bounds", "activation"),
                "controller")
    act_blk = ctrl.get("activation")
    if act_blk is None:
        activation = Activation()
    else:
        _check_keys(act_blk, ("kind", "frame", "normal", "offset", "d_act"),
                    "controller.activation")
        activation = Activation(
            kind=act_blk.get("kind", "always"),
            frame=act_blk.get("frame"),
            normal=act_blk.get("normal"),
            offset=act_blk.get("offset", 0.0),
            d_act=act_blk.get("d_act", 0.15),
        )

    sched = _section(doc, "schedule")
    _check_keys(sched, ("q0", "q_des", "approach_pos", "push_pos",
                        "n_contacts", "settle_time", "push_time",
                        "retreat_time"), "schedule")
    sim_blk = _section(doc, "sim")
    _check_keys(sim_blk, ("dt", "duration", "window"), "sim")

    outputs = doc.get("outputs", {})
    _check_keys(outputs, ("csv", "svg", "deterministic"), "outputs")
    if outputs.get("deterministic", True) is not True:
        raise ValidationError("only deterministic (seed-free) runs are supported")

    scenario = Scenario(
        model=model,
        surfaces=tuple(surfaces),
        impact_spec=spec,
        q0=_get(sched, "q0", "schedule"),
        q_des=_get(sched, "q_des", "schedule"),
        approach_pos=_get(sched, "approach_pos", "schedule"),
        push_pos=_get(sched, "push_pos", "schedule"),
        n_contacts=int(_get(sched, "n_contacts", "schedule")),
        settle_time=float(_get(sched, "settle_time", "schedule")),
        push_time=float(_get(sched, "push_time", "schedule")),
        retreat_time=float(_get(sched, "retreat_time", "schedule")),
        dt=float(_get(sim_blk, "dt", "sim")),
        duration=float(_get(sim_blk, "duration", "sim")),
        window=float(sim_blk.get("window", 0.2)),
        mode=ctrl.get("mode", "weighted"),
        ee_axes=tuple(ctrl.get("ee_axes", ("x", "y", "z"))),
        ee_kp=float(ctrl.get("ee_kp", 25.0)),
        ee_kd=float(ctrl.get("ee_kd", 10.0)),
        ee_weight=float(ctrl.get("ee_weight", 10.0)),
        posture_kp=float(ctrl.get("posture_kp", 4.0)),
        posture_kd=float(ctrl.get("posture_kd", 2.0)),
        posture_weight=float(ctrl.get("posture_weight", 0.5)),
        k_gradient=float(ctrl.get("k_gradient", 0.0)),
        u_bounds=_bounds(ctrl.get("u_bounds"), "controller.u_bounds"),
        nudot_bounds=_bounds(ctrl.get("nudot_bounds"),
                             "controller.nudot_bounds"),
        activation=activation,
    )
    return scenario, dict(outputs)


# ------------------------------------------------------------------- outputs


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, log):
    """Stream the log to CSV, one row per grid point, 17 significant digits."""
    nq = log.q.shape[1]
    nv = log.nu.shape[1]
    m = log.u.shape[1]
    cols = (["t"]
            + [f"q_{i}" for i in range(nq)]
            + [f"nu_{i}" for i in range(nv)]
            + [f"nudot_{i}" for i in range(nv)]
            + [f"u_{i}" for i in range(m)]
            + ["H", "f_contact_n", "in_contact", "impact", "qp_status",
               "fallback"])
    with open(path, "w", newline="") as f:
        f.write(",".join(cols) + "\n")
        for k in range(len(log)):
            parts = [_fmt(log.t[k])]
            parts += [_fmt(v) for v in log.q[k]]
            parts += [_fmt(v) for v in log.nu[k]]
            parts += [_fmt(v) for v in log.nu_dot[k]]
            parts += [_fmt(v) for v in log.u[k]]
            parts += [_fmt(log.h[k]), _fmt(log.f_contact_n[k]),
                      str(int(log.in_contact[k])), str(int(log.impact[k])),
                      log.qp_status[k], str(int(log.fallback[k]))]
            f.write(",".join(parts) + "\n")


def _series_from_log(log) -> dict:
    return {
        "t": np.asarray(log.t),
        "h": np.asarray(log.h),
        "nu_norm": np.linalg.norm(log.nu, axis=1),
        "u": np.asarray(log.u),
        "in_contact": log.in_contact.astype(float),
        "impact_rows": np.flatnonzero(log.impact),
        "u_lower": log.u_lower,
        "u_upper": log.u_upper,
    }


_PANEL_W = 900
_PANEL_H = 150
_PANEL_GAP = 24
_MARGIN_L = 70
_MARGIN_R = 20
_COLORS = ("#4878a8", "#c05048")


def _panel(svg, y0, t, curves, title, hlines=(), ticks=()):
    """One framed line chart; curves = [(label, color, values)]."""
    x0, x1 = _MARGIN_L, _PANEL_W - _MARGIN_R
    y1 = y0 + _PANEL_H
    vals = [np.asarray(v, dtype=float) for _, _, v in curves]
    finite = np.concatenate([v[np.isfinite(v)] for v in vals] or [np.zeros(1)])
    hl = [h for h in hlines if np.isfinite(h)]
    lo = min([float(finite.min(initial=0.0))] + hl)
    hi = max([float(finite.max(initial=0.0))] + hl)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    t = np.asarray(t, dtype=float)
    t_span = float(t[-1] - t[0]) or 1.0

    def px(tv):
        return x0 + (tv - t[0]) * (x1 - x0) / t_span

    def py(v):
        return y1 - (v - lo) * (y1 - y0) / (hi - lo)

    ET.SubElement(svg, "rect", x=str(x0), y=str(y0),
                  width=str(x1 - x0), height=str(_PANEL_H),
                  fill="none", stroke="#aaaaaa")
    for h in hl:
        yy = f"{py(h):.2f}"
        ET.SubElement(svg, "line", x1=str(x0), y1=yy, x2=str(x1), y2=yy,
                      stroke="#bbbbbb", **{"stroke-dasharray": "5,4"})
    for tick in ticks:
        xx = f"{px(tick):.2f}"
        ET.SubElement(svg, "line", x1=xx, y1=str(y0), x2=xx, y2=str(y1),
                      stroke="#333333", **{"stroke-width": "0.6"})
    stride = max(1, t.shape[0] // 2000)
    for (label, color, v) in curves:
        v = np.asarray(v, dtype=float)
        pts = " ".join(f"{px(tv):.2f},{py(vv):.2f}"
                       for tv, vv in zip(t[::stride], v[::stride]))
        ET.SubElement(svg, "polyline", points=pts, fill="none",
                      stroke=color, **{"stroke-width": "1.2"})
    title_el = ET.SubElement(svg, "text", x=str(x0 + 6), y=str(y0 + 14),
                             **{"font-size": "12", "font-family": "monospace"})
    title_el.text = title
    for i, (label, color, _) in enumerate(curves):
        if not label:
            continue
        leg = ET.SubElement(svg, "text", x=str(x1 - 90 - 80 * i),
                            y=str(y0 + 14), fill=color,
                            **{"font-size": "11", "font-family": "monospace"})
        leg.text = label
    for v, yy in ((hi, y0 + 12), (lo, y1 - 2)):
        lab = ET.SubElement(svg, "text", x="4", y=str(yy),
                            **{"font-size": "10", "font-family": "monospace"})
        lab.text = f"{v:.3g}"
    return y1 + _PANEL_GAP


def write_svg(path, runs: list[tuple[str, dict]], heading: str):
    """Time-series panels (H, velocity norm, inputs, contact) for 1-2 runs."""
    m = runs[0][1]["u"].shape[1]
    n_panels = 3 + m
    height = 40 + n_panels * (_PANEL_H + _PANEL_GAP)
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(_PANEL_W), height=str(height),
                     viewBox=f"0 0 {_PANEL_W} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(_PANEL_W),
                  height=str(height), fill="#ffffff")
    head = ET.SubElement(svg, "text", x=str(_MARGIN_L), y="20",
                         **{"font-size": "14", "font-family": "monospace"})
    head.text = heading
    t = runs[0][1]["t"]
    y = 34
    curves = [(name, _COLORS[i % 2], s["h"]) for i, (name, s) in enumerate(runs)]
    y = _panel(svg, y, t, curves, "H")
    curves = [(name, _COLORS[i % 2], s["nu_norm"])
              for i, (name, s) in enumerate(runs)]
    y = _panel(svg, y, t, curves, "|nu|")
    ref = runs[0][1]
    for j in range(m):
        hlines = []
        for b in (ref["u_lower"], ref["u_upper"]):
            if b is not None:
                hlines.append(float(b[j]))
        curves = [(name, _COLORS[i % 2], s["u"][:, j])
                  for i, (name, s) in enumerate(runs)]
        y = _panel(svg, y, t, curves, f"u_{j}", hlines=hlines)
    ticks = np.concatenate([t[s["impact_rows"]] for _, s in runs]) \
        if runs else np.zeros(0)
    curves = [(name, _COLORS[i % 2], s["in_contact"])
              for i, (name, s) in enumerate(runs)]
    _panel(svg, y, t, curves, "contact / impact", ticks=ticks)
    ET.ElementTree(svg).write(path, encoding="unicode", xml_declaration=False)


# ------------------------------------------------------------------ commands


def _worker(config_path: str, variant: str, csv_path: str) -> dict:
    """Run one variant end to end; sim failures come back as data."""
    scenario, _ = load_scenario(config_path)
    try:
        log, met = run_scenario(scenario, variant)
    except _SIM_ERRORS as exc:
        return {"variant": variant, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}
    write_csv(csv_path, log)
    rows = [int(k) for k in np.flatnonzero(log.impact)]
    return {
        "variant": variant,
        "status": "ok",
        "csv": str(csv_path),
        "metrics": met.to_dict(),
        "impact_times": [float(log.t[k]) for k in rows],
        "h_at_impacts": [float(log.h[k]) for k in rows],
        "series": _series_from_log(log),
    }


def _cmd_run(args) -> int:
    config_path = _resolve_path(args.config)
    try:
        scenario, outputs = load_scenario(config_path)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, IrwbcError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    stem = Path(config_path).stem
    csv_path = args.csv or outputs.get("csv") or f"{stem}-{args.variant}.csv"
    svg_path = args.svg or outputs.get("svg") or f"{stem}-{args.variant}.svg"
    try:
        log, met = run_scenario(scenario, args.variant)
    except _SIM_ERRORS as exc:
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    write_csv(csv_path, log)
    write_svg(svg_path, [(args.variant, _series_from_log(log))],
              f"{stem} [{args.variant}]")
    logger.info("run complete: %s -> %s, %s", args.config, csv_path, svg_path)
    print(json.dumps({"variant": args.variant, **met.to_dict()}))
    return 0


def _run_both(config_path: str, csv_paths: dict) -> list[dict]:
    jobs = [(config_path, v, csv_paths[v]) for v in ("nominal", "robust")]
    try:
        with ProcessPoolExecutor(max_workers=2) as pool:
            futures = [pool.submit(_worker, *j) for j in jobs]
            return [f.result() for f in futures]
    except (OSError, ImportError) as exc:  # platforms without process pools
        logger.info("parallel compare unavailable (%s); running serially", exc)
        return [_worker(*j) for j in jobs]


def _cmd_compare(args) -> int:
    config_path = _resolve_path(args.config)
    try:
        # parse eagerly so config mistakes fail here, not inside the pool
        _, outputs = load_scenario(config_path)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, IrwbcError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = Path(outputs.get("csv", "")).stem or Path(config_path).stem
    csv_paths = {v: str(out_dir / f"{base}-{v}.csv")
                 for v in ("nominal", "robust")}

    results = {r["variant"]: r for r in _run_both(str(config_path), csv_paths)}

    report = {"config": str(args.config), "variants": {}}
    ok = []
    for v in ("nominal", "robust"):
        r = dict(results[v])
        r.pop("series", None)
        report["variants"][v] = r
        if results[v]["status"] == "ok":
            ok.append(v)
    if len(ok) == 2:
        qn = results["nominal"]["metrics"]["q_total_impact"]
        qr = results["robust"]["metrics"]["q_total_impact"]
        report["reduction_percent"] = (
            100.0 * (1.0 - qr / qn) if qn > 0 else None)
        report["saturation_delta"] = (
            results["nominal"]["metrics"]["saturation_steps"]
            - results["robust"]["metrics"]["saturation_steps"])
        report["h_pairs"] = [
            [hn, hr] for hn, hr in zip(results["nominal"]["h_at_impacts"],
                                       results["robust"]["h_at_impacts"])]
    else:
        report["reduction_percent"] = None
        report["saturation_delta"] = None
        report["h_pairs"] = []

    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")

    plots = [(v, results[v]["series"]) for v in ok]
    if plots:
        write_svg(str(out_dir / f"{base}-compare.svg"), plots,
                  f"{base} nominal vs robust")

    print(json.dumps({
        "reduction_percent": report["reduction_percent"],
        "saturation_delta": report["saturation_delta"],
        "statuses": {v: results[v]["status"] for v in ("nominal", "robust")},
        "report": str(report_path),
    }))
    if len(ok) < 2:
        failed = [v for v in ("nominal", "robust") if v not in ok]
        detail = "; ".join(f"{v}: {results[v]['error']}" for v in failed)
        exc = PartialFailure(detail) if ok else IrwbcError(detail)
        print(f"simulation error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    logger.info("compare complete: %s -> %s", args.config, out_dir)
    return 0


def _setup_logging():
    level = os.environ.get("IRWBC_LOG", "").strip().lower()
    if level in ("debug", "info"):
        logging.basicConfig(
            level=getattr(logging, level.upper()),
            format="%(levelname)s %(name)s: %(message)s",
        )


def main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="irwbc",
        description="Impact-robust whole-body control scenario runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one controller variant")
    p_run.add_argument("--config", required=True, help="scenario JSON path")
    p_run.add_argument("--variant", choices=("nominal", "robust"),
                       default="nominal")
    p_run.add_argument("--csv", help="override CSV output path")
    p_run.add_argument("--svg", help="override SVG output path")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare",
                           help="run nominal and robust, emit a report")
    p_cmp.add_argument("--config", required=True, help="scenario JSON path")
    p_cmp.add_argument("--out", default=".", help="output directory")
    p_cmp.set_defaults(func=_cmd_compare)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
