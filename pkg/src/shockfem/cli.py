"""Command-line entry point: benchmark runs with CSV/VTK artifacts."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .amr import AmrConfig, amr_loop
from .cases import fit_rate, make_case, uniform_convergence_sweep
from .io import ConfigError, load_config, parse_uniform, write_csv_header, write_csv_row, write_vtk
from .solver import NonlinearConfig, assemble_once
from .stabilization import SHARP, SMOOTH, system_detector

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_CONFIG = 2


def build_parser():
    p = argparse.ArgumentParser(prog="shockfem",
                                description="Adaptive monotone FE solver for "
                                            "scalar transport and 2D Euler")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a benchmark case")
    run.add_argument("--config", help="INI file with a [run] section")
    run.add_argument("--case", help="benchmark name")
    run.add_argument("--scheme", choices=["low", "high"])
    run.add_argument("--variant", choices=["sharp", "smooth"])
    run.add_argument("--q", type=float)
    run.add_argument("--indicator", choices=["kelly", "graph"])
    run.add_argument("--max-cells", type=int, dest="max_cells")
    run.add_argument("--max-steps", type=int, dest="max_steps")
    run.add_argument("--uniform", help="uniform sweep like 16..256 instead of adapting")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", type=int, help="seed for randomized checks")
    run.add_argument("--no-vtk", action="store_true", help="skip field snapshots")
    return p


def _settings(args):
    cfg = {}
    if args.config:
        cfg.update(load_config(args.config))
    for key in ("case", "scheme", "variant", "q", "indicator", "max_cells",
                "max_steps", "uniform", "out", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("scheme", "high")
    cfg.setdefault("variant", "smooth")
    cfg.setdefault("q", 2.0)
    cfg.setdefault("indicator", "graph")
    cfg.setdefault("out", "out")
    if "case" not in cfg:
        raise ConfigError("no case selected (flag --case or config key 'case')")
    return cfg


def _snapshot(outdir, rec, case, step, skip):
    if skip or rec.space is None:
        return
    prob = case.make_problem(rec.space)
    if case.scheme == "low":
        alpha = np.ones(rec.space.num_nodes)
    else:
        _, _, _, binfo = assemble_once(prob, rec.U)
        field = system_detector(rec.space, rec.U.reshape(rec.space.num_nodes, -1),
                                case.tracked, prob.params, case.variant,
                                zero_mask=prob.detector_zero_mask(binfo))
        alpha = field.alpha
    cell_fields = {"indicator": rec.indicator} if rec.indicator is not None else {}
    write_vtk(outdir / f"step_{step:03d}.vtk", rec.space, rec.U,
              point_fields={"alpha": alpha}, cell_fields=cell_fields,
              title=f"{case.name} step {step}")


def cmd_run(args) -> int:
    try:
        cfg = _settings(args)
        case = make_case(cfg["case"])
    except (ConfigError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    case.scheme = cfg["scheme"]
    case.variant = SMOOTH if cfg["variant"] == "smooth" else SHARP
    case.q = float(cfg["q"])

    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    solver_cfg = NonlinearConfig()
    csv_path = outdir / "run.csv"

    ok = True
    with open(csv_path, "w") as f:
        write_csv_header(f)

        def on_step(rec):
            nonlocal ok
            write_csv_row(f, rec)
            _snapshot(outdir, rec, case, rec.step, args.no_vtk)
            if not rec.converged:
                ok = False
            print(f"step {rec.step}: cells={rec.cells} dofs={rec.dofs} "
                  f"l1={rec.l1_error:.6e} wall={rec.wall_s:.2f}s "
                  f"iters={rec.nl_iters} converged={rec.converged}")

        try:
            if cfg.get("uniform"):
                sizes = parse_uniform(str(cfg["uniform"]))
                records = uniform_convergence_sweep(case, sizes, solver_cfg,
                                                    on_step=on_step)
                errs = [r.l1_error for r in records]
                cells = [r.cells for r in records]
                if case.has_exact and len(records) > 1:
                    rate = fit_rate(cells, errs)
                    print("cells errors:", list(zip(cells, errs)))
                    print(f"fitted L1 rate: {rate:.3f}")
            else:
                amr_cfg = AmrConfig(
                    indicator=cfg["indicator"],
                    max_cells=int(cfg.get("max_cells", case.default_max_cells())),
                    max_steps=int(cfg.get("max_steps", 30)),
                    beta=case.tracked[0])
                records = amr_loop(case, amr_cfg, solver_cfg, on_step=on_step)
        except ConfigError as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_CONFIG

    print(f"artifacts in {outdir}")
    return EXIT_OK if ok else EXIT_SOLVER


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
