"""Run artifacts: CSV stats, legacy ASCII VTK snapshots, INI configuration."""

from __future__ import annotations

import configparser
import csv
import math

import numpy as np

CSV_FIELDS = ["step", "cells", "dofs", "l1_error", "wall_s", "nl_iters", "converged"]


def write_csv_header(f):
    f.write(",".join(CSV_FIELDS) + "\n")
    f.flush()


def write_csv_row(f, rec):
    row = [str(rec.step), str(rec.cells), str(rec.dofs), repr(float(rec.l1_error)),
           repr(float(rec.wall_s)), str(rec.nl_iters),
           "true" if rec.converged else "false"]
    f.write(",".join(row) + "\n")
    f.flush()


def read_run_csv(path):
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append({
                "step": int(row["step"]),
                "cells": int(row["cells"]),
                "dofs": int(row["dofs"]),
                "l1_error": float(row["l1_error"]),
                "wall_s": float(row["wall_s"]),
                "nl_iters": int(row["nl_iters"]),
                "converged": row["converged"] == "true",
            })
    return out


def write_vtk(path, space, U, point_fields=None, cell_fields=None, title="snapshot"):
    """Legacy ASCII unstructured-grid snapshot.

    Hanging nodes are emitted as independent points carrying their
    constrained values; cells are 4-node quads.
    """
    U = np.asarray(U).reshape(space.num_nodes, -1)
    m = U.shape[1]
    nv = space.num_nodes + space.num_hanging
    coords = np.vstack([space.nodes, space.hanging_coords.reshape(-1, 2)])
    values = space.vertex_values(U)
    ncell = len(space.mesh.cells)

    point_fields = dict(point_fields or {})
    cell_fields = dict(cell_fields or {})

    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {nv} double\n")
        for x, y in coords:
            f.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        f.write(f"CELLS {ncell} {5 * ncell}\n")
        for ci in range(ncell):
            n = space.cell_nodes[ci]
            f.write(f"4 {n[0]} {n[1]} {n[3]} {n[2]}\n")
        f.write(f"CELL_TYPES {ncell}\n")
        for _ in range(ncell):
            f.write("9\n")
        f.write(f"POINT_DATA {nv}\n")
        comp_names = ["u"] if m == 1 else ["rho", "mom_x", "mom_y", "energy"]
        for b in range(m):
            f.write(f"SCALARS {comp_names[b]} double 1\nLOOKUP_TABLE default\n")
            for v in values[:, b]:
                f.write(f"{float(v)!r}\n")
        for name, data in point_fields.items():
            data = np.asarray(data).reshape(-1)
            if len(data) == space.num_nodes:
                data = np.concatenate([data, np.zeros(space.num_hanging)])
            f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in data:
                f.write(f"{float(v)!r}\n")
        if cell_fields:
            f.write(f"CELL_DATA {ncell}\n")
            for name, data in cell_fields.items():
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in np.asarray(data).reshape(-1):
                    f.write(f"{float(v)!r}\n")


class ConfigError(ValueError):
    pass


RUN_KEYS = {
    "case": str,
    "scheme": str,
    "variant": str,
    "q": float,
    "indicator": str,
    "max_cells": int,
    "max_steps": int,
    "uniform": str,
    "out": str,
    "seed": int,
}


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        read = parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    out = {}
    if parser.has_section("run"):
        for key, conv in RUN_KEYS.items():
            if parser.has_option("run", key):
                try:
                    out[key] = conv(parser.get("run", key))
                except ValueError as err:
                    raise ConfigError(f"bad value for {key}: {err}") from err
    return out


def parse_uniform(spec: str):
    """Doubling sweep 'A..B' -> [A, 2A, ..., B]."""
    try:
        lo, hi = spec.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError as err:
        raise ConfigError(f"bad uniform sweep {spec!r}; expected like 16..256") from err
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad uniform sweep bounds {spec!r}")
    sizes = []
    n = lo
    while n <= hi:
        sizes.append(n)
        n *= 2
    return sizes
