import numpy as np
import pytest

from shockfem.amr import AmrRecord
from shockfem.cli import main
from shockfem.fespace import build_space
from shockfem.io import (
    ConfigError,
    load_config,
    parse_uniform,
    read_run_csv,
    write_csv_header,
    write_csv_row,
    write_vtk,
)
from shockfem.mesh import KEEP, REFINE, Rectangle, adapt, new_uniform


def test_csv_round_trip(tmp_path):
    recs = [
        AmrRecord(step=0, cells=256, dofs=289, l1_error=0.123456789012345,
                  wall_s=1.5, nl_iters=12, converged=True),
        AmrRecord(step=1, cells=475, dofs=540, l1_error=float("nan"),
                  wall_s=2.25, nl_iters=34, converged=False),
    ]
    path = tmp_path / "run.csv"
    with open(path, "w") as f:
        write_csv_header(f)
        for r in recs:
            write_csv_row(f, r)
    back = read_run_csv(path)
    assert len(back) == 2
    assert back[0]["l1_error"] == recs[0].l1_error
    assert np.isnan(back[1]["l1_error"])
    assert back[0]["converged"] and not back[1]["converged"]
    assert [r["cells"] for r in back] == [256, 475]


def test_vtk_snapshot_counts(tmp_path):
    mesh = new_uniform(2, 2, Rectangle(0.0, 0.0, 1.0, 1.0))
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    space = build_space(mesh)
    u = space.nodes[:, 0].copy()
    path = tmp_path / "snap.vtk"
    write_vtk(path, space, u, point_fields={"alpha": np.zeros(space.num_nodes)},
              cell_fields={"indicator": np.arange(len(mesh.cells), dtype=float)})
    text = path.read_text().splitlines()
    nv = space.num_nodes + space.num_hanging
    assert f"POINTS {nv} double" in text
    assert f"CELLS {len(mesh.cells)} {5 * len(mesh.cells)}" in text
    assert text.count("9") >= len(mesh.cells)
    # hanging points carry interpolated values
    start = text.index("SCALARS u double 1") + 2
    vals = [float(v) for v in text[start:start + nv]]
    assert vals[space.num_nodes:] == pytest.approx(
        list(space.hanging_coords[:, 0]), abs=1e-14)


def test_parse_uniform():
    assert parse_uniform("16..256") == [16, 32, 64, 128, 256]
    assert parse_uniform("8..8") == [8]
    with pytest.raises(ConfigError):
        parse_uniform("abc")
    with pytest.raises(ConfigError):
        parse_uniform("32..16")


def test_load_config_and_override(tmp_path):
    cfg_file = tmp_path / "run.ini"
    cfg_file.write_text("[run]\ncase = linear_discontinuity\nscheme = low\nq = 4\n")
    cfg = load_config(cfg_file)
    assert cfg == {"case": "linear_discontinuity", "scheme": "low", "q": 4.0}
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nq = not_a_number\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_cli_unknown_case_exits_2(tmp_path):
    code = main(["run", "--case", "not_a_case", "--out", str(tmp_path)])
    assert code == 2


def test_cli_missing_case_exits_2(tmp_path):
    code = main(["run", "--out", str(tmp_path)])
    assert code == 2


def test_cli_low_order_amr_run(tmp_path):
    out = tmp_path / "artifacts"
    code = main(["run", "--case", "linear_discontinuity", "--scheme", "low",
                 "--indicator", "graph", "--max-cells", "700", "--max-steps", "2",
                 "--out", str(out)])
    assert code == 0
    rows = read_run_csv(out / "run.csv")
    assert len(rows) >= 2
    cells = [r["cells"] for r in rows]
    assert cells == sorted(cells)
    assert all(r["converged"] for r in rows)
    assert (out / "step_000.vtk").exists()


def test_cli_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "run.ini"
    cfg_file.write_text(
        "[run]\ncase = linear_discontinuity\nscheme = low\nmax_cells = 600\n"
        "max_steps = 5\nindicator = kelly\n")
    out = tmp_path / "artifacts"
    # flag overrides config: only 1 step
    code = main(["run", "--config", str(cfg_file), "--max-steps", "1",
                 "--out", str(out), "--no-vtk"])
    assert code == 0
    rows = read_run_csv(out / "run.csv")
    assert len(rows) == 2  # initial solve + one adapted solve


def test_cli_uniform_sweep(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main(["run", "--case", "scalar_convergence", "--scheme", "low",
                 "--uniform", "4..8", "--out", str(out), "--no-vtk"])
    assert code == 0
    rows = read_run_csv(out / "run.csv")
    assert [r["cells"] for r in rows] == [16, 64]
    assert rows[1]["l1_error"] < rows[0]["l1_error"]
    assert "fitted L1 rate" in capsys.readouterr().out
