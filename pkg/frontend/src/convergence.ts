import { basename } from 'path';
import { readRunCsv, RunRow } from './csv';
import { rateFromCells } from './fit';
import { PanelSpec, renderFigure, Series } from './svg';

export interface CsvSpec {
  path: string;
  label?: string;
}

function seriesFrom(rows: RunRow[], label: string, xKey: 'wall_s' | 'cells'): Series {
  const pick = rows.filter((r) => r.l1_error > 0 && Number.isFinite(r.l1_error));
  return {
    label,
    x: pick.map((r) => (xKey === 'wall_s' ? r.wall_s : r.cells)),
    y: pick.map((r) => r.l1_error),
  };
}

/** Annotated convergence rate for one run (log error vs log cells, last 4 points). */
export function runRate(rows: RunRow[], tail = 4): number {
  const pick = rows.filter((r) => r.l1_error > 0 && Number.isFinite(r.l1_error));
  return rateFromCells(pick.map((r) => r.cells), pick.map((r) => r.l1_error), tail);
}

export function formatRate(rate: number): string {
  return `rate ≈ ${rate.toFixed(2)}`;
}

export function buildConvergenceFigure(specs: CsvSpec[]): string {
  if (specs.length === 0) {
    throw new Error('need at least one --csv series');
  }
  const loaded = specs.map((s) => ({
    label: s.label ?? basename(s.path).replace(/\.csv$/, ''),
    rows: readRunCsv(s.path),
  }));
  const timePanel: PanelSpec = {
    title: 'L1 error vs wall time',
    xLabel: 'wall time [s]',
    yLabel: 'L1 error',
    series: loaded.map((l) => seriesFrom(l.rows, l.label, 'wall_s')),
  };
  const cellPanel: PanelSpec = {
    title: 'L1 error vs cells',
    xLabel: 'cells',
    yLabel: 'L1 error',
    series: loaded.map((l) => {
      const s = seriesFrom(l.rows, l.label, 'cells');
      s.annotation = formatRate(runRate(l.rows));
      return s;
    }),
  };
  return renderFigure([timePanel, cellPanel]);
}
