import { readFileSync } from 'fs';

/** Legacy-ASCII VTK unstructured-grid reader (quads only) and mesh renderer. */

export interface VtkGrid {
  points: Array<[number, number]>;
  quads: number[][];
  pointData: Map<string, number[]>;
  cellData: Map<string, number[]>;
}

export class VtkError extends Error {}

export function parseVtk(text: string): VtkGrid {
  const lines = text.split(/\r?\n/);
  let i = 0;
  const next = () => {
    while (i < lines.length && lines[i].trim() === '') i++;
    return lines[i++];
  };
  const points: Array<[number, number]> = [];
  const quads: number[][] = [];
  const pointData = new Map<string, number[]>();
  const cellData = new Map<string, number[]>();
  let mode: 'point' | 'cell' = 'point';
  let npoints = 0;
  let ncells = 0;

  while (i < lines.length) {
    const line = next();
    if (line === undefined) break;
    const t = line.trim();
    if (t.startsWith('POINTS')) {
      npoints = parseInt(t.split(/\s+/)[1], 10);
      for (let k = 0; k < npoints; k++) {
        const [x, y] = next().trim().split(/\s+/).map(Number);
        points.push([x, y]);
      }
    } else if (t.startsWith('CELLS')) {
      ncells = parseInt(t.split(/\s+/)[1], 10);
      for (let k = 0; k < ncells; k++) {
        const parts = next().trim().split(/\s+/).map(Number);
        if (parts[0] !== 4) throw new VtkError('only 4-node quads are supported');
        quads.push(parts.slice(1));
      }
    } else if (t.startsWith('POINT_DATA')) {
      mode = 'point';
    } else if (t.startsWith('CELL_DATA')) {
      mode = 'cell';
    } else if (t.startsWith('SCALARS')) {
      const name = t.split(/\s+/)[1];
      next(); // LOOKUP_TABLE
      const n = mode === 'point' ? npoints : ncells;
      const vals: number[] = [];
      for (let k = 0; k < n; k++) vals.push(Number(next()));
      (mode === 'point' ? pointData : cellData).set(name, vals);
    }
  }
  if (points.length === 0 || quads.length === 0) {
    throw new VtkError('no grid found in VTK file');
  }
  return { points, quads, pointData, cellData };
}

function colorScale(t: number): string {
  // blue -> white -> red
  const clamp = (v: number) => Math.max(0, Math.min(255, Math.round(v)));
  const r = clamp(t < 0.5 ? 510 * t : 255);
  const b = clamp(t < 0.5 ? 255 : 510 * (1 - t));
  const g = clamp(255 - 255 * Math.abs(2 * t - 1));
  return `rgb(${r},${g},${b})`;
}

export function renderMesh(grid: VtkGrid, field?: string, width = 720): string {
  const xs = grid.points.map((p) => p[0]);
  const ys = grid.points.map((p) => p[1]);
  const x0 = Math.min(...xs);
  const x1 = Math.max(...xs);
  const y0 = Math.min(...ys);
  const y1 = Math.max(...ys);
  const margin = 12;
  const scale = (width - 2 * margin) / (x1 - x0);
  const height = Math.round((y1 - y0) * scale) + 2 * margin;
  const sx = (x: number) => margin + (x - x0) * scale;
  const sy = (y: number) => height - margin - (y - y0) * scale;

  let values: number[] | undefined;
  let perCell = false;
  if (field) {
    if (grid.cellData.has(field)) {
      values = grid.cellData.get(field);
      perCell = true;
    } else if (grid.pointData.has(field)) {
      values = grid.pointData.get(field);
    } else {
      throw new VtkError(`field '${field}' not present in the file`);
    }
  }
  let lo = 0;
  let hi = 1;
  if (values) {
    const finite = values.filter(Number.isFinite);
    lo = Math.min(...finite);
    hi = Math.max(...finite);
    if (hi <= lo) hi = lo + 1;
  }

  const polys: string[] = [];
  grid.quads.forEach((q, ci) => {
    const pts = q.map((p) => `${sx(grid.points[p][0]).toFixed(2)},${sy(grid.points[p][1]).toFixed(2)}`).join(' ');
    let fill = 'none';
    if (values) {
      const v = perCell ? values[ci]
        : q.reduce((a, p) => a + values![p], 0) / q.length;
      fill = colorScale((v - lo) / (hi - lo));
    }
    polys.push(`<polygon points="${pts}" fill="${fill}" stroke="#333" stroke-width="0.5"/>`);
  });
  return `<?xml version="1.0" encoding="UTF-8"?>\n` +
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" viewBox="0 0 ${width} ${height}">\n` +
    `<rect width="${width}" height="${height}" fill="white"/>\n${polys.join('\n')}\n</svg>\n`;
}

export function meshFigureFromFile(path: string, field?: string): string {
  let text: string;
  try {
    text = readFileSync(path, 'utf8');
  } catch (err) {
    throw new VtkError(`cannot read ${path}: ${(err as Error).message}`);
  }
  return renderMesh(parseVtk(text), field);
}
