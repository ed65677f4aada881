import { readFileSync } from 'fs';

export interface RunRow {
  step: number;
  cells: number;
  dofs: number;
  l1_error: number;
  wall_s: number;
  nl_iters: number;
  converged: boolean;
}

export const REQUIRED_COLUMNS = [
  'step', 'cells', 'dofs', 'l1_error', 'wall_s', 'nl_iters', 'converged',
];

export class CsvError extends Error {}

/** Parse a solver run CSV (fixed schema, no quoting needed). */
export function parseRunCsv(text: string, name = 'csv'): RunRow[] {
  const lines = text.split(/\r?\n/).filter((l) => l.trim().length > 0);
  if (lines.length === 0) {
    throw new CsvError(`${name}: file is empty`);
  }
  const header = lines[0].split(',').map((h) => h.trim());
  for (const col of REQUIRED_COLUMNS) {
    if (!header.includes(col)) {
      throw new CsvError(`${name}: missing column '${col}' (found: ${header.join(', ')})`);
    }
  }
  const idx = new Map(header.map((h, i) => [h, i]));
  const rows: RunRow[] = [];
  for (let k = 1; k < lines.length; k++) {
    const parts = lines[k].split(',');
    if (parts.length < header.length) {
      throw new CsvError(`${name}: row ${k} has ${parts.length} fields, expected ${header.length}`);
    }
    const get = (col: string) => parts[idx.get(col)!].trim();
    const num = (col: string) => {
      const v = Number(get(col));
      if (Number.isNaN(v) && get(col).toLowerCase() !== 'nan') {
        throw new CsvError(`${name}: row ${k}: bad number for '${col}': ${get(col)}`);
      }
      return v;
    };
    rows.push({
      step: num('step'),
      cells: num('cells'),
      dofs: num('dofs'),
      l1_error: num('l1_error'),
      wall_s: num('wall_s'),
      nl_iters: num('nl_iters'),
      converged: get('converged') === 'true',
    });
  }
  if (rows.length === 0) {
    throw new CsvError(`${name}: no data rows`);
  }
  return rows;
}

export function readRunCsv(path: string): RunRow[] {
  let text: string;
  try {
    text = readFileSync(path, 'utf8');
  } catch (err) {
    throw new CsvError(`cannot read ${path}: ${(err as Error).message}`);
  }
  return parseRunCsv(text, path);
}
