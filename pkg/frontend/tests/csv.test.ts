import { describe, expect, it } from 'vitest';
import { join } from 'path';
import { CsvError, parseRunCsv, readRunCsv } from '../src/csv';

const FIXTURES = join(__dirname, 'fixtures');

describe('parseRunCsv', () => {
  it('reads a real solver run', () => {
    const rows = readRunCsv(join(FIXTURES, 'run_graph_low.csv'));
    expect(rows.length).toBeGreaterThan(2);
    expect(rows[0].cells).toBe(256);
    expect(rows[0].converged).toBe(true);
    expect(rows[1].cells).toBeGreaterThan(rows[0].cells);
    expect(rows[0].l1_error).toBeGreaterThan(0);
  });

  it('rejects an empty file', () => {
    expect(() => parseRunCsv('', 'empty.csv')).toThrow(CsvError);
    expect(() => parseRunCsv('\n\n', 'empty.csv')).toThrow(/empty/);
  });

  it('rejects a header without data rows', () => {
    expect(() => parseRunCsv('step,cells,dofs,l1_error,wall_s,nl_iters,converged\n'))
      .toThrow(/no data rows/);
  });

  it('names the missing column', () => {
    const text = 'step,cells,dofs,wall_s,nl_iters,converged\n0,1,1,0.1,1,true\n';
    expect(() => parseRunCsv(text, 'x.csv')).toThrow(/missing column 'l1_error'/);
  });

  it('parses nan errors', () => {
    const text = 'step,cells,dofs,l1_error,wall_s,nl_iters,converged\n0,4,9,nan,0.1,1,true\n';
    const rows = parseRunCsv(text);
    expect(Number.isNaN(rows[0].l1_error)).toBe(true);
  });
});
