#!/usr/bin/env node
import { writeFileSync } from 'fs';
import { buildConvergenceFigure, CsvSpec } from './convergence';
import { CsvError } from './csv';
import { meshFigureFromFile, VtkError } from './mesh';

function usage(): string {
  return [
    'usage:',
    '  plots convergence --csv RUN.csv [--csv RUN2.csv ...] [--label NAME ...] --out FIG.svg',
    '  plots mesh --vtk SNAPSHOT.vtk [--field NAME] --out MESH.svg',
  ].join('\n');
}

interface Parsed {
  command: string;
  csv: string[];
  label: string[];
  vtk?: string;
  field?: string;
  out?: string;
}

export function parseArgs(argv: string[]): Parsed {
  const out: Parsed = { command: argv[0] ?? '', csv: [], label: [] };
  for (let i = 1; i < argv.length; i++) {
    const a = argv[i];
    const val = () => {
      if (i + 1 >= argv.length) throw new Error(`missing value after ${a}`);
      return argv[++i];
    };
    switch (a) {
      case '--csv': out.csv.push(val()); break;
      case '--label': out.label.push(val()); break;
      case '--vtk': out.vtk = val(); break;
      case '--field': out.field = val(); break;
      case '--out': out.out = val(); break;
      default: throw new Error(`unknown argument ${a}`);
    }
  }
  return out;
}

export function run(argv: string[]): number {
  let args: Parsed;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}\n${usage()}`);
    return 2;
  }
  try {
    if (args.command === 'convergence') {
      if (args.csv.length === 0 || !args.out) {
        console.error(`error: convergence needs --csv and --out\n${usage()}`);
        return 2;
      }
      const specs: CsvSpec[] = args.csv.map((p, i) => ({ path: p, label: args.label[i] }));
      writeFileSync(args.out, buildConvergenceFigure(specs));
      console.log(`wrote ${args.out}`);
      return 0;
    }
    if (args.command === 'mesh') {
      if (!args.vtk || !args.out) {
        console.error(`error: mesh needs --vtk and --out\n${usage()}`);
        return 2;
      }
      writeFileSync(args.out, meshFigureFromFile(args.vtk, args.field));
      console.log(`wrote ${args.out}`);
      return 0;
    }
    console.error(`error: unknown command '${args.command}'\n${usage()}`);
    return 2;
  } catch (err) {
    if (err instanceof CsvError || err instanceof VtkError || err instanceof Error) {
      console.error(`error: ${(err as Error).message}`);
      return 1;
    }
    throw err;
  }
}

if (require.main === module) {
  process.exit(run(process.argv.slice(2)));
}
