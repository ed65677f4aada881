/** Least-squares slope of log(y) against log(x). */
export function logLogSlope(x: number[], y: number[]): number {
  if (x.length !== y.length || x.length < 2) {
    throw new Error('need at least two matching points for a slope fit');
  }
  const lx = x.map(Math.log);
  const ly = y.map(Math.log);
  const n = lx.length;
  const mx = lx.reduce((a, b) => a + b, 0) / n;
  const my = ly.reduce((a, b) => a + b, 0) / n;
  let sxx = 0;
  let sxy = 0;
  for (let i = 0; i < n; i++) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (sxx === 0) {
    throw new Error('slope fit is degenerate: all x values equal');
  }
  return sxy / sxx;
}

/** Slope over the last `tail` points (the asymptotic regime). */
export function tailSlope(x: number[], y: number[], tail = 4): number {
  const good: Array<[number, number]> = [];
  for (let i = 0; i < x.length; i++) {
    if (x[i] > 0 && y[i] > 0 && Number.isFinite(x[i]) && Number.isFinite(y[i])) {
      good.push([x[i], y[i]]);
    }
  }
  const use = good.slice(-Math.max(2, tail));
  return logLogSlope(use.map((p) => p[0]), use.map((p) => p[1]));
}

/** Convergence rate vs cell count: error ~ cells^(-rate/2) in 2D. */
export function rateFromCells(cells: number[], errors: number[], tail = 4): number {
  const h = cells.map((c) => Math.pow(c, -0.5));
  return tailSlope(h, errors, tail);
}
