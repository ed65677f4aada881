/** Minimal hand-rolled SVG builder for log-log panels. */

export interface Series {
  label: string;
  x: number[];
  y: number[];
  annotation?: string;
}

export interface PanelSpec {
  title: string;
  xLabel: string;
  yLabel: string;
  series: Series[];
}

const COLORS = ['#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b'];
const MARKERS = ['circle', 'square', 'diamond', 'triangle'];

function esc(s: string): string {
  return s.replace(/&/g, '&amp;').replace(/</g, '&lt;').replace(/>/g, '&gt;');
}

function logTicks(lo: number, hi: number): number[] {
  const out: number[] = [];
  for (let e = Math.floor(Math.log10(lo)); e <= Math.ceil(Math.log10(hi)); e++) {
    const v = Math.pow(10, e);
    if (v >= lo / 1.0001 && v <= hi * 1.0001) out.push(v);
  }
  return out;
}

function fmtTick(v: number): string {
  const e = Math.round(Math.log10(v));
  if (e >= -2 && e <= 3) return String(v);
  return `1e${e}`;
}

function marker(kind: string, cx: number, cy: number, color: string): string {
  const r = 3;
  switch (kind) {
    case 'square':
      return `<rect x="${cx - r}" y="${cy - r}" width="${2 * r}" height="${2 * r}" fill="${color}"/>`;
    case 'diamond':
      return `<path d="M ${cx} ${cy - r} L ${cx + r} ${cy} L ${cx} ${cy + r} L ${cx - r} ${cy} Z" fill="${color}"/>`;
    case 'triangle':
      return `<path d="M ${cx} ${cy - r} L ${cx + r} ${cy + r} L ${cx - r} ${cy + r} Z" fill="${color}"/>`;
    default:
      return `<circle cx="${cx}" cy="${cy}" r="${r}" fill="${color}"/>`;
  }
}

export function renderPanel(spec: PanelSpec, width = 460, height = 380,
                            originX = 0): string {
  const mL = 62;
  const mR = 16;
  const mT = 34;
  const mB = 46;
  const pts = spec.series.flatMap((s) =>
    s.x.map((xv, i) => [xv, s.y[i]] as [number, number]))
    .filter(([a, b]) => a > 0 && b > 0 && Number.isFinite(a) && Number.isFinite(b));
  if (pts.length === 0) {
    throw new Error(`panel '${spec.title}' has no positive finite data`);
  }
  let xLo = Math.min(...pts.map((p) => p[0]));
  let xHi = Math.max(...pts.map((p) => p[0]));
  let yLo = Math.min(...pts.map((p) => p[1]));
  let yHi = Math.max(...pts.map((p) => p[1]));
  if (xLo === xHi) { xLo /= 2; xHi *= 2; }
  if (yLo === yHi) { yLo /= 2; yHi *= 2; }
  const padX = Math.pow(xHi / xLo, 0.05);
  const padY = Math.pow(yHi / yLo, 0.08);
  xLo /= padX; xHi *= padX;
  yLo /= padY; yHi *= padY;

  const sx = (v: number) =>
    originX + mL + ((Math.log(v) - Math.log(xLo)) / (Math.log(xHi) - Math.log(xLo))) * (width - mL - mR);
  const sy = (v: number) =>
    mT + (1 - (Math.log(v) - Math.log(yLo)) / (Math.log(yHi) - Math.log(yLo))) * (height - mT - mB);

  const parts: string[] = [];
  parts.push(`<rect x="${originX + mL}" y="${mT}" width="${width - mL - mR}" height="${height - mT - mB}" fill="none" stroke="#444"/>`);
  parts.push(`<text x="${originX + mL + (width - mL - mR) / 2}" y="${mT - 12}" text-anchor="middle" font-size="13" font-weight="bold">${esc(spec.title)}</text>`);
  for (const t of logTicks(xLo, xHi)) {
    const X = sx(t);
    parts.push(`<line x1="${X}" y1="${mT}" x2="${X}" y2="${height - mB}" stroke="#ddd"/>`);
    parts.push(`<text x="${X}" y="${height - mB + 16}" text-anchor="middle" font-size="10">${fmtTick(t)}</text>`);
  }
  for (const t of logTicks(yLo, yHi)) {
    const Y = sy(t);
    parts.push(`<line x1="${originX + mL}" y1="${Y}" x2="${originX + width - mR}" y2="${Y}" stroke="#ddd"/>`);
    parts.push(`<text x="${originX + mL - 6}" y="${Y + 3}" text-anchor="end" font-size="10">${fmtTick(t)}</text>`);
  }
  parts.push(`<text x="${originX + mL + (width - mL - mR) / 2}" y="${height - 8}" text-anchor="middle" font-size="11">${esc(spec.xLabel)}</text>`);
  parts.push(`<text x="${originX + 16}" y="${mT + (height - mT - mB) / 2}" text-anchor="middle" font-size="11" transform="rotate(-90 ${originX + 16} ${mT + (height - mT - mB) / 2})">${esc(spec.yLabel)}</text>`);

  spec.series.forEach((s, k) => {
    const color = COLORS[k % COLORS.length];
    const mk = MARKERS[k % MARKERS.length];
    const coords: string[] = [];
    for (let i = 0; i < s.x.length; i++) {
      if (s.x[i] > 0 && s.y[i] > 0 && Number.isFinite(s.y[i])) {
        coords.push(`${sx(s.x[i]).toFixed(2)},${sy(s.y[i]).toFixed(2)}`);
      }
    }
    parts.push(`<polyline points="${coords.join(' ')}" fill="none" stroke="${color}" stroke-width="1.6"/>`);
    for (const c of coords) {
      const [cx, cy] = c.split(',').map(Number);
      parts.push(marker(mk, cx, cy, color));
    }
    const legendY = mT + 14 + 16 * k;
    parts.push(`<line x1="${originX + mL + 8}" y1="${legendY}" x2="${originX + mL + 30}" y2="${legendY}" stroke="${color}" stroke-width="1.6"/>`);
    const label = s.annotation ? `${s.label} (${s.annotation})` : s.label;
    parts.push(`<text x="${originX + mL + 36}" y="${legendY + 3}" font-size="10">${esc(label)}</text>`);
  });
  return parts.join('\n');
}

export function renderFigure(panels: PanelSpec[], width = 460, height = 380): string {
  const body = panels.map((p, i) => renderPanel(p, width, height, i * width)).join('\n');
  const total = width * panels.length;
  return `<?xml version="1.0" encoding="UTF-8"?>\n` +
    `<svg xmlns="http://www.w3.org/2000/svg" width="${total}" height="${height}" ` +
    `viewBox="0 0 ${total} ${height}" font-family="Helvetica, Arial, sans-serif">\n` +
    `<rect width="${total}" height="${height}" fill="white"/>\n${body}\n</svg>\n`;
}
