// Minimal deterministic SVG scaffolding: linear scales, axes, scatter panels.
// Everything is plain string assembly, so identical inputs give identical bytes.

export interface Scale {
  (value: number): number;
  domain: [number, number];
  range: [number, number];
}

export function linearScale(domain: [number, number], range: [number, number]): Scale {
  const [d0, d1] = domain;
  const [r0, r1] = range;
  const span = d1 - d0 === 0 ? 1 : d1 - d0;
  const scale = ((value: number) =>
    r0 + ((value - d0) / span) * (r1 - r0)) as Scale;
  scale.domain = domain;
  scale.range = range;
  return scale;
}

export function extent(values: number[], padFraction = 0.05): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!Number.isFinite(lo) || !Number.isFinite(hi)) {
    throw new Error("cannot compute an extent of no finite values");
  }
  const pad = (hi - lo || Math.abs(hi) || 1) * padFraction;
  return [lo - pad, hi + pad];
}

export const fmt = (value: number): string => {
  const rounded = Number(value.toPrecision(6));
  return Object.is(rounded, -0) ? "0" : String(rounded);
};

export function ticks(lo: number, hi: number, count = 5): number[] {
  const rawStep = (hi - lo) / count;
  const power = Math.pow(10, Math.floor(Math.log10(Math.abs(rawStep) || 1)));
  const candidates = [1, 2, 5, 10].map((m) => m * power);
  const step = candidates.find((c) => c >= rawStep) ?? candidates[3];
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + step * 1e-9; v += step) {
    out.push(Number(v.toPrecision(12)));
  }
  return out;
}

export interface PanelSpec {
  title: string;
  xLabel: string;
  yLabel: string;
  x: Scale;
  y: Scale;
  /** class, cx, cy triples already in panel coordinates */
  points: { cls: string; cx: number; cy: number }[];
  referenceLine?: boolean; // y = x over the shared domain
  annotations?: string[];  // extra svg fragments in panel coordinates
}

export const PANEL_WIDTH = 320;
export const PANEL_HEIGHT = 320;
export const MARGIN = { top: 36, right: 16, bottom: 46, left: 56 };

export function renderPanel(spec: PanelSpec, offsetX: number): string {
  const innerW = PANEL_WIDTH - MARGIN.left - MARGIN.right;
  const innerH = PANEL_HEIGHT - MARGIN.top - MARGIN.bottom;
  const parts: string[] = [];
  parts.push(`<g class="panel" transform="translate(${offsetX + MARGIN.left},${MARGIN.top})">`);
  parts.push(`<rect class="frame" x="0" y="0" width="${innerW}" height="${innerH}" fill="none" stroke="#888"/>`);
  parts.push(`<text class="title" x="${innerW / 2}" y="-14" text-anchor="middle" font-size="13">${spec.title}</text>`);

  for (const t of ticks(spec.x.domain[0], spec.x.domain[1])) {
    const px = spec.x(t);
    parts.push(`<line x1="${fmt(px)}" y1="${innerH}" x2="${fmt(px)}" y2="${innerH + 4}" stroke="#888"/>`);
    parts.push(`<text x="${fmt(px)}" y="${innerH + 16}" text-anchor="middle" font-size="9">${fmt(t)}</text>`);
  }
  for (const t of ticks(spec.y.domain[0], spec.y.domain[1])) {
    const py = spec.y(t);
    parts.push(`<line x1="-4" y1="${fmt(py)}" x2="0" y2="${fmt(py)}" stroke="#888"/>`);
    parts.push(`<text x="-7" y="${fmt(py)}" text-anchor="end" dominant-baseline="middle" font-size="9">${fmt(t)}</text>`);
  }
  parts.push(`<text x="${innerW / 2}" y="${innerH + 34}" text-anchor="middle" font-size="11">${spec.xLabel}</text>`);
  parts.push(`<text transform="translate(-40,${innerH / 2}) rotate(-90)" text-anchor="middle" font-size="11">${spec.yLabel}</text>`);

  if (spec.referenceLine) {
    const lo = Math.max(spec.x.domain[0], spec.y.domain[0]);
    const hi = Math.min(spec.x.domain[1], spec.y.domain[1]);
    parts.push(`<line class="identity" x1="${fmt(spec.x(lo))}" y1="${fmt(spec.y(lo))}" ` +
      `x2="${fmt(spec.x(hi))}" y2="${fmt(spec.y(hi))}" stroke="#555" stroke-dasharray="4 3"/>`);
  }
  for (const p of spec.points) {
    parts.push(`<circle class="${p.cls}" cx="${fmt(p.cx)}" cy="${fmt(p.cy)}" r="2.6"/>`);
  }
  for (const extra of spec.annotations ?? []) {
    parts.push(extra);
  }
  parts.push("</g>");
  return parts.join("\n");
}

export function renderFigure(panels: PanelSpec[], styles: string): string {
  const width = PANEL_WIDTH * panels.length;
  const body = panels.map((p, i) => renderPanel(p, i * PANEL_WIDTH)).join("\n");
  return [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${PANEL_HEIGHT}" ` +
    `viewBox="0 0 ${width} ${PANEL_HEIGHT}" font-family="sans-serif">`,
    `<style>${styles}</style>`,
    `<rect width="${width}" height="${PANEL_HEIGHT}" fill="white"/>`,
    body,
    "</svg>",
    "",
  ].join("\n");
}
