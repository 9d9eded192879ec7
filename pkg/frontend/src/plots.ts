// The two figure kinds: per-group sd comparison scatters and leverage views.

import { LeverageRow, ResultRow, readLeverage, readResults } from "./csv.js";
import { PanelSpec, extent, fmt, linearScale, renderFigure, MARGIN, PANEL_WIDTH, PANEL_HEIGHT } from "./svg.js";

export type PlotKind = "sd_comparison" | "leverage_by_location" | "leverage_scatter";

export const PLOT_KINDS: PlotKind[] = [
  "sd_comparison", "leverage_by_location", "leverage_scatter",
];

const GROUPS = ["logpi", "mu", "logtau"] as const;
const GROUP_TITLES: Record<string, string> = {
  logpi: "log pi", mu: "mu", logtau: "log tau",
};

const STYLES = [
  ".pt-mh{fill:#777777;}",
  ".pt-mfvb{fill:#d95f02;}",
  ".pt-lrvb{fill:#1b6ca8;}",
  ".pt-k1{fill:#d95f02;}",
  ".pt-k2{fill:#1b6ca8;}",
  ".pt-k3{fill:#2e8b57;}",
  ".pt-k4{fill:#8b008b;}",
  "circle{fill-opacity:0.75;}",
].join("");

const innerW = PANEL_WIDTH - MARGIN.left - MARGIN.right;
const innerH = PANEL_HEIGHT - MARGIN.top - MARGIN.bottom;

/** Per parameter group: x = sampler sd, y = each method's sd, identity line. */
export function plotSdComparison(csvText: string): string {
  const rows = readResults(csvText);
  const bySim = new Map<string, Map<string, number>>();
  for (const row of rows) {
    const key = `${row.simId}|${row.parameter}`;
    if (!bySim.has(key)) bySim.set(key, new Map());
    bySim.get(key)!.set(row.method, row.sd);
  }
  const panels: PanelSpec[] = GROUPS.map((group) => {
    const groupRows = rows.filter((r) => r.group === group);
    if (groupRows.length === 0) {
      throw new Error(`results: no rows for parameter group ${group}`);
    }
    const domain = extent(groupRows.map((r) => r.sd));
    const x = linearScale(domain, [0, innerW]);
    const y = linearScale(domain, [innerH, 0]);
    const points = groupRows.map((row) => {
      const mh = bySim.get(`${row.simId}|${row.parameter}`)!.get("mh");
      if (mh === undefined) {
        throw new Error(`results: missing method rows: mh (sim ${row.simId})`);
      }
      return { cls: `pt pt-${row.method} panel-${group}`, cx: x(mh), cy: y(row.sd) };
    });
    return {
      title: GROUP_TITLES[group],
      xLabel: "sd (mh)",
      yLabel: "sd (method)",
      x, y, points,
      referenceLine: true,
    };
  });
  return renderFigure(panels, STYLES);
}

function leverageRows(csvText: string): LeverageRow[] {
  const rows = readLeverage(csvText);
  if (rows.length === 0) throw new Error("leverage: no data rows");
  return rows;
}

/** Influence score against observation location, colored by component. */
export function plotLeverageByLocation(csvText: string): string {
  const rows = leverageRows(csvText);
  const x = linearScale(extent(rows.map((r) => r.xStar)), [0, innerW]);
  const y = linearScale(extent(rows.map((r) => r.lrvbScore)), [innerH, 0]);
  const panel: PanelSpec = {
    title: "influence by location",
    xLabel: "x*",
    yLabel: "score on mu",
    x, y,
    points: rows.map((r) => ({
      cls: `pt pt-k${r.k} panel-location`,
      cx: x(r.xStar),
      cy: y(r.lrvbScore),
    })),
  };
  return renderFigure([panel], STYLES);
}

function pearson(a: number[], b: number[]): number {
  const n = a.length;
  const ma = a.reduce((s, v) => s + v, 0) / n;
  const mb = b.reduce((s, v) => s + v, 0) / n;
  let saa = 0, sbb = 0, sab = 0;
  for (let i = 0; i < n; i++) {
    saa += (a[i] - ma) ** 2;
    sbb += (b[i] - mb) ** 2;
    sab += (a[i] - ma) * (b[i] - mb);
  }
  return sab / Math.sqrt(saa * sbb);
}

/** Closed-form scores against the perturb-and-refit oracle, with correlation. */
export function plotLeverageScatter(csvText: string): string {
  const rows = leverageRows(csvText);
  const xs = rows.map((r) => r.perturbationScore);
  const ys = rows.map((r) => r.lrvbScore);
  const domain = extent(xs.concat(ys));
  const x = linearScale(domain, [0, innerW]);
  const y = linearScale(domain, [innerH, 0]);
  const corr = pearson(xs, ys);
  const panel: PanelSpec = {
    title: "closed form vs refits",
    xLabel: "perturbation score",
    yLabel: "lrvb score",
    x, y,
    points: rows.map((r) => ({
      cls: `pt pt-k${r.k} panel-scatter`,
      cx: x(r.perturbationScore),
      cy: y(r.lrvbScore),
    })),
    referenceLine: true,
    annotations: [
      `<text class="correlation" x="${innerW - 6}" y="14" text-anchor="end" ` +
      `font-size="11">r = ${corr.toFixed(3)}</text>`,
    ],
  };
  return renderFigure([panel], STYLES);
}

export function renderPlot(kind: PlotKind, csvText: string): string {
  switch (kind) {
    case "sd_comparison":
      return plotSdComparison(csvText);
    case "leverage_by_location":
      return plotLeverageByLocation(csvText);
    case "leverage_scatter":
      return plotLeverageScatter(csvText);
    default: {
      const bad: never = kind;
      throw new Error(`unknown plot kind ${bad}`);
    }
  }
}
