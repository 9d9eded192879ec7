// Schema-checked readers for the two experiment CSVs.

import Papa from "papaparse";

export const RESULTS_HEADER = [
  "sim_id", "method", "parameter", "point_estimate", "sd_estimate",
  "mc_se", "timing_ms", "error",
];

export const LEVERAGE_HEADER = [
  "n", "x_star", "k", "responsibility", "lrvb_score",
  "perturbation_score", "lrvb_ms", "perturb_ms",
];

export interface ResultRow {
  simId: string;
  method: string;
  parameter: string;
  group: string;
  sd: number;
}

export interface LeverageRow {
  n: number;
  xStar: number;
  k: number;
  responsibility: number;
  lrvbScore: number;
  perturbationScore: number;
}

function parseRows(text: string, expectedHeader: string[], name: string): string[][] {
  if (text.trim() === "") {
    throw new Error(`${name}: empty file`);
  }
  const parsed = Papa.parse<string[]>(text.trim(), { skipEmptyLines: true });
  if (parsed.errors.length > 0) {
    const first = parsed.errors[0];
    throw new Error(`${name}: parse error at row ${first.row}: ${first.message}`);
  }
  const rows = parsed.data;
  if (rows.length === 0) {
    throw new Error(`${name}: empty file`);
  }
  const header = rows[0];
  if (header.join(",") !== expectedHeader.join(",")) {
    throw new Error(
      `${name}: header mismatch; expected ${expectedHeader.join(",")}`);
  }
  if (rows.length === 1) {
    throw new Error(`${name}: no data rows`);
  }
  for (let i = 1; i < rows.length; i++) {
    if (rows[i].length !== expectedHeader.length) {
      throw new Error(
        `${name}: line ${i + 1}: expected ${expectedHeader.length} fields, ` +
        `found ${rows[i].length}`);
    }
  }
  return rows.slice(1);
}

function toNumber(raw: string, name: string, line: number, field: string): number {
  const value = Number(raw);
  if (raw === "" || !Number.isFinite(value)) {
    throw new Error(`${name}: line ${line}: bad ${field} value ${JSON.stringify(raw)}`);
  }
  return value;
}

/** Rows of a results CSV, failed simulations dropped. */
export function readResults(text: string, name = "results"): ResultRow[] {
  const raw = parseRows(text, RESULTS_HEADER, name);
  const failed = new Set(raw.filter((r) => r[7] !== "").map((r) => r[0]));
  const rows: ResultRow[] = [];
  raw.forEach((r, i) => {
    if (r[7] !== "" || failed.has(r[0])) return;
    const parameter = r[2];
    rows.push({
      simId: r[0],
      method: r[1],
      parameter,
      group: parameter.slice(0, parameter.lastIndexOf("_")),
      sd: toNumber(r[4], name, i + 2, "sd_estimate"),
    });
  });
  if (rows.length === 0) {
    throw new Error(`${name}: every simulation failed`);
  }
  const methods = new Set(rows.map((r) => r.method));
  const missing = ["mh", "mfvb", "lrvb"].filter((m) => !methods.has(m));
  if (missing.length > 0) {
    throw new Error(`${name}: missing method rows: ${missing.join(", ")}`);
  }
  return rows;
}

export function readLeverage(text: string, name = "leverage"): LeverageRow[] {
  const raw = parseRows(text, LEVERAGE_HEADER, name);
  return raw.map((r, i) => ({
    n: toNumber(r[0], name, i + 2, "n"),
    xStar: toNumber(r[1], name, i + 2, "x_star"),
    k: toNumber(r[2], name, i + 2, "k"),
    responsibility: toNumber(r[3], name, i + 2, "responsibility"),
    lrvbScore: toNumber(r[4], name, i + 2, "lrvb_score"),
    perturbationScore: toNumber(r[5], name, i + 2, "perturbation_score"),
  }));
}
