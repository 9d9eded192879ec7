#!/usr/bin/env node
// plots <kind> --in <csv> --out <img>

import { readFileSync, writeFileSync } from "node:fs";
import { pathToFileURL } from "node:url";
import { PLOT_KINDS, PlotKind, renderPlot } from "./plots.js";

function usage(): never {
  process.stderr.write(
    `usage: plots <${PLOT_KINDS.join("|")}> --in <csv> --out <img.svg>\n`);
  process.exit(2);
}

export function main(argv: string[]): number {
  const args = argv.slice();
  const kind = args.shift();
  if (!kind || !(PLOT_KINDS as string[]).includes(kind)) usage();
  let input: string | undefined;
  let output: string | undefined;
  while (args.length > 0) {
    const flag = args.shift();
    if (flag === "--in") input = args.shift();
    else if (flag === "--out") output = args.shift();
    else usage();
  }
  if (!input || !output) usage();
  if (!output.endsWith(".svg")) {
    process.stderr.write("plots: only .svg output is supported\n");
    return 2;
  }
  let csvText: string;
  try {
    csvText = readFileSync(input, "utf8");
  } catch (err) {
    process.stderr.write(`plots: cannot read ${input}: ${String(err)}\n`);
    return 1;
  }
  try {
    const svg = renderPlot(kind as PlotKind, csvText);
    writeFileSync(output, svg, "utf8");
  } catch (err) {
    process.stderr.write(`plots: ${err instanceof Error ? err.message : String(err)}\n`);
    return 1;
  }
  return 0;
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
