#!/usr/bin/env node
/** CLI: `finetune --config <file>` trains and saves a checkpoint;
 * `export --checkpoint <dir> --texts <jsonl> --out <dump>` writes the
 * vector dump consumed by the annotation pipeline's dump provider.
 *
 * The config is a flat JSON file: base_model, epochs, batch_size,
 * temperature, pair_cap, eval_fraction, seed, learning_rate,
 * warmup_fraction, plus train_file (JSONL of {text, label}) and
 * output_dir for the checkpoint.
 */

import { readFileSync } from "node:fs";
import { parseArgs } from "node:util";

import { loadCheckpoint, saveCheckpoint } from "./model.js";
import { fineTune, resolveConfig } from "./train.js";
import { exportVectors } from "./dump.js";
import { LabeledText } from "./pairs.js";

function readJsonl(path: string): Record<string, unknown>[] {
  return readFileSync(path, "utf-8")
    .split("\n")
    .filter((line) => line.trim())
    .map((line) => JSON.parse(line));
}

function runFinetune(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: { config: { type: "string" } },
  });
  if (!values.config) {
    console.error("usage: finetune --config <file>");
    return 1;
  }
  const raw = JSON.parse(readFileSync(values.config, "utf-8"));
  const config = resolveConfig({
    baseModel: raw.base_model,
    epochs: raw.epochs,
    batchSize: raw.batch_size,
    temperature: raw.temperature,
    pairCap: raw.pair_cap,
    evalFraction: raw.eval_fraction,
    seed: raw.seed,
    learningRate: raw.learning_rate,
    warmupFraction: raw.warmup_fraction,
  });
  const trainFile: string = raw.train_file;
  const outputDir: string = raw.output_dir;
  if (!trainFile || !outputDir) {
    console.error("config needs train_file and output_dir");
    return 1;
  }
  const utterances = readJsonl(trainFile).map((r) => ({
    text: String(r.text),
    label: String(r.label ?? ""),
  })) as LabeledText[];
  const result = fineTune(config, utterances, (line) => console.log(line));
  const bestStats = result.history.find((h) => h.epoch === result.bestEpoch);
  saveCheckpoint(outputDir, result.model, {
    epoch: result.bestEpoch,
    spearman: bestStats?.spearman ?? null,
    meanLoss: bestStats?.meanLoss ?? null,
    config: { ...config },
  });
  console.log(`best checkpoint: epoch ${result.bestEpoch} -> ${outputDir}`);
  return 0;
}

function runExport(argv: string[]): number {
  const { values } = parseArgs({
    args: argv,
    options: {
      checkpoint: { type: "string" },
      texts: { type: "string" },
      out: { type: "string" },
    },
  });
  if (!values.checkpoint || !values.texts || !values.out) {
    console.error("usage: export --checkpoint <dir> --texts <jsonl> --out <dump>");
    return 1;
  }
  const { model } = loadCheckpoint(values.checkpoint);
  const texts = readJsonl(values.texts).map((r) => String(r.text));
  const written = exportVectors(model, texts, values.out);
  console.log(`${written} vectors (dim ${model.dim}) -> ${values.out}`);
  return 0;
}

function main(): number {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === "finetune") return runFinetune(rest);
    if (command === "export") return runExport(rest);
    console.error("usage: cli.js <finetune|export> ...");
    return 1;
  } catch (error) {
    console.error(`error: ${error instanceof Error ? error.message : error}`);
    return 1;
  }
}

process.exit(main());
