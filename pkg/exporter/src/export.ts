/**
 * Export pipeline: corpus in, emb-jsonl store out. Batches through the
 * encoder with automatic halving on memory errors, checkpoints every
 * finished batch to a .partial file, and finalizes the store in one
 * pass so an interrupted run resumes where it stopped.
 */

import { appendFileSync, existsSync, readFileSync, unlinkSync, writeFileSync } from "node:fs";
import { basename } from "node:path";

import { loadCorpus, renderHistory, type HistoryMode, type TurnSample } from "./corpus.js";
import { EncoderMemoryError, type Encoder } from "./encoders.js";
import { readStore, writeStore } from "./store.js";

export class ExportError extends Error {}

export interface ExportJob {
  corpusPath: string;
  modelId: string;
  mode: HistoryMode;
  outputPath: string;
  batchSize?: number;
  serviceUrl?: string;
  apiKeyEnv?: string;
  emitRenderedPath?: string;
}

export interface ExportResult {
  outputPath: string;
  count: number;
  dimension: number;
  model: string;
  finalBatchSize: number;
  resumedCount: number;
  skipped: boolean; // true when a complete store already covered the corpus
}

export const DEFAULT_BATCH_SIZE = 64;

interface PartialEntry {
  id: string;
  v: number[];
}

function readPartial(path: string, valid: Set<string>): Map<string, Float32Array> {
  const done = new Map<string, Float32Array>();
  if (!existsSync(path)) return done;
  const lines = readFileSync(path, "utf-8").split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i]!;
    if (!line.trim()) continue;
    let entry: PartialEntry;
    try {
      entry = JSON.parse(line);
      if (typeof entry.id !== "string" || !Array.isArray(entry.v)) throw new Error("shape");
    } catch {
      // a torn final line is the expected crash artifact; anything
      // earlier means real corruption
      const rest = lines.slice(i + 1).some((l) => l.trim());
      if (!rest) break;
      throw new ExportError(`corrupt partial embedding at ${path}:${i + 1}`);
    }
    if (valid.has(entry.id)) done.set(entry.id, Float32Array.from(entry.v));
  }
  return done;
}

function partialLine(id: string, vec: Float32Array): string {
  return JSON.stringify({ id, v: Array.from(vec, (x) => (x === 0 ? 0 : x)) }) + "\n";
}

function vectorNorm64(vec: Float32Array): number {
  let sumSquares = 0;
  for (const x of vec) sumSquares += x * x;
  return Math.sqrt(sumSquares);
}

/** Unit-normalize, preserving bits when the norm already sits within 1e-5. */
function normalized(vec: Float32Array, id: string): Float32Array {
  const norm = vectorNorm64(vec);
  if (norm === 0 || !Number.isFinite(norm)) {
    throw new ExportError(`encoder returned a zero or non-finite vector for '${id}'`);
  }
  if (Math.abs(norm - 1) <= 1e-5) return vec;
  return vec.map((x) => x / norm);
}

async function encodeWithHalving(
  encoder: Encoder,
  texts: string[],
  batchSize: number,
): Promise<{ vectors: Float32Array[]; batchSize: number }> {
  let size = batchSize;
  while (true) {
    try {
      return { vectors: await encoder.encodeBatch(texts.slice(0, size)), batchSize: size };
    } catch (exc) {
      if (!(exc instanceof EncoderMemoryError) || size <= 1) throw exc;
      size = Math.max(1, Math.floor(size / 2));
    }
  }
}

export function renderedEntries(samples: TurnSample[]): object[] {
  const modes: HistoryMode[] = ["user_only", "user_agent"];
  const entries = [];
  for (const sample of [...samples].sort((a, b) => (a.sampleId < b.sampleId ? -1 : 1))) {
    for (const mode of modes) {
      entries.push({
        sample_id: sample.sampleId,
        mode,
        tags: true,
        text: renderHistory(sample, mode, true),
      });
    }
  }
  return entries;
}

export async function runExport(job: ExportJob, encoder: Encoder): Promise<ExportResult> {
  const samples = loadCorpus(job.corpusPath);
  if (samples.length === 0) {
    throw new ExportError(`${job.corpusPath} holds no samples`);
  }
  const texts = new Map<string, string>();
  for (const sample of samples) {
    // speaker tags stay on: retrieval-side rendering is tagged
    texts.set(sample.sampleId, renderHistory(sample, job.mode, true));
  }

  if (job.emitRenderedPath) {
    writeFileSync(
      job.emitRenderedPath,
      JSON.stringify(renderedEntries(samples), null, 2) + "\n",
      "utf-8",
    );
  }

  if (existsSync(job.outputPath)) {
    const store = readStore(job.outputPath);
    const missing = [...texts.keys()].filter((id) => !store.vectors.has(id));
    if (missing.length === 0) {
      return {
        outputPath: job.outputPath,
        count: store.header.count,
        dimension: store.header.dim,
        model: store.header.model,
        finalBatchSize: job.batchSize ?? DEFAULT_BATCH_SIZE,
        resumedCount: 0,
        skipped: true,
      };
    }
    throw new ExportError(
      `${job.outputPath} exists but is missing ${missing.length} corpus samples ` +
        `(first: ${missing.slice(0, 3).join(", ")}); delete it to re-embed`,
    );
  }

  const partialPath = `${job.outputPath}.partial`;
  const done = readPartial(partialPath, new Set(texts.keys()));
  const resumedCount = done.size;
  const todo = samples.map((s) => s.sampleId).filter((id) => !done.has(id));

  let batchSize = Math.max(1, job.batchSize ?? DEFAULT_BATCH_SIZE);
  if (todo.length > 0) {
    // rewrite so a previously torn line cannot survive, then append
    writeFileSync(
      partialPath,
      [...done.entries()].map(([id, vec]) => partialLine(id, vec)).join(""),
      "utf-8",
    );
    let cursor = 0;
    while (cursor < todo.length) {
      const slice = todo.slice(cursor, cursor + batchSize);
      const sliceTexts = slice.map((id) => texts.get(id)!);
      const { vectors, batchSize: used } = await encodeWithHalving(
        encoder,
        sliceTexts,
        batchSize,
      );
      batchSize = used;
      let chunk = "";
      vectors.forEach((vec, i) => {
        const id = slice[i]!;
        const unit = normalized(vec, id);
        done.set(id, unit);
        chunk += partialLine(id, unit);
      });
      appendFileSync(partialPath, chunk, "utf-8");
      cursor += vectors.length;
    }
  }

  const dimension = encoder.dimension ?? [...done.values()][0]!.length;
  const count = writeStore(
    job.outputPath,
    encoder.modelName,
    dimension,
    [...texts.keys()].map((id) => [id, done.get(id)!] as [string, Float32Array]),
    {
      embed_text_mode: job.mode,
      speaker_tags: true,
      corpus: basename(job.corpusPath),
      pooling: encoder.pooling,
    },
  );
  if (existsSync(partialPath)) unlinkSync(partialPath);
  return {
    outputPath: job.outputPath,
    count,
    dimension,
    model: encoder.modelName,
    finalBatchSize: batchSize,
    resumedCount,
    skipped: false,
  };
}
