/**
 * emb-jsonl store format: one JSON header line ({format, model, dim,
 * count} plus free-form metadata), then one {"id", "v"} line per vector.
 * The reader applies the same validation and re-normalization tiers as
 * the harness loader so both sides agree on what a clean store is.
 */

import { readFileSync, writeFileSync } from "node:fs";

export const STORE_FORMAT = "emb-jsonl/1";

export class StoreFormatError extends Error {}

export interface StoreHeader {
  model: string;
  dim: number;
  count: number;
  meta: Record<string, unknown>;
}

export interface LoadedStore {
  header: StoreHeader;
  ids: string[]; // ascending, mirroring the row order convention
  vectors: Map<string, Float32Array>;
  loadWarnings: number;
}

function vectorNorm(vec: Float32Array): number {
  let sumSquares = 0;
  for (const x of vec) sumSquares += x * x;
  return Math.sqrt(sumSquares);
}

function serializeVector(vec: Float32Array): number[] {
  // +0 absorbs -0, whose sign JSON would drop anyway
  return Array.from(vec, (x) => (x === 0 ? 0 : x));
}

export function writeStore(
  path: string,
  model: string,
  dimension: number,
  entries: Iterable<[string, Float32Array]>,
  meta: Record<string, unknown> = {},
): number {
  const pairs = [...entries].sort((a, b) => (a[0] < b[0] ? -1 : a[0] > b[0] ? 1 : 0));
  const seen = new Set<string>();
  for (const [id, vec] of pairs) {
    if (seen.has(id)) throw new StoreFormatError(`duplicate sample_id '${id}'`);
    seen.add(id);
    if (vec.length !== dimension) {
      throw new StoreFormatError(
        `vector for '${id}' has ${vec.length} values, store declares dim ${dimension}`,
      );
    }
  }
  const header = { format: STORE_FORMAT, model, dim: dimension, count: pairs.length, ...meta };
  const lines = [JSON.stringify(header)];
  for (const [id, vec] of pairs) {
    lines.push(JSON.stringify({ id, v: serializeVector(vec) }));
  }
  writeFileSync(path, lines.join("\n") + "\n", "utf-8");
  return pairs.length;
}

export function readStore(path: string): LoadedStore {
  const lines = readFileSync(path, "utf-8").split("\n");
  if (!lines[0] || !lines[0].trim()) {
    throw new StoreFormatError(`${path}: missing header line`);
  }
  let rawHeader: Record<string, unknown>;
  try {
    rawHeader = JSON.parse(lines[0]);
  } catch (exc) {
    throw new StoreFormatError(`${path}: header is not valid JSON: ${(exc as Error).message}`);
  }
  if (rawHeader["format"] !== STORE_FORMAT) {
    throw new StoreFormatError(`${path}: unsupported format '${rawHeader["format"]}'`);
  }
  for (const key of ["model", "dim", "count"]) {
    if (!(key in rawHeader)) throw new StoreFormatError(`${path}: header missing '${key}'`);
  }
  const dim = Number(rawHeader["dim"]);
  if (!Number.isInteger(dim) || dim <= 0) {
    throw new StoreFormatError(`${path}: non-positive dimension ${rawHeader["dim"]}`);
  }

  const ids: string[] = [];
  const vectors = new Map<string, Float32Array>();
  let warnings = 0;
  for (let i = 1; i < lines.length; i++) {
    const line = lines[i]!;
    if (!line.trim()) continue;
    const where = `${path}: line ${i + 1}`;
    let obj: Record<string, unknown>;
    try {
      obj = JSON.parse(line);
    } catch (exc) {
      throw new StoreFormatError(`${where}: ${(exc as Error).message}`);
    }
    const id = obj["id"];
    const values = obj["v"];
    if (typeof id !== "string" || !Array.isArray(values)) {
      throw new StoreFormatError(`${where}: entry needs string id and array v`);
    }
    if (values.length !== dim) {
      throw new StoreFormatError(
        `${where}: vector has ${values.length} values, header declares dim ${dim}`,
      );
    }
    let vec: Float32Array = Float32Array.from(values as number[]);
    if (![...vec].every(Number.isFinite)) {
      throw new StoreFormatError(`${where}: non-finite value`);
    }
    if (vectors.has(id)) throw new StoreFormatError(`${where}: duplicate id '${id}'`);
    const norm = vectorNorm(vec);
    if (norm === 0) throw new StoreFormatError(`${where}: zero vector`);
    if (Math.abs(norm - 1) > 1e-3) {
      warnings += 1;
      vec = vec.map((x) => x / norm);
    } else if (Math.abs(norm - 1) > 1e-5) {
      vec = vec.map((x) => x / norm);
    }
    ids.push(id);
    vectors.set(id, vec);
  }
  const declared = Number(rawHeader["count"]);
  if (ids.length !== declared) {
    throw new StoreFormatError(
      `${path}: header declares count ${declared}, found ${ids.length}`,
    );
  }
  const meta: Record<string, unknown> = {};
  for (const [key, value] of Object.entries(rawHeader)) {
    if (!["format", "model", "dim", "count"].includes(key)) meta[key] = value;
  }
  ids.sort();
  return {
    header: { model: String(rawHeader["model"]), dim, count: declared, meta },
    ids,
    vectors,
    loadWarnings: warnings,
  };
}

export function cosine(a: Float32Array, b: Float32Array): number {
  let dot = 0;
  for (let i = 0; i < a.length; i++) dot += a[i]! * b[i]!;
  return dot;
}
