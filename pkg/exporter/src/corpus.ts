/**
 * Normalized corpus JSONL: one turn sample per line, UTF-8, with the
 * exact field layout the harness writes. Rendering must stay character
 * for character in sync with the harness renderer, since retrieval
 * queries and precomputed stores meet on the rendered text.
 */

import { readFileSync } from "node:fs";

export class CorpusError extends Error {}

export interface Utterance {
  speaker: string;
  text: string;
}

export interface TurnSample {
  sampleId: string;
  split: string;
  history: Utterance[];
  domains: string[];
  state: Record<string, Record<string, string>>;
}

export type HistoryMode = "user_only" | "user_agent";

const SPEAKER_USER = "user";
const SPEAKER_AGENT = "agent";

function asRecord(value: unknown, where: string): Record<string, unknown> {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new CorpusError(`${where}: expected an object`);
  }
  return value as Record<string, unknown>;
}

export function parseSample(raw: unknown, where: string): TurnSample {
  const obj = asRecord(raw, where);
  const sampleId = obj["sample_id"];
  const split = obj["split"];
  if (typeof sampleId !== "string" || !sampleId) {
    throw new CorpusError(`${where}: missing sample_id`);
  }
  if (typeof split !== "string") {
    throw new CorpusError(`${where}: missing split`);
  }
  if (!Array.isArray(obj["history"]) || obj["history"].length === 0) {
    throw new CorpusError(`${where}: history must be a non-empty array`);
  }
  const history = obj["history"].map((u, i) => {
    const utt = asRecord(u, `${where}: history[${i}]`);
    if (typeof utt["speaker"] !== "string" || typeof utt["text"] !== "string") {
      throw new CorpusError(`${where}: history[${i}] needs speaker and text`);
    }
    return { speaker: utt["speaker"], text: utt["text"] };
  });
  const domains = Array.isArray(obj["domains"])
    ? obj["domains"].map((d) => String(d))
    : [];
  const state: Record<string, Record<string, string>> = {};
  if (obj["state"] !== undefined) {
    for (const [domain, slots] of Object.entries(asRecord(obj["state"], `${where}: state`))) {
      state[domain] = {};
      for (const [key, value] of Object.entries(asRecord(slots, `${where}: state.${domain}`))) {
        state[domain][key] = String(value);
      }
    }
  }
  return { sampleId, split, history, domains, state };
}

export function loadCorpus(path: string): TurnSample[] {
  const samples: TurnSample[] = [];
  const seen = new Set<string>();
  const lines = readFileSync(path, "utf-8").split("\n");
  lines.forEach((line, index) => {
    if (!line.trim()) return;
    const where = `${path}: line ${index + 1}`;
    let raw: unknown;
    try {
      raw = JSON.parse(line);
    } catch (exc) {
      throw new CorpusError(`${where}: ${(exc as Error).message}`);
    }
    const sample = parseSample(raw, where);
    if (seen.has(sample.sampleId)) {
      throw new CorpusError(`${where}: duplicate sample_id '${sample.sampleId}'`);
    }
    seen.add(sample.sampleId);
    samples.push(sample);
  });
  return samples;
}

export function renderUtterances(
  utterances: Utterance[],
  historyMode: HistoryMode,
  speakerTags: boolean,
): string {
  if (historyMode !== "user_only" && historyMode !== "user_agent") {
    throw new CorpusError(`unknown history mode '${historyMode}'`);
  }
  const parts: string[] = [];
  for (const utt of utterances) {
    if (historyMode === "user_only" && utt.speaker === SPEAKER_AGENT) continue;
    if (speakerTags) {
      const tag = utt.speaker === SPEAKER_USER ? "User: " : "Agent: ";
      parts.push(tag + utt.text);
    } else {
      parts.push(utt.text);
    }
  }
  return parts.join(" ");
}

export function renderHistory(
  sample: TurnSample,
  historyMode: HistoryMode,
  speakerTags: boolean,
): string {
  return renderUtterances(sample.history, historyMode, speakerTags);
}
