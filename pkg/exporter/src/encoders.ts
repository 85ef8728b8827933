/**
 * Encoding backends. The mock encoder is the offline test oracle; real
 * models (LaBSE, Dialog2Flow variants) are reached through an
 * embeddings service speaking the {model, input} -> {data: [{index,
 * embedding}]} shape, since this tool does not host models itself.
 */

import { mockEmbed } from "./hash.js";

export class ModelLoadError extends Error {}

export class EncodingServiceError extends Error {}

/** Signals the batch is too large for the backend; callers should halve. */
export class EncoderMemoryError extends Error {}

export interface Encoder {
  readonly modelName: string;
  readonly pooling: string;
  dimension: number | null; // learned from the first batch when null
  encodeBatch(texts: string[]): Promise<Float32Array[]>;
}

export class MockEncoder implements Encoder {
  readonly modelName: string;
  readonly pooling = "token_count_bag";
  dimension: number;

  constructor(dimension: number) {
    if (dimension < 8) {
      throw new ModelLoadError(`mock dimension must be >= 8, got ${dimension}`);
    }
    this.dimension = dimension;
    this.modelName = `mock-fnv1a-${dimension}`;
  }

  async encodeBatch(texts: string[]): Promise<Float32Array[]> {
    return texts.map((text) => mockEmbed(text, this.dimension));
  }
}

export interface ServiceEncoderOptions {
  url: string;
  modelName: string;
  dimension?: number;
  timeoutMs?: number;
  maxRetries?: number;
  apiKeyEnv?: string;
}

const BACKOFF_BASE_MS = 500;
const BACKOFF_FACTOR = 2;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

export class ServiceEncoder implements Encoder {
  readonly modelName: string;
  readonly pooling = "provider_default";
  dimension: number | null;
  private readonly url: string;
  private readonly timeoutMs: number;
  private readonly maxRetries: number;
  private readonly apiKeyEnv?: string;

  constructor(opts: ServiceEncoderOptions) {
    this.url = opts.url;
    this.modelName = opts.modelName;
    this.dimension = opts.dimension ?? null;
    this.timeoutMs = opts.timeoutMs ?? 30_000;
    this.maxRetries = opts.maxRetries ?? 3;
    this.apiKeyEnv = opts.apiKeyEnv;
  }

  private headers(): Record<string, string> {
    const headers: Record<string, string> = { "content-type": "application/json" };
    const key = this.apiKeyEnv ? process.env[this.apiKeyEnv] : undefined;
    if (key) headers["authorization"] = `Bearer ${key}`;
    return headers;
  }

  private async post(texts: string[]): Promise<unknown> {
    const attempts = Math.max(1, this.maxRetries + 1);
    let lastError = "";
    for (let attempt = 0; attempt < attempts; attempt++) {
      if (attempt > 0) {
        await sleep(BACKOFF_BASE_MS * BACKOFF_FACTOR ** (attempt - 1));
      }
      let response: Response;
      try {
        response = await fetch(this.url, {
          method: "POST",
          headers: this.headers(),
          body: JSON.stringify({ model: this.modelName, input: texts }),
          signal: AbortSignal.timeout(this.timeoutMs),
        });
      } catch (exc) {
        lastError = `request failed: ${(exc as Error).message}`;
        continue;
      }
      const body = await response.text();
      if (response.status === 413 || /too large|out of memory/i.test(body)) {
        throw new EncoderMemoryError(
          `service rejected a batch of ${texts.length} texts: HTTP ${response.status}`,
        );
      }
      if (!response.ok) {
        lastError = `HTTP ${response.status}: ${body.slice(0, 500)}`;
        continue;
      }
      try {
        return JSON.parse(body);
      } catch {
        lastError = `invalid JSON response: ${body.slice(0, 500)}`;
      }
    }
    throw new EncodingServiceError(
      `${this.url} failed after ${attempts} attempt(s): ${lastError}`,
    );
  }

  async encodeBatch(texts: string[]): Promise<Float32Array[]> {
    const payload = (await this.post(texts)) as { data?: unknown };
    const data = payload.data;
    if (!Array.isArray(data) || data.length !== texts.length) {
      throw new EncodingServiceError(
        `service returned ${Array.isArray(data) ? data.length : "no"} vectors for ${texts.length} texts`,
      );
    }
    const vectors: (Float32Array | null)[] = new Array(texts.length).fill(null);
    for (const item of data) {
      const index = Number((item as Record<string, unknown>)["index"]);
      const embedding = (item as Record<string, unknown>)["embedding"];
      if (!Number.isInteger(index) || !Array.isArray(embedding)) {
        throw new EncodingServiceError("service response entry missing index or embedding");
      }
      vectors[index] = Float32Array.from(embedding as number[]);
    }
    if (vectors.some((v) => v === null)) {
      throw new EncodingServiceError("service response missing indices");
    }
    const dims = new Set(vectors.map((v) => v!.length));
    if (dims.size !== 1) {
      throw new EncodingServiceError(`inconsistent vector dimensions ${[...dims].sort()}`);
    }
    const dim = [...dims][0]!;
    if (this.dimension === null) {
      this.dimension = dim;
    } else if (dim !== this.dimension) {
      throw new EncodingServiceError(
        `service returned dimension ${dim}, expected ${this.dimension}`,
      );
    }
    return vectors as Float32Array[];
  }
}

export interface ResolveOptions {
  serviceUrl?: string;
  apiKeyEnv?: string;
  timeoutMs?: number;
  maxRetries?: number;
}

const MOCK_MODEL = /^mock-fnv1a-(\d+)$/;

/**
 * Map a model identifier to an encoder. `mock-fnv1a-<dim>` is built in;
 * every other identifier (LaBSE, D2F checkpoints, ...) is passed
 * verbatim to the configured embeddings service.
 */
export function resolveEncoder(modelId: string, opts: ResolveOptions = {}): Encoder {
  const mock = MOCK_MODEL.exec(modelId);
  if (mock) {
    return new MockEncoder(Number(mock[1]));
  }
  if (!opts.serviceUrl) {
    throw new ModelLoadError(
      `no local weights for model '${modelId}'; pass --service-url to reach a host serving it`,
    );
  }
  return new ServiceEncoder({
    url: opts.serviceUrl,
    modelName: modelId,
    apiKeyEnv: opts.apiKeyEnv,
    timeoutMs: opts.timeoutMs,
    maxRetries: opts.maxRetries,
  });
}
