/** Command-line front end; see runCli for the argument contract. */

import { parseArgs } from "node:util";

import { CorpusError } from "./corpus.js";
import {
  EncodingServiceError,
  ModelLoadError,
  resolveEncoder,
} from "./encoders.js";
import { DEFAULT_BATCH_SIZE, ExportError, runExport } from "./export.js";
import { StoreFormatError } from "./store.js";

const USAGE = `usage: icldst-export --corpus <corpus.jsonl> --model <id> --output <store.emb.jsonl>
       [--mode user_only|user_agent] [--batch-size N] [--service-url URL]
       [--api-key-env NAME] [--emit-rendered <path.json>]

Models: mock-fnv1a-<dim> runs locally; any other identifier (LaBSE, D2F
checkpoints, ...) is sent verbatim to the embeddings service at
--service-url and recorded verbatim in the store header.`;

export async function runCli(
  argv: string[],
  log: (line: string) => void = console.log,
  logError: (line: string) => void = console.error,
): Promise<number> {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        corpus: { type: "string" },
        model: { type: "string" },
        mode: { type: "string", default: "user_only" },
        output: { type: "string" },
        "batch-size": { type: "string", default: String(DEFAULT_BATCH_SIZE) },
        "service-url": { type: "string" },
        "api-key-env": { type: "string" },
        "emit-rendered": { type: "string" },
        help: { type: "boolean", default: false },
      },
      allowPositionals: false,
    });
  } catch (exc) {
    logError((exc as Error).message);
    logError(USAGE);
    return 2;
  }
  const values = parsed.values;
  if (values.help) {
    log(USAGE);
    return 0;
  }
  for (const required of ["corpus", "model", "output"] as const) {
    if (!values[required]) {
      logError(`missing required --${required}`);
      logError(USAGE);
      return 2;
    }
  }
  if (values.mode !== "user_only" && values.mode !== "user_agent") {
    logError(`--mode must be user_only or user_agent, got '${values.mode}'`);
    return 2;
  }
  const batchSize = Number(values["batch-size"]);
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    logError(`--batch-size must be a positive integer, got '${values["batch-size"]}'`);
    return 2;
  }

  try {
    const encoder = resolveEncoder(values.model!, {
      serviceUrl: values["service-url"],
      apiKeyEnv: values["api-key-env"],
    });
    const result = await runExport(
      {
        corpusPath: values.corpus!,
        modelId: values.model!,
        mode: values.mode,
        outputPath: values.output!,
        batchSize,
        serviceUrl: values["service-url"],
        apiKeyEnv: values["api-key-env"],
        emitRenderedPath: values["emit-rendered"],
      },
      encoder,
    );
    if (result.skipped) {
      log(`${result.outputPath} already covers the corpus (${result.count} vectors); left untouched`);
    } else {
      const resumed = result.resumedCount ? `, resumed ${result.resumedCount}` : "";
      log(
        `wrote ${result.outputPath} (${result.count} vectors, dim ${result.dimension}, ` +
          `model ${result.model}${resumed})`,
      );
    }
    return 0;
  } catch (exc) {
    if (
      exc instanceof ExportError ||
      exc instanceof CorpusError ||
      exc instanceof StoreFormatError ||
      exc instanceof ModelLoadError ||
      exc instanceof EncodingServiceError
    ) {
      logError(`error: ${exc.message}`);
      return 1;
    }
    throw exc;
  }
}
