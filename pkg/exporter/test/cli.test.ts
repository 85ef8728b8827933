import { existsSync, mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { beforeEach, describe, expect, it } from "vitest";

import { runCli } from "../src/cli.js";
import { readStore } from "../src/store.js";

let dir: string;
let out: string[];
let errors: string[];

beforeEach(() => {
  dir = mkdtempSync(join(tmpdir(), "exporter-cli-"));
  out = [];
  errors = [];
});

function cli(argv: string[]): Promise<number> {
  return runCli(argv, (line) => out.push(line), (line) => errors.push(line));
}

function writeCorpus(): string {
  const path = join(dir, "c.jsonl");
  const rows = ["Y0000:0", "Y0001:0"].map((id, i) =>
    JSON.stringify({
      sample_id: id,
      split: "test",
      history: [{ speaker: "user", text: `ride number ${i}` }],
      domains: ["taxi"],
      state: { taxi: { destination: "town" } },
    }),
  );
  writeFileSync(path, rows.join("\n") + "\n", "utf-8");
  return path;
}

describe("runCli", () => {
  it("exports a corpus with the mock model", async () => {
    const corpus = writeCorpus();
    const output = join(dir, "c.emb.jsonl");
    const code = await cli([
      "--corpus", corpus,
      "--model", "mock-fnv1a-16",
      "--output", output,
    ]);

    expect(code).toBe(0);
    expect(errors).toEqual([]);
    expect(out).toHaveLength(1);
    expect(out[0]).toBe(`wrote ${output} (2 vectors, dim 16, model mock-fnv1a-16)`);
    expect(readStore(output).header.count).toBe(2);
  });

  it("reports an untouched store on the second run", async () => {
    const corpus = writeCorpus();
    const output = join(dir, "c.emb.jsonl");
    await cli(["--corpus", corpus, "--model", "mock-fnv1a-16", "--output", output]);

    const code = await cli(["--corpus", corpus, "--model", "mock-fnv1a-16", "--output", output]);
    expect(code).toBe(0);
    expect(out[1]).toBe(`${output} already covers the corpus (2 vectors); left untouched`);
  });

  it("mentions the resumed count when a checkpoint was used", async () => {
    const corpus = writeCorpus();
    const output = join(dir, "c.emb.jsonl");
    const partial = JSON.stringify({ id: "Y0000:0", v: Array.from({ length: 16 }, () => 0.25) });
    writeFileSync(`${output}.partial`, partial + "\n", "utf-8");

    const code = await cli(["--corpus", corpus, "--model", "mock-fnv1a-16", "--output", output]);
    expect(code).toBe(0);
    expect(out[0]).toContain(", resumed 1)");
  });

  it("writes the rendered-text fixture when asked", async () => {
    const corpus = writeCorpus();
    const rendered = join(dir, "rendered.json");
    const code = await cli([
      "--corpus", corpus,
      "--model", "mock-fnv1a-16",
      "--output", join(dir, "c.emb.jsonl"),
      "--emit-rendered", rendered,
    ]);
    expect(code).toBe(0);
    expect(JSON.parse(readFileSync(rendered, "utf-8"))).toHaveLength(4);
  });

  it("prints usage and exits 2 when required flags are missing", async () => {
    const code = await cli(["--model", "mock-fnv1a-16"]);
    expect(code).toBe(2);
    expect(errors[0]).toBe("missing required --corpus");
    expect(errors[1]).toContain("usage: icldst-export");
  });

  it("rejects unknown flags with usage", async () => {
    const code = await cli(["--nope"]);
    expect(code).toBe(2);
    expect(errors.some((line) => line.includes("usage: icldst-export"))).toBe(true);
  });

  it("rejects a bad mode", async () => {
    const code = await cli([
      "--corpus", "x.jsonl", "--model", "m", "--output", "o", "--mode", "agent_only",
    ]);
    expect(code).toBe(2);
    expect(errors[0]).toContain("--mode must be user_only or user_agent");
  });

  it("rejects a non-integer batch size", async () => {
    const code = await cli([
      "--corpus", "x.jsonl", "--model", "m", "--output", "o", "--batch-size", "lots",
    ]);
    expect(code).toBe(2);
    expect(errors[0]).toContain("--batch-size must be a positive integer");
  });

  it("exits 1 when the model has no local weights and no service url", async () => {
    const corpus = writeCorpus();
    const code = await cli(["--corpus", corpus, "--model", "LaBSE", "--output", join(dir, "o")]);
    expect(code).toBe(1);
    expect(errors[0]).toBe(
      "error: no local weights for model 'LaBSE'; pass --service-url to reach a host serving it",
    );
  });

  it("exits 1 on corpus problems without writing a store", async () => {
    const corpus = join(dir, "broken.jsonl");
    writeFileSync(corpus, "not json\n", "utf-8");
    const output = join(dir, "o.emb.jsonl");
    const code = await cli(["--corpus", corpus, "--model", "mock-fnv1a-16", "--output", output]);
    expect(code).toBe(1);
    expect(errors[0]).toMatch(/^error: .*line 1/);
    expect(existsSync(output)).toBe(false);
  });

  it("prints usage on --help and exits 0", async () => {
    const code = await cli(["--help"]);
    expect(code).toBe(0);
    expect(out[0]).toContain("usage: icldst-export");
    expect(out[0]).toContain("mock-fnv1a-<dim>");
  });
});
