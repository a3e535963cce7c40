/** End-to-end check against the Python pipeline: export a real blinded
 * bundle, play two scripted review sessions in this UI's session model,
 * feed the exported files back to the importer, and compare the report
 * against hand-computed numbers.
 */

import { execFileSync } from "node:child_process";
import { existsSync, mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, expect, test } from "vitest";

import { Choice, findMissingAssets, parseManifest } from "../src/schema.js";
import { ReviewSession } from "../src/session.js";

const work = mkdtempSync(join(tmpdir(), "soilref-ui-rt-"));

afterAll(() => {
  rmSync(work, { recursive: true, force: true });
});

function cli(...args: string[]): void {
  execFileSync("python3", ["-m", "soilref.cli", ...args], {
    stdio: ["ignore", "pipe", "pipe"],
  });
}

interface ReportRow {
  reviewer_id: string;
  n_items: number;
  manual_better_pct: number;
  ensemble_better_pct: number;
  similar_pct: number;
}

function rowFor(rows: ReportRow[], reviewer: string): ReportRow {
  const row = rows.find((r) => r.reviewer_id === reviewer);
  if (row === undefined) throw new Error(`no report row for ${reviewer}`);
  return row;
}

test("scripted sessions reproduce a hand-computed report through import-review", { timeout: 300_000 }, async () => {
  const ds = join(work, "ds");
  const run = join(work, "run");
  const refined = join(work, "refined");
  const bundle = join(work, "bundle");
  const report = join(work, "report");

  const trainConfig = join(work, "train.json");
  writeFileSync(trainConfig, JSON.stringify({ epochs: 2, batch_size: 4 }));

  cli("gen", "--n", "20", "--seed", "21", "--out", ds, "--quiet");
  cli("train", "--data", ds, "--seed", "5", "--config", trainConfig, "--out", run, "--quiet");
  cli("refine", "--data", ds, "--checkpoint", join(run, "stage2.ckpt"), "--out", refined, "--quiet");
  cli(
    "export-review",
    "--data", ds,
    "--refined", refined,
    "--seed", "13",
    "--fraction", "1.0",
    "--out", bundle,
    "--quiet",
  );

  // The manifest the UI will load must parse cleanly and reference only
  // files that exist: this pins writer and reader to the same schema.
  const manifest = parseManifest(JSON.parse(readFileSync(join(bundle, "manifest.json"), "utf8")));
  expect(manifest.items).toHaveLength(4);
  const missing = await findMissingAssets(manifest, async (p) => existsSync(join(bundle, p)));
  expect(missing).toEqual([]);
  const publicText = readFileSync(join(bundle, "manifest.json"), "utf8");
  expect(publicText).not.toMatch(/manual|ensemble/);

  // The unblinding key never enters the manifest; the test reads it from
  // the private side so it can script choices by annotation source.
  const secret = JSON.parse(readFileSync(join(bundle, "private", "assignments.json"), "utf8"));
  const atA: Record<string, string> = secret.items;
  const ensemblePos = (id: string): Choice => (atA[id] === "ensemble" ? "A" : "B");
  const manualPos = (id: string): Choice => (atA[id] === "ensemble" ? "B" : "A");

  const clock = () => "2026-08-17T12:00:00.000Z";

  // alice prefers the refined annotation every time: 0 / 100 / 0.
  const alice = new ReviewSession(manifest, "alice");
  for (const it of manifest.items) alice.record(it.item_id, ensemblePos(it.item_id), clock);
  expect(alice.isComplete()).toBe(true);

  // bob: one manual, one refined, two similar: 25 / 25 / 50. The second
  // similar starts as a wrong first click and is revised, so the importer's
  // last-record-wins rule is on the line here too.
  const bob = new ReviewSession(manifest, "bob");
  const ids = manifest.items.map((it) => it.item_id);
  bob.record(ids[0]!, manualPos(ids[0]!), clock);
  bob.record(ids[1]!, ensemblePos(ids[1]!), clock);
  bob.record(ids[2]!, "similar", clock);
  bob.record(ids[3]!, manualPos(ids[3]!), clock);
  bob.revise(ids[3]!, "similar", clock);
  expect(bob.log).toHaveLength(5);

  const aliceFile = join(work, "alice.jsonl");
  const bobFile = join(work, "bob.jsonl");
  writeFileSync(aliceFile, alice.exportJsonl());
  writeFileSync(bobFile, bob.exportJsonl());

  cli("import-review", "--bundle", bundle, aliceFile, bobFile, "--out", report, "--quiet");

  const rep = JSON.parse(readFileSync(join(report, "review_report.json"), "utf8"));
  const rows: ReportRow[] = rep.rows;
  expect(rows).toHaveLength(2);

  const a = rowFor(rows, "alice");
  expect(a.n_items).toBe(4);
  expect(a.manual_better_pct).toBe(0);
  expect(a.ensemble_better_pct).toBe(100);
  expect(a.similar_pct).toBe(0);

  const b = rowFor(rows, "bob");
  expect(b.n_items).toBe(4);
  expect(b.manual_better_pct).toBe(25);
  expect(b.ensemble_better_pct).toBe(25);
  expect(b.similar_pct).toBe(50);

  expect(rep.average.manual_better_pct).toBe(12.5);
  expect(rep.average.ensemble_better_pct).toBe(62.5);
  expect(rep.average.similar_pct).toBe(25);
});
