/** Bundle manifest and reviewer-results schema shared with the CLI. */

export const BUNDLE_FORMAT = "soilref-review-bundle";
export const CHOICES = ["A", "B", "similar"] as const;
export type Choice = (typeof CHOICES)[number];

/** Keyboard bindings for recording a decision. */
export const KEY_TO_CHOICE: Readonly<Record<string, Choice>> = {
  "1": "A",
  "2": "B",
  "3": "similar",
};

export interface ReviewItem {
  item_id: string;
  /** Bundle-relative asset paths. Which of A/B is the manual annotation is
   * deliberately absent: blinding lives in the exporter's private files. */
  original: string;
  overlay_a: string;
  overlay_b: string;
  width: number;
  height: number;
}

export interface Manifest {
  format: string;
  version: number;
  alpha: number;
  items: ReviewItem[];
}

export interface Decision {
  item_id: string;
  reviewer_id: string;
  choice: Choice;
  timestamp: string;
}

export class BundleError extends Error {}
export class ResultsError extends Error {}

function isChoice(v: unknown): v is Choice {
  return typeof v === "string" && (CHOICES as readonly string[]).includes(v);
}

function asRecord(v: unknown, what: string): Record<string, unknown> {
  if (typeof v !== "object" || v === null || Array.isArray(v)) {
    throw new BundleError(`${what} must be a JSON object`);
  }
  return v as Record<string, unknown>;
}

/** Validate a parsed manifest.json; throws BundleError with a readable message. */
export function parseManifest(raw: unknown): Manifest {
  const doc = asRecord(raw, "manifest");
  if (doc.format !== BUNDLE_FORMAT) {
    throw new BundleError(`not a review bundle manifest (format=${String(doc.format)})`);
  }
  if (typeof doc.version !== "number") {
    throw new BundleError("manifest version missing");
  }
  if (typeof doc.alpha !== "number" || doc.alpha < 0 || doc.alpha > 1) {
    throw new BundleError("manifest alpha must be a number in [0, 1]");
  }
  if (!Array.isArray(doc.items)) {
    throw new BundleError("manifest items must be an array");
  }
  const seen = new Set<string>();
  const items = doc.items.map((rawItem, i) => {
    const it = asRecord(rawItem, `item ${i}`);
    const id = it.item_id;
    if (typeof id !== "string" || id.length === 0) {
      throw new BundleError(`item ${i}: item_id missing`);
    }
    if (seen.has(id)) {
      throw new BundleError(`duplicate item_id ${id}`);
    }
    seen.add(id);
    for (const key of ["original", "overlay_a", "overlay_b"] as const) {
      if (typeof it[key] !== "string" || (it[key] as string).length === 0) {
        throw new BundleError(`item ${id}: ${key} asset path missing`);
      }
    }
    for (const key of ["width", "height"] as const) {
      if (typeof it[key] !== "number" || !Number.isInteger(it[key]) || (it[key] as number) <= 0) {
        throw new BundleError(`item ${id}: ${key} must be a positive integer`);
      }
    }
    return {
      item_id: id,
      original: it.original as string,
      overlay_a: it.overlay_a as string,
      overlay_b: it.overlay_b as string,
      width: it.width as number,
      height: it.height as number,
    };
  });
  return { format: doc.format, version: doc.version, alpha: doc.alpha, items };
}

/** Every asset path of every item, in manifest order, without duplicates. */
export function assetPaths(manifest: Manifest): string[] {
  const out: string[] = [];
  for (const it of manifest.items) {
    out.push(it.original, it.overlay_a, it.overlay_b);
  }
  return [...new Set(out)];
}

/** Check asset presence through an injected probe; returns missing paths. */
export async function findMissingAssets(
  manifest: Manifest,
  exists: (path: string) => Promise<boolean>,
): Promise<string[]> {
  const missing: string[] = [];
  for (const path of assetPaths(manifest)) {
    if (!(await exists(path))) missing.push(path);
  }
  return missing;
}

/** One decision as a JSON line (no trailing newline). */
export function serializeDecision(d: Decision): string {
  return JSON.stringify({
    item_id: d.item_id,
    reviewer_id: d.reviewer_id,
    choice: d.choice,
    timestamp: d.timestamp,
  });
}

/** Parse a reviewer-results file (JSON lines); throws ResultsError. */
export function parseResultsJsonl(text: string): Decision[] {
  const decisions: Decision[] = [];
  const lines = text.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i] ?? "";
    if (line.trim() === "") continue;
    let rec: unknown;
    try {
      rec = JSON.parse(line);
    } catch {
      throw new ResultsError(`line ${i + 1}: not valid JSON`);
    }
    const obj = typeof rec === "object" && rec !== null ? (rec as Record<string, unknown>) : null;
    if (obj === null) throw new ResultsError(`line ${i + 1}: decision must be an object`);
    const { item_id, reviewer_id, choice, timestamp } = obj;
    if (typeof item_id !== "string" || item_id.length === 0) {
      throw new ResultsError(`line ${i + 1}: item_id missing`);
    }
    if (typeof reviewer_id !== "string" || reviewer_id.length === 0) {
      throw new ResultsError(`line ${i + 1}: reviewer_id missing`);
    }
    if (!isChoice(choice)) {
      throw new ResultsError(`line ${i + 1}: choice must be one of ${CHOICES.join(", ")}`);
    }
    if (typeof timestamp !== "string" || timestamp.length === 0) {
      throw new ResultsError(`line ${i + 1}: timestamp missing`);
    }
    decisions.push({ item_id, reviewer_id, choice, timestamp });
  }
  return decisions;
}
