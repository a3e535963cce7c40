/** Review session state: an append-only decision log over a loaded bundle.
 *
 * The log keeps every record, including revisions; the latest record per
 * item is the effective decision, which is exactly how the CLI's importer
 * aggregates. Nothing in the session knows which overlay is the manual
 * annotation: that mapping never enters the bundle's public files.
 */

import {
  Choice,
  Decision,
  Manifest,
  ReviewItem,
  ResultsError,
  serializeDecision,
} from "./schema.js";

export class DecisionError extends Error {}

export class ReviewSession {
  readonly items: readonly ReviewItem[];
  readonly reviewerId: string;
  private readonly byId: Map<string, ReviewItem>;
  private readonly logRecords: Decision[] = [];
  private readonly latest: Map<string, Decision> = new Map();

  constructor(manifest: Manifest, reviewerId: string, priorLog: Decision[] = []) {
    if (reviewerId.trim() === "") {
      throw new DecisionError("reviewer id must not be empty");
    }
    this.items = manifest.items;
    this.reviewerId = reviewerId;
    this.byId = new Map(manifest.items.map((it) => [it.item_id, it]));
    for (const d of priorLog) {
      if (d.reviewer_id !== reviewerId) {
        throw new ResultsError(
          `results file belongs to reviewer ${d.reviewer_id}, session is ${reviewerId}`,
        );
      }
      if (!this.byId.has(d.item_id)) {
        throw new ResultsError(`results file mentions unknown item ${d.item_id}`);
      }
      this.logRecords.push(d);
      this.latest.set(d.item_id, d);
    }
  }

  get log(): readonly Decision[] {
    return this.logRecords;
  }

  decisionFor(itemId: string): Decision | undefined {
    return this.latest.get(itemId);
  }

  get decidedCount(): number {
    return this.latest.size;
  }

  get total(): number {
    return this.items.length;
  }

  isComplete(): boolean {
    return this.decidedCount === this.total;
  }

  /** Index of the first undecided item at or after `from` (wrapping), or -1. */
  nextUndecided(from = 0): number {
    const n = this.items.length;
    for (let k = 0; k < n; k++) {
      const i = (from + k) % n;
      const item = this.items[i];
      if (item !== undefined && !this.latest.has(item.item_id)) return i;
    }
    return -1;
  }

  /** Record a first decision; a duplicate without explicit revision is rejected. */
  record(itemId: string, choice: Choice, now: () => string = isoNow): Decision {
    if (this.latest.has(itemId)) {
      throw new DecisionError(`item ${itemId} already decided; revise explicitly`);
    }
    return this.append(itemId, choice, now);
  }

  /** Replace an existing decision by appending a newer record. */
  revise(itemId: string, choice: Choice, now: () => string = isoNow): Decision {
    if (!this.latest.has(itemId)) {
      throw new DecisionError(`item ${itemId} has no decision to revise`);
    }
    return this.append(itemId, choice, now);
  }

  private append(itemId: string, choice: Choice, now: () => string): Decision {
    if (!this.byId.has(itemId)) {
      throw new DecisionError(`unknown item ${itemId}`);
    }
    const d: Decision = {
      item_id: itemId,
      reviewer_id: this.reviewerId,
      choice,
      timestamp: now(),
    };
    this.logRecords.push(d);
    this.latest.set(itemId, d);
    return d;
  }

  /** Full append-only log as a JSON-lines file body. */
  exportJsonl(): string {
    return this.logRecords.map(serializeDecision).join("\n") + (this.logRecords.length ? "\n" : "");
  }
}

function isoNow(): string {
  return new Date().toISOString();
}
