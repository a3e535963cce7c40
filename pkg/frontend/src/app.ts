/** DOM application. All document access happens inside initApp so the
 * module stays importable from test code that has no DOM. */

import {
  BundleError,
  Choice,
  KEY_TO_CHOICE,
  Manifest,
  ReviewItem,
  findMissingAssets,
  parseManifest,
  parseResultsJsonl,
} from "./schema.js";
import { DecisionError, ReviewSession } from "./session.js";

interface View {
  scale: number;
  tx: number;
  ty: number;
}

const CHOICE_LABELS: Record<Choice, string> = {
  A: "A is better",
  B: "B is better",
  similar: "Both similar",
};

export async function initApp(doc: Document, win: Window): Promise<void> {
  const root = doc.getElementById("app");
  if (!root) throw new Error("missing #app container");

  const params = new URLSearchParams(win.location.search);
  const bundleBase = normalizeBase(params.get("bundle") ?? "bundle/");

  let manifest: Manifest;
  try {
    const res = await win.fetch(bundleBase + "manifest.json");
    if (!res.ok) throw new BundleError(`manifest.json not found under ${bundleBase}`);
    manifest = parseManifest(await res.json());
  } catch (err) {
    renderBlockingError(doc, root, errText(err));
    return;
  }

  const missing = await findMissingAssets(manifest, async (path) => {
    try {
      const res = await win.fetch(bundleBase + path, { method: "HEAD" });
      return res.ok;
    } catch {
      return false;
    }
  });
  if (missing.length > 0) {
    renderBlockingError(doc, root, `bundle is missing ${missing.length} file(s): ${missing.join(", ")}`);
    return;
  }

  if (manifest.items.length === 0) {
    root.replaceChildren(el(doc, "div", "screen", "Nothing to review: the bundle has no items."));
    return;
  }

  renderSetup(doc, win, root, manifest, bundleBase);
}

function normalizeBase(base: string): string {
  return base.endsWith("/") ? base : base + "/";
}

function errText(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}

function el(doc: Document, tag: string, cls?: string, text?: string): HTMLElement {
  const node = doc.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderBlockingError(doc: Document, root: HTMLElement, message: string): void {
  const screen = el(doc, "div", "screen error");
  screen.append(el(doc, "h2", undefined, "Cannot load bundle"), el(doc, "p", undefined, message));
  root.replaceChildren(screen);
}

/** Reviewer-id entry plus optional progress restore from a results file. */
function renderSetup(
  doc: Document,
  win: Window,
  root: HTMLElement,
  manifest: Manifest,
  bundleBase: string,
): void {
  const screen = el(doc, "div", "screen");
  screen.append(el(doc, "h2", undefined, "Annotation review"));
  screen.append(
    el(doc, "p", undefined, `${manifest.items.length} item(s) to review. Enter a reviewer id to begin.`),
  );

  const idInput = doc.createElement("input");
  idInput.type = "text";
  idInput.placeholder = "reviewer id";

  const restoreInput = doc.createElement("input");
  restoreInput.type = "file";
  restoreInput.accept = ".jsonl,.txt,application/jsonl";
  const restoreLabel = el(doc, "label", "restore", "Restore progress from a results file (optional): ");
  restoreLabel.append(restoreInput);

  const start = el(doc, "button", undefined, "Start") as HTMLButtonElement;
  const note = el(doc, "p", "note");

  start.addEventListener("click", () => {
    void (async () => {
      const reviewerId = idInput.value.trim();
      if (reviewerId === "") {
        note.textContent = "Reviewer id must not be empty.";
        return;
      }
      try {
        const file = restoreInput.files?.[0];
        const prior = file ? parseResultsJsonl(await file.text()) : [];
        const session = new ReviewSession(manifest, reviewerId, prior);
        renderReview(doc, win, root, session, bundleBase);
      } catch (err) {
        note.textContent = errText(err);
      }
    })();
  });

  screen.append(idInput, restoreLabel, start, note);
  root.replaceChildren(screen);
}

function renderReview(
  doc: Document,
  win: Window,
  root: HTMLElement,
  session: ReviewSession,
  bundleBase: string,
): void {
  let index = Math.max(session.nextUndecided(), 0);
  let overlaysVisible = true;
  let reviseArmed = false;
  const view: View = { scale: 1, tx: 0, ty: 0 };

  const header = el(doc, "div", "header");
  const progress = el(doc, "span", "progress");
  const exportBtn = el(doc, "button", undefined, "Export results") as HTMLButtonElement;
  header.append(progress, exportBtn);

  const stage = el(doc, "div", "stage");
  const panels: { box: HTMLElement; img: HTMLImageElement; caption: HTMLElement }[] = [];
  for (const name of ["Original", "Annotation A", "Annotation B"]) {
    const panel = el(doc, "div", "panel");
    const caption = el(doc, "div", "caption", name);
    const box = el(doc, "div", "viewbox");
    const img = doc.createElement("img");
    img.draggable = false;
    box.append(img);
    panel.append(caption, box);
    stage.append(panel);
    panels.push({ box, img, caption });
  }

  const controls = el(doc, "div", "controls");
  const choiceButtons = new Map<Choice, HTMLButtonElement>();
  (Object.entries(CHOICE_LABELS) as [Choice, string][]).forEach(([choice, label], i) => {
    const btn = el(doc, "button", "choice", `${label} [${i + 1}]`) as HTMLButtonElement;
    btn.addEventListener("click", () => decide(choice));
    choiceButtons.set(choice, btn);
    controls.append(btn);
  });
  const reviseBtn = el(doc, "button", "revise", "Revise decision") as HTMLButtonElement;
  reviseBtn.addEventListener("click", () => {
    reviseArmed = true;
    update();
  });
  const toggleBtn = el(doc, "button", undefined, "Hide overlays [t]") as HTMLButtonElement;
  toggleBtn.addEventListener("click", () => {
    overlaysVisible = !overlaysVisible;
    update();
  });
  const prevBtn = el(doc, "button", undefined, "Prev") as HTMLButtonElement;
  const nextBtn = el(doc, "button", undefined, "Next") as HTMLButtonElement;
  prevBtn.addEventListener("click", () => move(-1));
  nextBtn.addEventListener("click", () => move(1));
  const status = el(doc, "div", "status");
  controls.append(reviseBtn, toggleBtn, prevBtn, nextBtn);

  root.replaceChildren(header, stage, controls, status);

  function current(): ReviewItem {
    const item = session.items[index];
    if (!item) throw new Error(`item index ${index} out of range`);
    return item;
  }

  function move(delta: number): void {
    const n = session.items.length;
    index = (index + delta + n) % n;
    resetView();
    reviseArmed = false;
    update();
  }

  function decide(choice: Choice): void {
    const item = current();
    const existing = session.decisionFor(item.item_id);
    try {
      if (existing && !reviseArmed) {
        throw new DecisionError("already decided; press Revise to change it");
      }
      if (existing) {
        session.revise(item.item_id, choice);
      } else {
        session.record(item.item_id, choice);
      }
    } catch (err) {
      status.textContent = errText(err);
      return;
    }
    reviseArmed = false;
    const next = session.nextUndecided(index);
    if (next >= 0) {
      index = next;
      resetView();
    }
    update();
  }

  function resetView(): void {
    view.scale = 1;
    view.tx = 0;
    view.ty = 0;
    applyView();
  }

  function applyView(): void {
    for (const p of panels) {
      p.img.style.transform = `translate(${view.tx}px, ${view.ty}px) scale(${view.scale})`;
    }
  }

  // synchronized zoom/pan: one shared transform drives all three panels
  for (const p of panels) {
    p.box.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
      view.scale = Math.min(32, Math.max(1, view.scale * factor));
      if (view.scale === 1) {
        view.tx = 0;
        view.ty = 0;
      }
      applyView();
    });
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    p.box.addEventListener("pointerdown", (ev) => {
      dragging = true;
      lastX = ev.clientX;
      lastY = ev.clientY;
      p.box.setPointerCapture(ev.pointerId);
    });
    p.box.addEventListener("pointermove", (ev) => {
      if (!dragging) return;
      view.tx += ev.clientX - lastX;
      view.ty += ev.clientY - lastY;
      lastX = ev.clientX;
      lastY = ev.clientY;
      applyView();
    });
    p.box.addEventListener("pointerup", () => {
      dragging = false;
    });
  }

  doc.addEventListener("keydown", (ev) => {
    const choice = KEY_TO_CHOICE[ev.key];
    if (choice) {
      decide(choice);
    } else if (ev.key === "ArrowLeft") {
      move(-1);
    } else if (ev.key === "ArrowRight") {
      move(1);
    } else if (ev.key === "t") {
      overlaysVisible = !overlaysVisible;
      update();
    } else if (ev.key === "0") {
      resetView();
    }
  });

  exportBtn.addEventListener("click", () => {
    const blob = new Blob([session.exportJsonl()], { type: "application/jsonl" });
    const a = doc.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = `review-${session.reviewerId}.jsonl`;
    a.click();
    URL.revokeObjectURL(a.href);
  });

  function update(): void {
    const item = current();
    const decided = session.decisionFor(item.item_id);
    progress.textContent =
      `${session.decidedCount}/${session.total} decided - item ${index + 1}: ${item.item_id}` +
      (session.isComplete() ? " - all done, export your results" : "");

    const orig = panels[0];
    const a = panels[1];
    const b = panels[2];
    if (orig) orig.img.src = bundleBase + item.original;
    if (a) a.img.src = bundleBase + (overlaysVisible ? item.overlay_a : item.original);
    if (b) b.img.src = bundleBase + (overlaysVisible ? item.overlay_b : item.original);
    toggleBtn.textContent = overlaysVisible ? "Hide overlays [t]" : "Show overlays [t]";

    const canDecide = decided === undefined || reviseArmed;
    for (const [choice, btn] of choiceButtons) {
      btn.disabled = !canDecide;
      btn.classList.toggle("picked", decided?.choice === choice);
    }
    reviseBtn.disabled = decided === undefined || reviseArmed;
    status.textContent = decided
      ? `Decided: ${CHOICE_LABELS[decided.choice]}${reviseArmed ? " (revising)" : ""}`
      : "Undecided";
  }

  applyView();
  update();
  void win; // reserved for future viewport-size handling
}
