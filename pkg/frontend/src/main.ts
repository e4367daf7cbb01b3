import { ApiClient, FetchLike, QueryMode } from "./api.js";
import { DIMMED_STYLE, SELECTED_STYLE, drawOverlay } from "./overlay.js";
import { ViewerController } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const api = new ApiClient("", fetch.bind(window) as FetchLike);
  const meta = await api.meta();
  const controller = new ViewerController(api, meta.frames);

  const frameImg = el<HTMLImageElement>("frame");
  const overlayCanvas = el<HTMLCanvasElement>("overlay");
  const slider = el<HTMLInputElement>("timeline");
  const ticks = el<HTMLDivElement>("ticks");
  const queryInput = el<HTMLInputElement>("query");
  const modeSelect = el<HTMLSelectElement>("mode");
  const submit = el<HTMLButtonElement>("submit");
  const message = el<HTMLDivElement>("message");
  const scorePlot = el<HTMLCanvasElement>("scores");

  overlayCanvas.width = meta.width;
  overlayCanvas.height = meta.height;
  slider.min = "0";
  slider.max = String(meta.frames - 1);

  function renderTimeline(): void {
    const highlighted = controller.highlightedFrames();
    ticks.replaceChildren(
      ...Array.from({ length: meta.frames }, (_, t) => {
        const tick = document.createElement("span");
        tick.className = highlighted.has(t) ? "tick selected" : "tick";
        tick.textContent = String(t);
        tick.onclick = () => {
          controller.scrub(t);
          render();
        };
        return tick;
      }),
    );
  }

  function renderScores(): void {
    const ctx = scorePlot.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, scorePlot.width, scorePlot.height);
    const scores = controller.plotScores();
    const raw = controller.rawScores();
    const step = scorePlot.width / Math.max(scores.length, 1);
    ctx.fillStyle = "#3366cc";
    scores.forEach((s, t) => {
      if (s === null) return;
      const y = (1 - s) * (scorePlot.height - 4) + 2;
      ctx.fillRect(t * step + step / 2 - 2, y - 2, 4, 4);
    });
    const threshold = controller.plotThreshold();
    if (threshold !== null) {
      const y = (1 - threshold) * (scorePlot.height - 4) + 2;
      ctx.strokeStyle = "#cc3333";
      ctx.beginPath();
      ctx.moveTo(0, y);
      ctx.lineTo(scorePlot.width, y);
      ctx.stroke();
    }
    scorePlot.title = raw
      .map((s, t) => `frame ${t}: ${s === null ? "n/a" : s.toFixed(4)}`)
      .join("\n");
  }

  function render(): void {
    const t = controller.state.frame;
    slider.value = String(t);
    frameImg.src = api.frameUrl(t);
    const ctx = overlayCanvas.getContext("2d");
    if (ctx) {
      ctx.clearRect(0, 0, overlayCanvas.width, overlayCanvas.height);
      const mask = controller.maskFor(t);
      if (controller.state.overlay === "mask" && mask) {
        drawOverlay(ctx, mask, controller.frameSelected(t) ? SELECTED_STYLE : DIMMED_STYLE);
      }
    }
    if (controller.state.error) {
      message.textContent = controller.state.error;
    } else if (controller.state.noMatch) {
      message.textContent = "No match found for this query.";
    } else {
      message.textContent = "";
    }
    renderTimeline();
    renderScores();
  }

  slider.oninput = () => {
    controller.scrub(Number(slider.value));
    render();
  };
  submit.onclick = async () => {
    await controller.submitQuery(queryInput.value, modeSelect.value as QueryMode);
    render();
  };

  render();
}

boot().catch((err) => {
  const message = document.getElementById("message");
  if (message) message.textContent = `failed to load scene: ${err}`;
});
