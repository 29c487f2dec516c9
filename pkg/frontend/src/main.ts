import { ViewerApp } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const app = new ViewerApp(
  el<HTMLCanvasElement>("view"),
  el("joints"),
  el("banner"),
  el("stats"),
  el("modes"),
);

const urlInput = el<HTMLInputElement>("url");
el<HTMLButtonElement>("connect").addEventListener("click", () =>
  app.connect(urlInput.value),
);
el<HTMLButtonElement>("stats-btn").addEventListener("click", () => app.requestStats());

el<HTMLInputElement>("sequence").addEventListener("change", async (ev) => {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (file) app.loadPoseSequence(await file.text());
});

setInterval(() => app.requestStats(), 2000);
