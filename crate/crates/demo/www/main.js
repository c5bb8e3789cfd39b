import init, { suite_layout, render_clip, clip_caption, regularizers, sigma_objective } from "./pkg/multitrain_demo.js";

const $ = (id) => document.getElementById(id);

await init();
$("status").textContent = "";

const layout = suite_layout();
const [T, H, W, C, K] = layout;
const clipsPer = layout.slice(5);

for (let k = 0; k < K; k++) {
  $("dataset").add(new Option(clip_caption(k, 0).split("/")[0], k));
}

let frames = null;
let frame = 0;

function loadClip() {
  const k = Number($("dataset").value);
  const s = Math.min(Math.max(0, Number($("sample").value)), clipsPer[k] - 1);
  $("sample").value = s;
  try {
    frames = render_clip(k, s);
    $("caption").textContent = clip_caption(k, s);
  } catch (e) {
    frames = null;
    $("caption").textContent = String(e);
  }
}

function drawFrame() {
  const ctx = $("clip").getContext("2d");
  if (frames) {
    const img = ctx.createImageData(W, H);
    const off = frame * H * W * C;
    for (let i = 0; i < H * W; i++) {
      const v = Math.round(255 * Math.min(1, Math.max(0, frames[off + i * C])));
      img.data.set([v, v, v, 255], 4 * i);
    }
    const tmp = new OffscreenCanvas(W, H);
    tmp.getContext("2d").putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(tmp, 0, 0, $("clip").width, $("clip").height);
    frame = (frame + 1) % T;
  }
  setTimeout(drawFrame, 150);
}

$("dataset").onchange = loadClip;
$("sample").onchange = loadClip;
$("random-clip").onclick = () => {
  $("sample").value = Math.floor(Math.random() * clipsPer[Number($("dataset").value)]);
  loadClip();
};
loadClip();
drawFrame();

let points = [];
const span = 3;

function drawPoints() {
  const cv = $("points");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(cv.width / 2, 0); ctx.lineTo(cv.width / 2, cv.height);
  ctx.moveTo(0, cv.height / 2); ctx.lineTo(cv.width, cv.height / 2);
  ctx.stroke();
  ctx.fillStyle = "#c33";
  for (const [x, y] of points) {
    ctx.beginPath();
    ctx.arc((x / span + 0.5) * cv.width, (0.5 - y / span) * cv.height, 4, 0, 2 * Math.PI);
    ctx.fill();
  }
  if (points.length < 2) {
    $("reg").textContent = "need at least two points";
    return;
  }
  const [v, c] = regularizers(new Float64Array(points.flat()), 2, 1e-4);
  $("reg").textContent = `variance ${v.toFixed(4)}   covariance ${c.toFixed(4)}   (${points.length} points)`;
}

const gauss = () => Math.sqrt(-2 * Math.log(1 - Math.random())) * Math.cos(2 * Math.PI * Math.random());

$("points").onclick = (e) => {
  if (e.shiftKey) {
    points = [];
  } else {
    const r = $("points").getBoundingClientRect();
    points.push([((e.clientX - r.left) / r.width - 0.5) * span, (0.5 - (e.clientY - r.top) / r.height) * span]);
  }
  drawPoints();
};
$("spread").onclick = () => { points = Array.from({ length: 32 }, () => [gauss(), gauss()]); drawPoints(); };
$("collapse").onclick = () => { points = Array.from({ length: 32 }, () => [0.05 * gauss(), 0.05 * gauss()]); drawPoints(); };
$("correlate").onclick = () => {
  points = Array.from({ length: 32 }, () => { const t = gauss(); return [t, 0.9 * t + 0.2 * gauss()]; });
  drawPoints();
};
$("spread").onclick();

function drawSigma() {
  const L = Number($("loss").value);
  $("loss-value").textContent = L.toFixed(2);
  const n = 200;
  const sigmas = Float64Array.from({ length: n }, (_, i) => 0.1 + (4.9 * i) / (n - 1));
  const out = sigma_objective(L, sigmas);
  const values = Array.from({ length: n }, (_, i) => out[2 * i]);
  let best = 0;
  for (let i = 1; i < n; i++) if (values[i] < values[best]) best = i;
  $("sigma-min").textContent =
    `grid minimum at σ = ${sigmas[best].toFixed(3)}, √L = ${Math.sqrt(L).toFixed(3)}, slope there ${out[2 * best + 1].toExponential(2)}`;

  const cv = $("sigma");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const lo = values[best] - 0.2;
  const hi = lo + 4;
  const px = (s) => ((s - 0.1) / 4.9) * cv.width;
  const py = (v) => cv.height * (1 - (v - lo) / (hi - lo));
  ctx.strokeStyle = "#236";
  ctx.beginPath();
  values.forEach((v, i) => (i ? ctx.lineTo(px(sigmas[i]), py(v)) : ctx.moveTo(px(sigmas[i]), py(v))));
  ctx.stroke();
  ctx.strokeStyle = "#c33";
  ctx.beginPath();
  ctx.moveTo(px(Math.sqrt(L)), 0);
  ctx.lineTo(px(Math.sqrt(L)), cv.height);
  ctx.stroke();
}

$("loss").oninput = drawSigma;
drawSigma();
