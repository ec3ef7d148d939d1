import init, { contrast_raster, grid_boxes, solve_field } from "./pkg/helmscat_web.js";

const canvas = document.getElementById("view");
const ctx = canvas.getContext("2d");
const status = document.getElementById("status");

function params() {
  return {
    kind: document.getElementById("kind").value,
    kappa: Number(document.getElementById("kappa").value),
    eps: Number(document.getElementById("eps").value),
    p: Number(document.getElementById("p").value),
  };
}

// blue to white to red
function colour(t) {
  const s = Math.max(-1, Math.min(1, t));
  const a = Math.round(255 * (1 - Math.abs(s)));
  return s >= 0 ? [255, a, a] : [a, a, 255];
}

function drawContrast() {
  const { kind } = params();
  const n = 256;
  const data = contrast_raster(kind, n);
  let max = 0;
  for (let k = 0; k < n * n; k++) max = Math.max(max, Math.abs(data[k]));
  const img = ctx.createImageData(n, n);
  for (let j = 0; j < n; j++) {
    for (let i = 0; i < n; i++) {
      const [r, g, b] = colour(max > 0 ? data[j * n + i] / max : 0);
      const o = 4 * ((n - 1 - j) * n + i);
      img.data.set([r, g, b, 255], o);
    }
  }
  const off = new OffscreenCanvas(n, n);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  status.textContent = `${kind}: max |q| = ${max.toFixed(3)}`;
}

function toCanvas(x, y, box) {
  const [cx, cy, h] = box;
  return [((x - cx + h) / (2 * h)) * canvas.width, ((cy + h - y) / (2 * h)) * canvas.height];
}

function domain(boxes) {
  let lo = [Infinity, Infinity], hi = [-Infinity, -Infinity];
  for (let k = 0; k < boxes.length; k += 4) {
    lo = [Math.min(lo[0], boxes[k] - boxes[k + 2]), Math.min(lo[1], boxes[k + 1] - boxes[k + 2])];
    hi = [Math.max(hi[0], boxes[k] + boxes[k + 2]), Math.max(hi[1], boxes[k + 1] + boxes[k + 2])];
  }
  return [(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (hi[0] - lo[0]) / 2];
}

function drawGrid() {
  const { kind, kappa, eps, p } = params();
  const boxes = grid_boxes(kind, kappa, eps, p);
  const dom = domain(boxes);
  ctx.fillStyle = "white";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#333";
  for (let k = 0; k < boxes.length; k += 4) {
    const [x0, y0] = toCanvas(boxes[k] - boxes[k + 2], boxes[k + 1] + boxes[k + 2], dom);
    const w = (boxes[k + 2] / dom[2]) * canvas.width;
    ctx.strokeRect(x0, y0, w, w);
  }
  const leaves = boxes.length / 4;
  status.textContent = `${leaves} leaves, N = ${leaves * p * p}`;
}

function drawField() {
  const { kind, kappa, eps, p } = params();
  status.textContent = "solving...";
  setTimeout(() => {
    let res;
    try {
      res = solve_field(kind, kappa, eps, p);
    } catch (e) {
      status.textContent = String(e);
      return;
    }
    const pts = res.points, tot = res.total;
    const boxes = grid_boxes(kind, kappa, eps, p);
    const dom = domain(boxes);
    let max = 0;
    for (let k = 0; k < tot.length; k += 2) max = Math.max(max, Math.abs(tot[k]));
    ctx.fillStyle = "white";
    ctx.fillRect(0, 0, canvas.width, canvas.height);
    const r = Math.max(1.5, canvas.width / Math.sqrt(res.n) / 2);
    for (let k = 0; k < pts.length; k += 2) {
      const [x, y] = toCanvas(pts[k], pts[k + 1], dom);
      const [cr, cg, cb] = colour(tot[k] / max);
      ctx.fillStyle = `rgb(${cr},${cg},${cb})`;
      ctx.fillRect(x - r, y - r, 2 * r, 2 * r);
    }
    status.textContent = `Re u_total: N = ${res.n}, ${res.iterations} GMRES iterations, ` +
      `residual ${res.residual.toExponential(2)}, max E ${res.max_error.toExponential(2)}`;
    res.free();
  }, 10);
}

function guard(f) {
  return () => {
    try {
      f();
    } catch (e) {
      status.textContent = String(e);
    }
  };
}

await init();
document.getElementById("show-contrast").onclick = guard(drawContrast);
document.getElementById("show-grid").onclick = guard(drawGrid);
document.getElementById("show-field").onclick = guard(drawField);
drawContrast();
