import init, { transport, barycenter, defend } from "./pkg/raid_demo.js";

const COLORS = ["#d9480f", "#1864ab"];
const $ = (id) => document.getElementById(id);

function bind(id, fmt = (v) => v) {
  const input = $(id);
  const out = input.parentElement.querySelector("span");
  const show = () => { if (out) out.textContent = fmt(input.value); };
  show();
  input.addEventListener("input", show);
  return input;
}

// maps data coordinates onto a canvas with a margin
function frame(canvas, points, pad = 0.3) {
  const xs = points.map((p) => p[0]);
  const ys = points.map((p) => p[1]);
  const lo = [Math.min(...xs) - pad, Math.min(...ys) - pad];
  const hi = [Math.max(...xs) + pad, Math.max(...ys) + pad];
  const scale = Math.min(canvas.width / (hi[0] - lo[0]), canvas.height / (hi[1] - lo[1]));
  return (p) => [(p[0] - lo[0]) * scale, canvas.height - (p[1] - lo[1]) * scale];
}

function dot(ctx, [x, y], r, color) {
  ctx.fillStyle = color;
  ctx.beginPath();
  ctx.arc(x, y, r, 0, 2 * Math.PI);
  ctx.fill();
}

function call(fn, out, ...args) {
  try {
    return JSON.parse(fn(...args));
  } catch (e) {
    $(out).textContent = String(e);
    return null;
  }
}

function drawTransport() {
  const n = +$("t-n").value, m = +$("t-m").value;
  const eps = 10 ** +$("t-eps").value;
  const s = call(transport, "t-out", n, m, eps, BigInt($("t-seed").value));
  if (!s) return;
  const canvas = $("t-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const to = frame(canvas, s.sources.concat(s.targets));
  const peak = Math.max(...s.plan.flat());
  s.plan.forEach((row, i) => row.forEach((mass, j) => {
    ctx.strokeStyle = `rgba(60,60,60,${(mass / peak).toFixed(3)})`;
    ctx.lineWidth = 1 + 6 * mass / peak;
    const [a, b] = [to(s.sources[i]), to(s.targets[j])];
    ctx.beginPath(); ctx.moveTo(...a); ctx.lineTo(...b); ctx.stroke();
  }));
  s.sources.forEach((p, i) => dot(ctx, to(p), 3 + 20 * s.source_weights[i], COLORS[0]));
  s.targets.forEach((p, j) => dot(ctx, to(p), 3 + 20 * s.target_weights[j], COLORS[1]));
  $("t-out").textContent = [
    `entropic cost  ${s.cost.toFixed(5)}`,
    `exact cost     ${s.exact_cost.toFixed(5)}`,
    `relative gap   ${((s.cost - s.exact_cost) / s.exact_cost * 100).toFixed(3)} %`,
    `converged      ${s.converged} (${s.iterations} iterations)`,
  ].join("\n");
}

function drawBarycenter() {
  const tau = 10 ** +$("b-tau").value;
  const s = call(barycenter, "b-out", tau, +$("b-sep").value, BigInt($("b-seed").value));
  if (!s) return;
  const canvas = $("b-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const to = frame(canvas, s.grid, 0.2);
  const peak = Math.max(...s.alpha);
  s.grid.forEach((p, q) => {
    ctx.fillStyle = `rgba(47,158,68,${(s.alpha[q] / peak).toFixed(3)})`;
    const [x, y] = to(p);
    ctx.fillRect(x - 12, y - 12, 24, 24);
  });
  s.classes.forEach((pts, c) => pts.forEach((p) => dot(ctx, to(p), 2.5, COLORS[c])));
  const entropy = -s.alpha.reduce((acc, a) => acc + (a > 0 ? a * Math.log(a) : 0), 0);
  $("b-out").textContent = [
    `tau            ${tau.toPrecision(3)}`,
    `dual value     ${s.dual_value.toFixed(5)}`,
    `alpha entropy  ${entropy.toFixed(3)} nats`,
    `largest atom   ${peak.toFixed(4)}`,
  ].join("\n");
}

function scatter(canvas, points, labels, to) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  points.forEach((p, u) => dot(ctx, to(p), 2.5, COLORS[labels[u] - 1]));
}

function runDefense() {
  $("d-out").textContent = "running...";
  // let the status paint before the blocking call
  setTimeout(() => {
    const s = call(defend, "d-out", +$("d-epochs").value, +$("d-step").value, BigInt($("d-seed").value));
    if (!s) return;
    const to = frame($("d-before"), s.before.concat(s.after));
    scatter($("d-before"), s.before, s.labels, to);
    scatter($("d-after"), s.after, s.labels, to);
    const loss = s.defense_loss;
    $("d-out").textContent = [
      `attacker BAcc before  ${s.bacc_before.toFixed(4)}`,
      `attacker BAcc after   ${s.bacc_after.toFixed(4)}`,
      loss.length ? `defense loss  ${loss[0].toFixed(4)} -> ${loss[loss.length - 1].toFixed(4)}` : "no defense epochs",
    ].join("\n");
  }, 10);
}

await init();
for (const id of ["t-n", "t-m"]) bind(id).addEventListener("input", drawTransport);
bind("t-eps", (v) => (10 ** v).toPrecision(2)).addEventListener("input", drawTransport);
$("t-seed").addEventListener("change", drawTransport);
bind("b-tau", (v) => (10 ** v).toPrecision(2)).addEventListener("change", drawBarycenter);
bind("b-sep").addEventListener("change", drawBarycenter);
$("b-seed").addEventListener("change", drawBarycenter);
bind("d-epochs");
bind("d-step");
$("d-run").addEventListener("click", runDefense);
drawTransport();
drawBarycenter();
