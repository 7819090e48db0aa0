import init, { analyze, Lesion, lr_curve } from "./pkg/mutr_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (n) => n.toLocaleString("en-US");

function fail(el, e) {
  el.innerHTML = `<span class="err">${e}</span>`;
}

function runCost() {
  const table = $("cost-table");
  table.innerHTML = "";
  try {
    const r = JSON.parse(analyze($("cfg").value, num("res")));
    $("cost-summary").textContent =
      `${fmt(r.params)} params, ${(r.macs / 1e9).toFixed(3)} GMACs at ${r.resolution}x${r.resolution}, ` +
      `decoder ${fmt(r.decoder_params)} params, ${r.layers} layers`;
    table.innerHTML = "<tr><th>stage</th><th>params</th><th>MMACs</th><th>share of MACs</th></tr>" +
      r.stages.map((s) =>
        `<tr><td>${s.name}</td><td>${fmt(s.params)}</td><td>${(s.macs / 1e6).toFixed(1)}</td>` +
        `<td>${(100 * s.macs / r.macs).toFixed(1)}%</td></tr>`).join("");
  } catch (e) {
    fail($("cost-summary"), e);
  }
}

function paint(canvas, size, rgba) {
  canvas.width = size;
  canvas.height = size;
  canvas.style.width = canvas.style.height = `${Math.max(size, 192)}px`;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

function runLesion() {
  try {
    const l = new Lesion(num("size"), num("seed"), num("index"), $("hair").checked);
    paint($("c-image"), l.size, l.image());
    paint($("c-mask"), l.size, l.mask());
    paint($("c-overlay"), l.size, l.overlay());
    $("lesion-info").textContent = `lesion covers ${(100 * l.area).toFixed(1)}% of the image`;
    l.free();
  } catch (e) {
    fail($("lesion-info"), e);
  }
}

function runLr() {
  const c = $("c-lr");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  try {
    const total = num("total");
    const ys = lr_curve(num("lr"), num("warmup"), total, num("minlr"), c.width);
    const top = Math.max(...ys) || 1;
    const pad = 10;
    g.strokeStyle = "#2a6";
    g.lineWidth = 2;
    g.beginPath();
    ys.forEach((y, i) => {
      const py = c.height - pad - (c.height - 2 * pad) * y / top;
      i ? g.lineTo(i, py) : g.moveTo(i, py);
    });
    g.stroke();
    $("lr-info").textContent = `peak ${top.toExponential(2)}, final ${ys[ys.length - 1].toExponential(2)} at epoch ${total}`;
  } catch (e) {
    fail($("lr-info"), e);
  }
}

await init();
$("run-cost").onclick = runCost;
$("run-lesion").onclick = runLesion;
$("run-lr").onclick = runLr;
runCost();
runLesion();
runLr();
