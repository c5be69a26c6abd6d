import init, { render_phantom, degrade, posterior_demo } from "./pkg/mpflow_web.js";

const SIZE = 32;
const ORACLE = 8;
const $ = (id) => document.getElementById(id);

let target = null;

function draw(id, data, side, offset = 0) {
  const ctx = $(id).getContext("2d");
  const img = ctx.createImageData(side, side);
  for (let i = 0; i < side * side; i++) {
    const v = Math.round(255 * Math.min(1, Math.max(0, data[offset + i])));
    img.data.set([v, v, v, 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

function status(msg) {
  $("status").textContent = msg;
}

function relDist(a, b) {
  let num = 0;
  let den = 0;
  for (let i = 0; i < b.length; i++) {
    num += (a[i] - b[i]) ** 2;
    den += b[i] ** 2;
  }
  return Math.sqrt(num / den);
}

function render() {
  const plane = SIZE * SIZE;
  const planes = render_phantom(Number($("seed").value), SIZE, $("lesion").checked);
  target = planes.slice(0, plane);
  draw("target", planes, SIZE, 0);
  draw("aux", planes, SIZE, plane);
  draw("mask", planes, SIZE, 2 * plane);
}

function showDegraded() {
  const out = degrade(target, SIZE, $("kind").value, Number($("level").value), Number($("sigma").value), Number($("seed").value));
  draw("baseline", out, SIZE);
}

function sample() {
  const plane = ORACLE * ORACLE;
  const t0 = performance.now();
  const v = posterior_demo(
    Number($("seed").value),
    Number($("post-sigma").value),
    Number($("alpha").value),
    Number($("steps").value),
    Number($("samples").value),
  );
  ["p-truth", "p-base", "p-post", "p-guided", "p-plain"].forEach((id, k) => draw(id, v, ORACLE, k * plane));
  const post = v.slice(2 * plane, 3 * plane);
  const guided = relDist(v.slice(3 * plane, 4 * plane), post);
  const plain = relDist(v.slice(4 * plane), post);
  $("cap-guided").textContent = `guided mean (${guided.toFixed(3)})`;
  $("cap-plain").textContent = `unguided mean (${plain.toFixed(3)})`;
  status(`sampled in ${(performance.now() - t0).toFixed(0)} ms; captions give relative distance to the posterior mean`);
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      status(`error: ${e.message ?? e}`);
    }
  };
}

await init();
$("render").onclick = guarded(() => { render(); showDegraded(); });
$("degrade").onclick = guarded(showDegraded);
$("sample").onclick = guarded(sample);
$("alpha").oninput = () => { $("alpha-out").textContent = $("alpha").value; };
guarded(() => { render(); showDegraded(); sample(); })();
