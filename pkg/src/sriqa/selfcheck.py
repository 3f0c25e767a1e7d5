"""Built-in verification suites.

Two families of checks, both runnable from the CLI on an installed
package without the test tree:

- an oracle suite comparing the vectorized numerics against private
  scalar-loop reimplementations written from the definitions, and
- a gradient suite verifying analytic backprop against central
  differences for every layer kind and for full assembled models.

The loop oracles here deliberately do not call the functions they
check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import imaging, labeling, metrics, model as model_mod, tensor


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""
    value: float = None  # the measured error, where one exists


def _result(name, ok, detail="", value=None):
    return CheckResult(name=name, ok=bool(ok), detail=detail, value=value)


# ---------------------------------------------------------------------------
# scalar reference implementations

def _conv_loop(x, w, b):
    n, h, wid, cin = x.shape
    cout = w.shape[3]
    out = np.zeros((n, h, wid, cout))
    for im in range(n):
        for y in range(h):
            for xx in range(wid):
                for co in range(cout):
                    acc = 0.0
                    for ky in range(3):
                        for kx in range(3):
                            sy, sx = y + ky - 1, xx + kx - 1
                            if 0 <= sy < h and 0 <= sx < wid:
                                for ci in range(cin):
                                    acc += x[im, sy, sx, ci] * w[ky, kx, ci, co]
                    out[im, y, xx, co] = acc + b[co]
    return out


def _pool_loop(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for im in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    out[im, i, j, ch] = x[im, 2 * i:2 * i + 2,
                                          2 * j:2 * j + 2, ch].max()
    return out


def _pool_grad_loop(x, grad_out):
    # gradient routes to the first maximum in (dy, dx) scan order
    n, h, w, c = x.shape
    gx = np.zeros_like(x)
    for im in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    best, by, bx = -np.inf, 0, 0
                    for dy in range(2):
                        for dx in range(2):
                            v = x[im, 2 * i + dy, 2 * j + dx, ch]
                            if v > best:
                                best, by, bx = v, dy, dx
                    gx[im, 2 * i + by, 2 * j + bx, ch] += grad_out[im, i, j, ch]
    return gx


def _cubic(t):
    a = -0.5
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    if t < 2.0:
        return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    return 0.0


def _resample_axis_loop(arr, out_len, axis):
    arr = np.moveaxis(arr, axis, 0)
    in_len = arr.shape[0]
    out = np.zeros((out_len,) + arr.shape[1:])
    scale = in_len / out_len
    for d in range(out_len):
        src = (d + 0.5) * scale - 0.5
        base = math.floor(src)
        acc = np.zeros(arr.shape[1:])
        for k in range(-1, 3):
            idx = min(max(base + k, 0), in_len - 1)
            acc += _cubic(src - (base + k)) * arr[idx]
        out[d] = acc
    return np.moveaxis(out, 0, axis)


def _bicubic_loop(pixels, width, height):
    mid = _resample_axis_loop(pixels.astype(np.float64), width, axis=1)
    out = _resample_axis_loop(mid, height, axis=0)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _pearson_loop(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _ranks_loop(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _kendall_loop(x, y):
    n = len(x)
    conc = disc = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                tx += 1
                ty += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                conc += 1
            else:
                disc += 1
    n0 = n * (n - 1) / 2.0
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def _adam_scalar(theta, g, m, v, step, eta, b1, b2, eps):
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * g * g
    c1 = 1.0 - b1 ** (step + 1)
    c2 = 1.0 - b2 ** (step + 1)
    return theta - eta * (m / c1) / (math.sqrt(v / c2) + eps), m, v


# ---------------------------------------------------------------------------
# oracle suite

def run_oracle_suite(seed=0):
    rng = np.random.default_rng(seed)
    results = []

    x = rng.standard_normal((2, 6, 5, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    diff = np.abs(tensor.conv3x3_forward(x, w, b) - _conv_loop(x, w, b)).max()
    results.append(_result("conv_forward_matches_loop", diff < 1e-12, f"max |diff| {diff:.3g}"))

    xp = rng.standard_normal((2, 6, 4, 3))
    xp[0, 0, 0, 0] = xp[0, 1, 1, 0] = 7.0  # tied window
    y, cache = tensor.maxpool2_forward(xp)
    diff = np.abs(y - _pool_loop(xp)).max()
    go = rng.standard_normal(y.shape)
    gdiff = np.abs(tensor.maxpool2_backward(cache, go) - _pool_grad_loop(xp, go)).max()
    results.append(_result("pool_forward_matches_loop", diff == 0.0, f"max |diff| {diff:.3g}"))
    results.append(_result("pool_gradient_tie_routing", gdiff == 0.0, f"max |diff| {gdiff:.3g}"))

    img = imaging.ImageRGB(rng.integers(0, 256, (13, 17, 3), dtype=np.uint8))
    got = imaging.resize_bicubic(img, 23, 9).pixels
    want = _bicubic_loop(img.pixels, 23, 9)
    same = np.array_equal(got, want)
    results.append(_result("bicubic_matches_loop", same,
                           "bit-exact" if same else "pixel mismatch"))

    ks = sum(_cubic(0.3 + k) for k in range(-2, 2))
    results.append(_result("bicubic_kernel_partition_of_unity", abs(ks - 1.0) < 1e-12,
                           f"|sum-1| {abs(ks - 1.0):.3g}"))

    cases = [(2.5, 3), (-2.5, -3), (1024 / 2.7, 379), (768 / 2.7, 284), (0.49, 0)]
    bad = [(v, want, imaging.round_half_away(v)) for v, want in cases
           if imaging.round_half_away(v) != want]
    results.append(_result("dimension_rounding", not bad, f"failures {bad}" if bad else ""))

    src = imaging.ImageRGB(rng.integers(0, 256, (36, 48, 3), dtype=np.uint8))
    lr, hr = imaging.ds_sr_step(src, 1.5, imaging.SrMethod("bicubic"))
    ok = (lr.width, lr.height, hr.width, hr.height) == (32, 24, 48, 36)
    results.append(_result("degradation_step_dims", ok,
                           f"lr {lr.width}x{lr.height} hr {hr.width}x{hr.height}"))

    a = list(rng.standard_normal(40))
    bvec = list(np.round(rng.standard_normal(40), 1))  # induces ties
    err = max(
        abs(metrics.plcc(a, bvec) - _pearson_loop(a, bvec)),
        abs(metrics.srcc(a, bvec) - _pearson_loop(_ranks_loop(a), _ranks_loop(bvec))),
        abs(metrics.krcc(a, bvec) - _kendall_loop(a, bvec)),
    )
    results.append(_result("correlations_match_loops", err < 1e-12, f"max |diff| {err:.3g}"))

    preds, targets = [0.2, 0.8], [0.0, 1.0]
    wts = [np.array([[3.0]])]
    loss, gp = tensor.loss_mse_l2(preds, targets, wts, 0.1)
    want_loss = ((0.2) ** 2 + (-0.2) ** 2) / 2 + 0.1 * 9.0
    ok = abs(loss - want_loss) < 1e-12 and abs(gp[0] - 0.2) < 1e-12
    results.append(_result("loss_hand_value", ok, f"loss {loss:.6f} want {want_loss:.6f}"))

    params = {"p": np.array([1.0, -2.0])}
    grads = {"p": np.array([0.3, -0.7])}
    st = tensor.adam_init(params, eta=1e-4)
    tensor.adam_apply(st, params, grads)
    tensor.adam_apply(st, params, grads)
    t0, m0, v0 = 1.0, 0.0, 0.0
    for step in range(2):
        t0, m0, v0 = _adam_scalar(t0, 0.3, m0, v0, step, 1e-4, 0.9, 0.999, 1e-8)
    ok = abs(params["p"][0] - t0) < 1e-15 and st.step == 2
    results.append(_result("adam_matches_scalar_reference", ok,
                           f"got {params['p'][0]:.12f} want {t0:.12f}"))

    curve = labeling.fit_decay([labeling.Anchor(2, math.exp(-0.5))])
    ok = abs(curve.b - 0.25) < 1e-12 and abs(curve.at(4) - math.exp(-1.0)) < 1e-12
    results.append(_result("decay_fit_single_anchor", ok, f"b {curve.b:.12f}"))

    panel = [labeling.SubjectScores(f"h{i}", {"s0": 6.0 + 0.1 * i, "s1": 3.0 + 0.1 * i})
             for i in range(6)]
    panel.append(labeling.SubjectScores("bad", {"s0": 0.0, "s1": 10.0}))
    kept, rejected = labeling.screen_outliers(panel)
    ok = rejected == ["bad"] and len(kept) == 6
    results.append(_result("outlier_screening", ok, f"rejected {rejected}"))

    cfg = model_mod.ModelConfig(width_c=8, head_units=(8, 4, 2, 1))
    m = model_mod.build_model(cfg, seed=seed)
    blob = model_mod.weights_blob(m, dtype="f64")
    m2, _ = model_mod.read_weights_blob(blob)
    orig, back = model_mod.named_arrays(m), model_mod.named_arrays(m2)
    ok = all(orig[k].tobytes() == back[k].tobytes() for k in orig)
    results.append(_result("weight_container_roundtrip", ok,
                           f"{len(orig)} arrays compared bitwise"))
    return results


# ---------------------------------------------------------------------------
# gradient suite

def _randomize_biases(m, rng, scale=0.1):
    # freshly built models have all-zero biases, which parks the
    # pre-activation of any dead receptive field exactly on the ReLU
    # kink and breaks central differences; nudge them off the manifold
    for name, arr in model_mod.named_arrays(m).items():
        if name.endswith(".b"):
            arr += rng.normal(0.0, scale, arr.shape)


def _layer_checks(rng, threshold):
    results = []

    x = rng.standard_normal((2, 6, 6, 3))
    params = {"w": rng.standard_normal((3, 3, 3, 4)) * 0.3,
              "b": rng.standard_normal(4) * 0.3}
    coef = rng.standard_normal((2, 6, 6, 4))

    def conv_loss():
        return float((tensor.conv3x3_forward(x, params["w"], params["b"]) * coef).sum())

    _, gw, gb = tensor.conv3x3_backward(x, params["w"], coef)
    err = tensor.grad_check(conv_loss, params, {"w": gw, "b": gb}, rng=rng)
    results.append(_result("grad_conv", err < threshold, f"max rel err {err:.3g}", value=err))

    xd = rng.standard_normal((3, 1, 1, 10))
    params = {"w": rng.standard_normal((10, 4)) * 0.3, "b": rng.standard_normal(4) * 0.3}
    coefd = rng.standard_normal((3, 1, 1, 4))

    def dense_loss():
        return float((tensor.dense_forward(xd, params["w"], params["b"]) * coefd).sum())

    _, gw, gb = tensor.dense_backward(xd, params["w"], coefd)
    err = tensor.grad_check(dense_loss, params, {"w": gw, "b": gb}, rng=rng)
    results.append(_result("grad_dense", err < threshold, f"max rel err {err:.3g}", value=err))

    specs = [
        (tensor.LayerSpec("conv", in_channels=3, out_channels=4), None),
        (tensor.LayerSpec("relu"), None),
        (tensor.LayerSpec("maxpool"), None),
        (tensor.LayerSpec("conv", in_channels=4, out_channels=2), None),
        (tensor.LayerSpec("relu"), None),
    ]
    layers = [(spec, tensor.init_layer(spec, rng)) for spec, _ in specs]
    for _, p in layers:
        if "b" in p:
            p["b"] += rng.normal(0.0, 0.1, p["b"].shape)
    xc = rng.standard_normal((2, 8, 8, 3))
    coefc = rng.standard_normal((2, 4, 4, 2))
    flat_params, flat_names = {}, []
    for i, (_, p) in enumerate(layers):
        for k, arr in p.items():
            flat_params[f"{i}.{k}"] = arr
            flat_names.append((i, k))

    def chain_loss():
        out, _ = tensor.forward_stack(layers, xc)
        return float((out * coefc).sum())

    out, caches = tensor.forward_stack(layers, xc)
    _, gs = tensor.backward_stack(layers, caches, coefc)
    analytic = {f"{i}.{k}": gs[i][k] for i, k in flat_names}
    err = tensor.grad_check(chain_loss, flat_params, analytic, rng=rng, kink_retry=True)
    results.append(_result("grad_conv_relu_pool_chain", err < threshold,
                           f"max rel err {err:.3g}", value=err))

    drop_spec = tensor.LayerSpec("dropout", dropout_p=0.5)
    xdo = rng.standard_normal((1, 1, 1, 12))
    params = {"w": rng.standard_normal((12, 1)) * 0.3, "b": rng.standard_normal(1)}

    def drop_loss():
        h, _ = tensor.layer_forward(drop_spec, {}, xdo, training=True,
                                    rng=np.random.default_rng(99))
        return float(tensor.dense_forward(h, params["w"], params["b"]).sum())

    h, mask = tensor.layer_forward(drop_spec, {}, xdo, training=True,
                                   rng=np.random.default_rng(99))
    go = np.ones((1, 1, 1, 1))
    _, gw, gb = tensor.dense_backward(h, params["w"], go)
    err = tensor.grad_check(drop_loss, params, {"w": gw, "b": gb}, rng=rng)
    results.append(_result("grad_through_dropout_mask", err < threshold,
                           f"max rel err {err:.3g}", value=err))
    return results


def _full_model_check(rng, threshold, use_lr_reference):
    cfg = model_mod.ModelConfig(width_c=32, head_units=(64, 32, 16, 1),
                                use_lr_reference=use_lr_reference)
    m = model_mod.build_model(cfg, seed=int(rng.integers(1 << 30)))
    _randomize_biases(m, rng)
    hr = rng.random((1, 128, 128, 3))
    lr = rng.random((2, 32, 32, 3)) if use_lr_reference else None

    def loss():
        pred, _ = model_mod.model_forward(m, hr, lr)
        return pred

    pred, cache = model_mod.model_forward(m, hr, lr)
    analytic = model_mod.model_backward(m, cache, 1.0)
    params = model_mod.named_arrays(m)
    err = tensor.grad_check(loss, params, analytic, samples=3, rng=rng, kink_retry=True)
    name = "grad_full_model_" + ("reduced_reference" if use_lr_reference else "no_reference")
    return _result(name, err < threshold, f"max rel err {err:.3g}", value=err)


def run_gradient_suite(seed=0, threshold=1e-4):
    rng = np.random.default_rng(seed)
    results = _layer_checks(rng, threshold)
    results.append(_full_model_check(rng, threshold, use_lr_reference=True))
    results.append(_full_model_check(rng, threshold, use_lr_reference=False))
    return results


# ---------------------------------------------------------------------------

def run_selftest(seed=0, include_gradients=True):
    results = run_oracle_suite(seed=seed)
    if include_gradients:
        results += run_gradient_suite(seed=seed)
    return results


def format_results(results):
    lines = []
    for r in results:
        tag = "ok  " if r.ok else "FAIL"
        lines.append(f"[{tag}] {r.name}" + (f": {r.detail}" if r.detail else ""))
    failed = sum(1 for r in results if not r.ok)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return lines
