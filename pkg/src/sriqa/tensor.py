"""Float64 tensor layers with hand-written forward and backward passes.

Activations travel as numpy arrays in (n, h, w, c) layout, C-contiguous
with c fastest. Convolutions are 3x3, stride 1, zero-padded by one
pixel; pooling is 2x2 max with stride 2. Every forward pass returns a
cache that the matching backward pass consumes, so a stack of layers
can be differentiated without retaining anything else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ArrayMap = dict[str, np.ndarray]

LAYER_KINDS = ("conv", "relu", "maxpool", "dense", "dropout", "flatten")


@dataclass
class LayerSpec:
    """Static description of one layer in a stack."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    in_units: int = 0
    out_units: int = 0
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


def check_tensor4(x, name="tensor"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-d array, got {getattr(x, 'shape', type(x))}")
    return x


def init_layer(spec: LayerSpec, rng: np.random.Generator) -> ArrayMap:
    """Fresh parameters: He-normal weights (variance 2/fan_in), zero biases."""
    if spec.kind == "conv":
        fan_in = 9 * spec.in_channels
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (3, 3, spec.in_channels, spec.out_channels))
        return {"w": w, "b": np.zeros(spec.out_channels)}
    if spec.kind == "dense":
        w = rng.normal(0.0, np.sqrt(2.0 / spec.in_units), (spec.in_units, spec.out_units))
        return {"w": w, "b": np.zeros(spec.out_units)}
    return {}


def conv3x3_forward(x, w, b):
    """Same-size 3x3 convolution, computed as nine shifted matmuls."""
    check_tensor4(x, "conv input")
    n, h, wid, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv weights {w.shape} do not accept {cin} input channels")
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wid, cout))
    for ky in range(3):
        for kx in range(3):
            out += xp[:, ky:ky + h, kx:kx + wid, :] @ w[ky, kx]
    return out + b


def conv3x3_backward(x, w, grad_out):
    n, h, wid, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    go_flat = grad_out.reshape(-1, cout)
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, ky:ky + h, kx:kx + wid, :]
            gw[ky, kx] = patch.reshape(-1, cin).T @ go_flat
            gxp[:, ky:ky + h, kx:kx + wid, :] += grad_out @ w[ky, kx].T
    gb = go_flat.sum(axis=0)
    return gxp[:, 1:-1, 1:-1, :], gw, gb


def maxpool2_forward(x):
    """2x2/stride-2 max pooling. Ties resolve to the first window position
    in row-major (dy, dx) scan order, which is where the gradient routes."""
    check_tensor4(x, "pool input")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool input dims must be even, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=4)
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return y, (x.shape, idx)


def maxpool2_backward(cache, grad_out):
    shape, idx = cache
    n, h, w, c = shape
    gwin = np.zeros((n, h // 2, w // 2, c, 4))
    np.put_along_axis(gwin, idx[..., None], grad_out[..., None], axis=4)
    gwin = gwin.reshape(n, h // 2, w // 2, c, 2, 2)
    return gwin.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def dense_forward(x, w, b):
    check_tensor4(x, "dense input")
    n = x.shape[0]
    if x.shape[1:3] != (1, 1) or x.shape[3] != w.shape[0]:
        raise ShapeError(f"dense expects (n, 1, 1, {w.shape[0]}), got {x.shape}")
    y = x.reshape(n, -1) @ w + b
    return y.reshape(n, 1, 1, w.shape[1])


def dense_backward(x, w, grad_out):
    n = x.shape[0]
    go = grad_out.reshape(n, -1)
    xf = x.reshape(n, -1)
    gw = xf.T @ go
    gb = go.sum(axis=0)
    gx = (go @ w.T).reshape(x.shape)
    return gx, gw, gb


def layer_forward(spec: LayerSpec, params: ArrayMap, x, training=False, rng=None):
    """Run one layer. Returns (output, cache).

    Dropout draws its mask from rng only when training; in inference it
    is the identity. Flatten collapses the whole input tensor into a
    single feature vector of shape (1, 1, 1, n*h*w*c).
    """
    if spec.kind == "conv":
        return conv3x3_forward(x, params["w"], params["b"]), x
    if spec.kind == "relu":
        return np.maximum(x, 0.0), x
    if spec.kind == "maxpool":
        return maxpool2_forward(x)
    if spec.kind == "dense":
        return dense_forward(x, params["w"], params["b"]), x
    if spec.kind == "dropout":
        if not training or spec.dropout_p == 0.0:
            return x, None
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        keep = 1.0 - spec.dropout_p
        mask = (rng.random(x.shape) < keep) / keep
        return x * mask, mask
    if spec.kind == "flatten":
        return x.reshape(1, 1, 1, -1), x.shape
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def layer_backward(spec: LayerSpec, params: ArrayMap, cache, grad_out):
    """Returns (grad_input, grads) where grads mirrors the params map."""
    if spec.kind == "conv":
        gx, gw, gb = conv3x3_backward(cache, params["w"], grad_out)
        return gx, {"w": gw, "b": gb}
    if spec.kind == "relu":
        return grad_out * (cache > 0.0), {}
    if spec.kind == "maxpool":
        return maxpool2_backward(cache, grad_out), {}
    if spec.kind == "dense":
        gx, gw, gb = dense_backward(cache, params["w"], grad_out)
        return gx, {"w": gw, "b": gb}
    if spec.kind == "dropout":
        if cache is None:
            return grad_out, {}
        return grad_out * cache, {}
    if spec.kind == "flatten":
        return grad_out.reshape(cache), {}
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def forward_stack(layers, x, training=False, rng=None):
    """layers is a list of (LayerSpec, params). Returns (output, caches)."""
    caches = []
    for spec, params in layers:
        x, cache = layer_forward(spec, params, x, training=training, rng=rng)
        caches.append(cache)
    return x, caches


def backward_stack(layers, caches, grad_out):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        spec, params = layers[i]
        grad_out, g = layer_backward(spec, params, caches[i], grad_out)
        grads[i] = g
    return grad_out, grads


def loss_mse_l2(preds, targets, weights, lam):
    """Mean squared error plus lam * sum of squared weights.

    Returns (loss, grad_preds) with grad_preds[i] = 2*(pred_i - gt_i)/n.
    The L2 term's gradient (2*lam*w per weight array) is applied by the
    optimizer step, not here; biases are never penalized.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1 or preds.size == 0:
        raise ShapeError(f"loss needs matching non-empty vectors, got {preds.shape} vs {targets.shape}")
    n = preds.size
    diff = preds - targets
    loss = float(diff @ diff) / n + lam * sum(float((w * w).sum()) for w in weights)
    return loss, 2.0 * diff / n


@dataclass
class AdamState:
    """First/second moment estimates plus the hyperparameters.

    step counts completed updates; bias correction uses step+1 inside
    apply, so a fresh state has step == 0.
    """

    eta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: ArrayMap = field(default_factory=dict)
    v: ArrayMap = field(default_factory=dict)


def adam_init(params: ArrayMap, eta=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    state = AdamState(eta=eta, beta1=beta1, beta2=beta2, epsilon=epsilon)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_apply(state: AdamState, params: ArrayMap, grads: ArrayMap):
    """One Adam update, in place on params and state. Returns both.

    update = eta * mhat / (sqrt(vhat) + epsilon), so with zero moments
    the first step moves a parameter by about eta against its gradient
    sign regardless of magnitude.
    """
    if set(grads) != set(params):
        raise ConfigError("gradient map does not match parameter map")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.eta * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    state.step = t
    return params, state


def _probe(loss_fn, flat, i, analytic_value, eps) -> float:
    orig = flat[i]
    flat[i] = orig + eps
    up = loss_fn()
    flat[i] = orig - eps
    down = loss_fn()
    flat[i] = orig
    num = (up - down) / (2.0 * eps)
    return abs(analytic_value - num) / max(abs(analytic_value), abs(num), 1e-8)


def grad_check(loss_fn, params: ArrayMap, analytic: ArrayMap, eps=1e-5,
               samples=50, rng=None, exclude=None, kink_retry=False) -> float:
    """Central-difference verification of analytic gradients.

    loss_fn() recomputes the scalar loss from the current contents of
    params; coordinates are perturbed in place and restored. Up to
    `samples` coordinates per array are probed (all of them for small
    arrays). exclude maps an array name to a boolean mask of
    coordinates that must not be probed (ReLU kink guard). Returns the
    maximum relative error max(|a-n| / max(|a|, |n|, 1e-8)).

    Deep in a stack the kink guard cannot be expressed as a coordinate
    mask: perturbing one early-layer parameter shifts thousands of
    pre-activations, and any of them sitting within eps of zero poisons
    the probe. kink_retry re-measures probes that look bad at eps/10
    and eps/100 and keeps the smallest error; a genuinely wrong
    analytic gradient stays wrong at every eps, while a kink straddle
    shrinks with the step and is dismissed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        n = flat.size
        candidates = np.arange(n)
        if exclude is not None and name in exclude:
            candidates = candidates[~exclude[name].reshape(-1)]
        if candidates.size == 0:
            continue
        if candidates.size > samples:
            candidates = rng.choice(candidates, size=samples, replace=False)
        ana = analytic[name].reshape(-1)
        for i in candidates:
            err = _probe(loss_fn, flat, i, ana[i], eps)
            if kink_retry and err > 1e-6:
                for smaller in (eps / 10.0, eps / 100.0):
                    err = min(err, _probe(loss_fn, flat, i, ana[i], smaller))
                    if err <= 1e-6:
                        break
            if err > worst:
                worst = err
    return float(worst)
