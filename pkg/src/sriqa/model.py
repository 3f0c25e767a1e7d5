"""Two-stream patch CNN scoring super-resolved images.

The HR stream digests 128x128 patches of the image under test through
eight 3x3 convolutions and four poolings; the LR stream digests 32x32
patches of the low-resolution reference through six convolutions and
two poolings. Both land on 8x8 maps with `width_c` channels. Features
are pooled across patches (mean, max, min), fused, and regressed to a
single quality score by a dense head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .imaging import ImageRGB, extract_patches
from .tensor import ArrayMap, LayerSpec, backward_stack, forward_stack, init_layer

HR_PATCH = 128
LR_PATCH = 32

FUSION_METHODS = ("difference", "concat", "both")
POOLING_MODES = ("joint", "mean_only")

WEIGHT_MAGIC = b"DISQ1"


@dataclass
class ModelConfig:
    """Defaults are desk scale; paper_scale() gives the published sizes."""

    width_c: int = 32
    fusion_method: str = "difference"
    pooling_mode: str = "joint"
    use_lr_reference: bool = True
    head_units: tuple = (256, 128, 64, 1)
    dropout_p: float = 0.5

    def __post_init__(self):
        self.head_units = tuple(int(u) for u in self.head_units)
        if self.width_c < 8 or self.width_c % 8:
            raise ConfigError(f"width_c must be a positive multiple of 8, got {self.width_c}")
        if self.fusion_method not in FUSION_METHODS:
            raise ConfigError(f"fusion_method must be one of {FUSION_METHODS}, got {self.fusion_method!r}")
        if self.pooling_mode not in POOLING_MODES:
            raise ConfigError(f"pooling_mode must be one of {POOLING_MODES}, got {self.pooling_mode!r}")
        if len(self.head_units) != 4 or self.head_units[-1] != 1 or min(self.head_units) < 1:
            raise ConfigError(f"head_units must be four positive counts ending in 1, got {self.head_units}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @classmethod
    def paper_scale(cls, **overrides):
        args = dict(width_c=512, head_units=(2048, 1024, 256, 1))
        args.update(overrides)
        return cls(**args)

    def pooled_rows(self) -> int:
        return 3 if self.pooling_mode == "joint" else 1

    def fused_rows(self) -> int:
        if not self.use_lr_reference:
            return self.pooled_rows()
        mult = {"difference": 1, "concat": 2, "both": 3}[self.fusion_method]
        return self.pooled_rows() * mult

    def head_in_units(self) -> int:
        return self.fused_rows() * 8 * 8 * self.width_c


def _conv(cin, cout):
    return LayerSpec("conv", in_channels=cin, out_channels=cout)


def lr_stream_specs(c: int):
    """32 -> 16 -> 8 spatial, channels ramp 3 -> c/8 -> c/4 -> c/2 -> c."""
    e = c // 8
    specs = []
    for cin, cout, pool_after in [(3, e, False), (e, e, True),
                                  (e, 2 * e, False), (2 * e, 2 * e, True),
                                  (2 * e, 4 * e, False), (4 * e, c, False)]:
        specs += [_conv(cin, cout), LayerSpec("relu")]
        if pool_after:
            specs.append(LayerSpec("maxpool"))
    return specs


def hr_stream_specs(c: int):
    """128 -> 8 spatial via four conv-conv-pool stages."""
    e = c // 8
    specs = []
    for cin, cout1, cout2 in [(3, e, e), (e, 2 * e, 2 * e), (2 * e, 4 * e, 4 * e), (4 * e, c, c)]:
        specs += [_conv(cin, cout1), LayerSpec("relu"), _conv(cout1, cout2), LayerSpec("relu"),
                  LayerSpec("maxpool")]
    return specs


def head_specs(config: ModelConfig):
    specs = [LayerSpec("flatten")]
    units_in = config.head_in_units()
    for i, units_out in enumerate(config.head_units):
        specs.append(LayerSpec("dense", in_units=units_in, out_units=units_out))
        if i < 3:
            specs.append(LayerSpec("relu"))
            specs.append(LayerSpec("dropout", dropout_p=config.dropout_p))
        units_in = units_out
    return specs


@dataclass
class ModelParams:
    config: ModelConfig
    lr_layers: list = field(default_factory=list)
    hr_layers: list = field(default_factory=list)
    head_layers: list = field(default_factory=list)

    def streams(self):
        return [("lr", self.lr_layers), ("hr", self.hr_layers), ("head", self.head_layers)]


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-initialized weights, zero biases, drawn in a fixed layer order."""
    rng = np.random.default_rng(seed)
    model = ModelParams(config=config)
    if config.use_lr_reference:
        model.lr_layers = [(s, init_layer(s, rng)) for s in lr_stream_specs(config.width_c)]
    model.hr_layers = [(s, init_layer(s, rng)) for s in hr_stream_specs(config.width_c)]
    model.head_layers = [(s, init_layer(s, rng)) for s in head_specs(config)]
    return model


def named_arrays(model: ModelParams) -> ArrayMap:
    """Flat parameter map in a stable order, shared by the optimizer,
    the gradient checker, and the weight files."""
    out: ArrayMap = {}
    for stream, layers in model.streams():
        for i, (spec, params) in enumerate(layers):
            for key in ("w", "b"):
                if key in params:
                    out[f"{stream}.{i}.{key}"] = params[key]
    return out


def set_named_arrays(model: ModelParams, arrays: ArrayMap):
    for stream, layers in model.streams():
        for i, (spec, params) in enumerate(layers):
            for key in list(params):
                params[key] = arrays[f"{stream}.{i}.{key}"]


# ---------------------------------------------------------------------------
# forward / backward

def extract_features(model: ModelParams, patches: np.ndarray, stream: str) -> np.ndarray:
    """Run one conv stream over a patch batch; output is (n, 8, 8, width_c)."""
    feats, _ = _stream_forward(model, patches, stream)
    return feats


def _stream_forward(model: ModelParams, patches, stream):
    if stream == "hr":
        layers, size = model.hr_layers, HR_PATCH
    elif stream == "lr":
        if not model.config.use_lr_reference:
            raise ConfigError("model was built without an LR reference stream")
        layers, size = model.lr_layers, LR_PATCH
    else:
        raise ConfigError(f"stream must be hr or lr, got {stream!r}")
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 4 or p.shape[1:] != (size, size, 3):
        raise ShapeError(f"{stream} stream needs (n, {size}, {size}, 3) patches, got {p.shape}")
    if p.shape[0] < 1:
        raise ShapeError("empty patch batch")
    return forward_stack(layers, p)


def pool_forward(feats: np.ndarray, mode: str):
    """Pool across the patch axis. joint stacks (mean, max, min) into
    (3, 8, 8, c); mean_only gives (1, 8, 8, c)."""
    n = feats.shape[0]
    mean = feats.mean(axis=0)
    if mode == "mean_only":
        return mean[None], (n, None, None)
    if mode != "joint":
        raise ConfigError(f"unknown pooling mode {mode!r}")
    imax = feats.argmax(axis=0)
    imin = feats.argmin(axis=0)
    mx = np.take_along_axis(feats, imax[None], axis=0)[0]
    mn = np.take_along_axis(feats, imin[None], axis=0)[0]
    return np.stack([mean, mx, mn]), (n, imax, imin)


def pool_backward(cache, grad):
    n, imax, imin = cache
    g = np.repeat(grad[0][None] / n, n, axis=0)
    if imax is not None:
        gmax = np.zeros_like(g)
        np.put_along_axis(gmax, imax[None], grad[1][None], axis=0)
        gmin = np.zeros_like(g)
        np.put_along_axis(gmin, imin[None], grad[2][None], axis=0)
        g = g + gmax + gmin
    return g


def fuse_features(pooled_hr: np.ndarray, pooled_lr, method: str) -> np.ndarray:
    """Combine pooled stream features; HR rows come first in stacked layouts."""
    if pooled_lr is None:
        return pooled_hr
    if pooled_hr.shape != pooled_lr.shape:
        raise ShapeError(f"pooled shapes differ: {pooled_hr.shape} vs {pooled_lr.shape}")
    if method == "difference":
        return pooled_hr - pooled_lr
    if method == "concat":
        return np.concatenate([pooled_hr, pooled_lr], axis=0)
    if method == "both":
        return np.concatenate([pooled_hr, pooled_lr, pooled_hr - pooled_lr], axis=0)
    raise ConfigError(f"unknown fusion method {method!r}")


def _defuse_grad(grad, method, rows):
    if method == "difference":
        return grad, -grad
    if method == "concat":
        return grad[:rows], grad[rows:]
    if method == "both":
        return grad[:rows] + grad[2 * rows:], grad[rows:2 * rows] - grad[2 * rows:]
    raise ConfigError(f"unknown fusion method {method!r}")


@dataclass
class ForwardCache:
    hr_caches: list
    hr_pool: tuple
    lr_caches: list
    lr_pool: tuple
    head_caches: list
    fused_shape: tuple


def model_forward(model: ModelParams, hr_patches, lr_patches=None, training=False, rng=None):
    """Full pipeline on one image's patches. Returns (score, cache)."""
    cfg = model.config
    fh, hr_caches = _stream_forward(model, hr_patches, "hr")
    ph, hr_pool = pool_forward(fh, cfg.pooling_mode)
    lr_caches, lr_pool, pl = [], None, None
    if cfg.use_lr_reference:
        if lr_patches is None:
            raise ConfigError("model uses an LR reference input; low-resolution patches are required")
        fl, lr_caches = _stream_forward(model, lr_patches, "lr")
        pl, lr_pool = pool_forward(fl, cfg.pooling_mode)
    fused = fuse_features(ph, pl, cfg.fusion_method) if cfg.use_lr_reference else ph
    out, head_caches = forward_stack(model.head_layers, fused, training=training, rng=rng)
    pred = float(out[0, 0, 0, 0])
    if not np.isfinite(pred):
        raise NumericError("non-finite prediction")
    return pred, ForwardCache(hr_caches, hr_pool, lr_caches, lr_pool, head_caches, fused.shape)


def model_backward(model: ModelParams, cache: ForwardCache, grad_pred: float) -> ArrayMap:
    """Gradients of grad_pred * score with respect to every parameter,
    keyed like named_arrays."""
    cfg = model.config
    g = np.full((1, 1, 1, 1), float(grad_pred))
    g_fused, head_grads = backward_stack(model.head_layers, cache.head_caches, g)
    g_fused = g_fused.reshape(cache.fused_shape)
    grads: ArrayMap = {}

    def collect(stream, layer_grads):
        for i, lg in enumerate(layer_grads):
            for key, arr in lg.items():
                grads[f"{stream}.{i}.{key}"] = arr

    collect("head", head_grads)
    if cfg.use_lr_reference:
        gh, gl = _defuse_grad(g_fused, cfg.fusion_method, cfg.pooled_rows())
        g_feats_l = pool_backward(cache.lr_pool, gl)
        _, lr_grads = backward_stack(model.lr_layers, cache.lr_caches, g_feats_l)
        collect("lr", lr_grads)
    else:
        gh = g_fused
    g_feats_h = pool_backward(cache.hr_pool, gh)
    _, hr_grads = backward_stack(model.hr_layers, cache.hr_caches, g_feats_h)
    collect("hr", hr_grads)
    return grads


def predict_patches(model: ModelParams, hr_patches, lr_patches=None) -> float:
    pred, _ = model_forward(model, hr_patches, lr_patches, training=False)
    return pred


def predict(model: ModelParams, hr_image: ImageRGB, lr_image: ImageRGB = None) -> float:
    """Score one image (its LR reference too, when the model uses one)."""
    hr_patches = extract_patches(hr_image, HR_PATCH)
    lr_patches = None
    if model.config.use_lr_reference:
        if lr_image is None:
            raise ConfigError("model uses an LR reference input; the low-resolution image is required")
        lr_patches = extract_patches(lr_image, LR_PATCH)
    return predict_patches(model, hr_patches, lr_patches)


# ---------------------------------------------------------------------------
# weight files

def _config_to_jsonable(config: ModelConfig):
    d = asdict(config)
    d["head_units"] = list(config.head_units)
    return d


def _config_from_jsonable(d) -> ModelConfig:
    return ModelConfig(**{**d, "head_units": tuple(d["head_units"])})


def weights_blob(model: ModelParams, dtype="f32") -> bytes:
    """Container: magic, u32 little-endian header length, UTF-8 JSON
    header (config plus ordered array manifest), then the raw arrays
    little-endian in manifest order."""
    if dtype not in ("f32", "f64"):
        raise ConfigError(f"dtype must be f32 or f64, got {dtype!r}")
    np_dtype = "<f4" if dtype == "f32" else "<f8"
    arrays = named_arrays(model)
    header = {
        "config": _config_to_jsonable(model.config),
        "dtype": dtype,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [WEIGHT_MAGIC, struct.pack("<I", len(hdr)), hdr]
    parts += [np.ascontiguousarray(v, dtype=np_dtype).tobytes() for v in arrays.values()]
    return b"".join(parts)


def save_weights(model: ModelParams, path, dtype="f32"):
    with open(path, "wb") as fh:
        fh.write(weights_blob(model, dtype=dtype))


def read_weights_blob(data: bytes):
    """Parse a weight container. Returns (model, bytes consumed)."""
    if data[:5] != WEIGHT_MAGIC:
        raise ConfigError("not a model weight file (bad magic)")
    if len(data) < 9:
        raise ConfigError("weight file truncated in header")
    (hlen,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad weight header: {e}") from e
    config = _config_from_jsonable(header["config"])
    np_dtype = {"f32": "<f4", "f64": "<f8"}.get(header.get("dtype"))
    if np_dtype is None:
        raise ConfigError(f"unknown weight dtype {header.get('dtype')!r}")
    itemsize = 4 if np_dtype == "<f4" else 8

    model = build_model(config, seed=0)
    expected = named_arrays(model)
    manifest = header["arrays"]
    if [m["name"] for m in manifest] != list(expected):
        raise ConfigError("weight manifest does not match the architecture for this config")
    offset = 9 + hlen
    loaded: ArrayMap = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if expected[m["name"]].shape != shape:
            raise ConfigError(
                f"array {m['name']} has shape {shape}, architecture needs {expected[m['name']].shape}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * itemsize
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ConfigError(f"weight file truncated in array {m['name']}")
        loaded[m["name"]] = np.frombuffer(chunk, dtype=np_dtype).reshape(shape).astype(np.float64)
        offset += nbytes
    set_named_arrays(model, loaded)
    return model, offset


def load_weights(path) -> ModelParams:
    data = open(path, "rb").read()
    model, consumed = read_weights_blob(data)
    return model
