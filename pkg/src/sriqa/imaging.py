"""Image IO, bicubic rescaling, and the downsample/super-resolve loop.

Images are 8-bit RGB. PPM (P6, maxval 255) is the working format and
round-trips bit exactly; PNG is accepted for ingestion only. All
resampling is cubic convolution with a = -0.5, computed separably in
float64 and rounded once at the end.
"""

from __future__ import annotations

import math
import struct
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, PluginError, ShapeError


@dataclass
class ImageRGB:
    """Pixel payload is (height, width, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ShapeError(f"ImageRGB needs (h, w, 3) uint8 pixels, got {getattr(p, 'shape', None)} {getattr(p, 'dtype', None)}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError("empty image")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


# ---------------------------------------------------------------------------
# codecs

def _read_ppm_tokens(data: bytes, count: int):
    """Yield `count` whitespace-separated header tokens, honoring # comments.
    Returns (tokens, offset just past the single whitespace after the last one)."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated ppm header")
        ch = data[i:i + 1]
        if ch in b" \t\r\n":
            i += 1
        elif ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and data[j:j + 1] not in b" \t\r\n#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or data[i:i + 1] not in b" \t\r\n":
        raise ImageFormatError("ppm header not followed by whitespace")
    return tokens, i + 1


def decode_ppm(data: bytes) -> ImageRGB:
    if not data.startswith(b"P6"):
        raise ImageFormatError("not a P6 ppm")
    tokens, offset = _read_ppm_tokens(data, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise ImageFormatError(f"bad ppm header field: {e}") from e
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad ppm dimensions {w}x{h}")
    body = data[offset:offset + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ImageFormatError(f"ppm payload truncated: {len(body)} of {3 * w * h} bytes")
    return ImageRGB(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())


def encode_ppm(img: ImageRGB) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def decode_png(data: bytes) -> ImageRGB:
    """Accepts only 8-bit truecolor (RGB), non-interlaced PNG."""
    if not data.startswith(_PNG_MAGIC):
        raise ImageFormatError("not a png")
    if len(data) < 33 or data[12:16] != b"IHDR":
        raise ImageFormatError("png missing IHDR")
    _, _, depth, color_type, _, _, interlace = struct.unpack(">IIBBBBB", data[16:29])
    if depth != 8:
        raise ImageFormatError(f"png bit depth {depth} unsupported, need 8")
    if color_type != 2:
        raise ImageFormatError(f"png color type {color_type} unsupported, need truecolor rgb")
    if interlace != 0:
        raise ImageFormatError("interlaced png unsupported")
    import io

    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        return ImageRGB(np.asarray(im, dtype=np.uint8).copy())


def load_image(path) -> ImageRGB:
    data = Path(path).read_bytes()
    if data.startswith(b"P6"):
        return decode_ppm(data)
    if data.startswith(_PNG_MAGIC):
        return decode_png(data)
    raise ImageFormatError(f"{path}: neither P6 ppm nor png")


def save_ppm(img: ImageRGB, path):
    Path(path).write_bytes(encode_ppm(img))


# ---------------------------------------------------------------------------
# resampling

def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Kernel values at offsets t+1, t, t-1, t-2 for a = -0.5 (t in [0, 1))."""
    a = -0.5
    out = np.empty(t.shape + (4,))
    for k in range(4):
        x = np.abs(t - (k - 1))
        near = (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
        far = a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        out[..., k] = np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))
    return out


def _resample_axis(src: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    """Cubic resample of one spatial axis, float64 in and out, edge clamped."""
    in_len = src.shape[axis]
    pos = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    base = np.floor(pos).astype(int)
    wt = _cubic_weights(pos - base)
    moved = np.moveaxis(src, axis, 0)
    acc = np.zeros((out_len,) + moved.shape[1:])
    for k in range(4):
        idx = np.clip(base + (k - 1), 0, in_len - 1)
        sl = (slice(None),) + (None,) * (moved.ndim - 1)
        acc += wt[:, k][sl] * moved[idx]
    return np.moveaxis(acc, 0, axis)


def resize_bicubic(img: ImageRGB, width: int, height: int) -> ImageRGB:
    """Resize to width x height. Output pixel centers map back through
    src = (dst + 0.5) * (in/out) - 0.5; horizontal pass first."""
    if width < 1 or height < 1:
        raise ShapeError(f"bad target size {width}x{height}")
    mid = _resample_axis(img.pixels.astype(np.float64), width, axis=1)
    out = _resample_axis(mid, height, axis=0)
    return ImageRGB(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


# ---------------------------------------------------------------------------
# SR methods and the degradation loop

@dataclass
class SrMethod:
    """A named super-resolver. Without a command, upsampling is the
    builtin bicubic; with one, the command is invoked as
    `cmd --in <ppm> --out <ppm> --width W --height H` and must exit 0."""

    name: str
    command: list[str] | None = None


def sr_upsample(method: SrMethod, img: ImageRGB, width: int, height: int) -> ImageRGB:
    if method.command is None:
        return resize_bicubic(img, width, height)
    with tempfile.TemporaryDirectory(prefix="sriqa_sr_") as td:
        src = Path(td) / "in.ppm"
        dst = Path(td) / "out.ppm"
        save_ppm(img, src)
        argv = list(method.command) + ["--in", str(src), "--out", str(dst),
                                       "--width", str(width), "--height", str(height)]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=300)
        except OSError as e:
            raise PluginError(f"sr plugin {method.name}: cannot run {argv[0]}: {e}") from e
        except subprocess.TimeoutExpired as e:
            raise PluginError(f"sr plugin {method.name}: timed out") from e
        if proc.returncode != 0:
            tail = proc.stderr.decode("utf-8", "replace")[-500:]
            raise PluginError(f"sr plugin {method.name}: exit {proc.returncode}: {tail}")
        if not dst.exists():
            raise PluginError(f"sr plugin {method.name}: wrote no output file")
        try:
            out = load_image(dst)
        except ImageFormatError as e:
            raise PluginError(f"sr plugin {method.name}: bad output: {e}") from e
        if (out.width, out.height) != (width, height):
            raise PluginError(
                f"sr plugin {method.name}: wrong output size {out.width}x{out.height},"
                f" wanted {width}x{height}")
        return out


def ds_sr_step(img: ImageRGB, factor: float, method: SrMethod):
    """One degradation round: bicubic downsample by `factor`, then
    super-resolve back up. The HR target dims are the LR dims scaled by
    `factor`, both rounded half away from zero, so they can drift
    slightly from the source dims."""
    if factor <= 1.0:
        raise ShapeError(f"factor must exceed 1, got {factor}")
    lw = round_half_away(img.width / factor)
    lh = round_half_away(img.height / factor)
    if lw < 1 or lh < 1:
        raise ShapeError(f"factor {factor} collapses {img.width}x{img.height}")
    lr = resize_bicubic(img, lw, lh)
    hr = sr_upsample(method, lr, round_half_away(lw * factor), round_half_away(lh * factor))
    return lr, hr


def ds_sr_steps(img: ImageRGB, factor: float, iterations: int, method: SrMethod):
    """Yield (lr, hr) per iteration; each round starts from the previous HR."""
    if iterations < 1:
        raise ShapeError(f"iterations must be >= 1, got {iterations}")
    current = img
    for _ in range(iterations):
        lr, hr = ds_sr_step(current, factor, method)
        yield lr, hr
        current = hr


def ds_sr_iterate(img: ImageRGB, factor: float, iterations: int, method: SrMethod) -> list[ImageRGB]:
    """HR image after each of 1..iterations degradation rounds."""
    return [hr for _, hr in ds_sr_steps(img, factor, iterations, method)]


# ---------------------------------------------------------------------------
# patches and fidelity

def extract_patches(img: ImageRGB, size: int) -> np.ndarray:
    """Non-overlapping size x size patches on a top-left-anchored grid,
    row-major order, partial border patches dropped. Values scaled to
    [0, 1] float64, shape (n, size, size, 3)."""
    if img.width < 32 or img.height < 32:
        raise ShapeError(f"image {img.width}x{img.height} below the 32px patching minimum")
    if img.width < size or img.height < size:
        raise ShapeError(f"image {img.width}x{img.height} smaller than patch size {size}")
    ny = img.height // size
    nx = img.width // size
    core = img.pixels[:ny * size, :nx * size, :].astype(np.float64) / 255.0
    patches = core.reshape(ny, size, nx, size, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(ny * nx, size, size, 3)


def psnr(a: ImageRGB, b: ImageRGB) -> float:
    """Peak signal-to-noise ratio in dB over all pixels and channels;
    +inf for identical images."""
    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(f"psnr needs matching dims, got {a.pixels.shape} vs {b.pixels.shape}")
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(255.0 ** 2 / mse)
