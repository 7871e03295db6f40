"""Image decoding, colour conversion, feature channels and convolution backends.

Images are plain numpy arrays: RGB images are ``uint8`` arrays of shape
``(H, W, 3)``, single channels are ``float64`` arrays of shape ``(H, W)`` and
filters are square ``float64`` arrays with an odd side.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CHANNEL_NAMES = ("L", "U", "V", "gx", "gy", "gmag")

# D65 reference white, CIE 1931 2-degree observer
D65_XYZ = (0.95047, 1.0, 1.08883)

_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)

_CONV_MODES = ("valid", "same-replicate", "circular")


class DecodeError(ValueError):
    """Raised for malformed or truncated image files."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


# ---------------------------------------------------------------------------
# Portable pixmap I/O
# ---------------------------------------------------------------------------


def _read_token(buf, pos):
    # Skip whitespace and comments, then read one ASCII token.
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c == ord("#"):
            while pos < n and buf[pos] not in (10, 13):
                pos += 1
        elif chr(c).isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not chr(buf[pos]).isspace() and buf[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise DecodeError("unexpected end of header", start)
    return buf[start:pos].decode("ascii", errors="replace"), start, pos


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode a binary P6 (RGB) or P5 (grey) pixmap into an ``(H, W, 3)`` uint8 array.

    Grey images are replicated into three channels. Only maxval 255 is accepted
    so that decoding stays bit exact.
    """
    buf = bytes(data)
    if len(buf) < 2:
        raise DecodeError("file too short for a pixmap magic number", 0)
    magic = buf[:2]
    if magic not in (b"P6", b"P5"):
        raise DecodeError(f"unsupported magic {magic!r}", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise DecodeError(f"invalid {name} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise DecodeError(f"non-positive dimensions {width}x{height}", 2)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}", pos)
    if pos >= len(buf) or not chr(buf[pos]).isspace():
        raise DecodeError("missing whitespace after header", pos)
    pos += 1
    depth = 3 if magic == b"P6" else 1
    need = width * height * depth
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise DecodeError(f"truncated payload: expected {need} bytes, got {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, depth)
    if depth == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    """Encode an ``(H, W, 3)`` uint8 array as a binary P6 pixmap."""
    img = check_rgb(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def decode_image(data: bytes) -> np.ndarray:
    """Decode P6/P5 pixmaps natively, PNG through Pillow."""
    if data[:2] in (b"P6", b"P5"):
        return decode_pnm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(io.BytesIO(data)) as im:
            return np.array(im.convert("RGB"), dtype=np.uint8)
    raise DecodeError(f"unrecognised image format {bytes(data[:8])!r}", 0)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, img: np.ndarray) -> None:
    path = str(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(check_rgb(img)).save(path)
    else:
        with open(path, "wb") as fh:
            fh.write(encode_ppm(img))


def check_rgb(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise DimensionError(f"expected a non-empty (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 RGB data, got {img.dtype}")
    return img


def check_filter(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1] or f.shape[0] % 2 == 0:
        raise DimensionError(f"filters must be square with an odd side, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("filter taps must be finite")
    return f


# ---------------------------------------------------------------------------
# Colour and features
# ---------------------------------------------------------------------------


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_luv(img: np.ndarray):
    """CIE 1976 L*u*v* (D65) of an sRGB image; returns the ``(L, U, V)`` channels."""
    img = check_rgb(img)
    lin = srgb_to_linear(img / 255.0)
    xyz = lin @ _SRGB_TO_XYZ.T
    X, Y, Z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    xn, yn, zn = D65_XYZ
    yr = Y / yn
    eps = (6.0 / 29.0) ** 3
    kappa = (29.0 / 3.0) ** 3
    L = np.where(yr > eps, 116.0 * np.cbrt(yr) - 16.0, kappa * yr)
    denom = X + 15.0 * Y + 3.0 * Z
    safe = np.where(denom > 0, denom, 1.0)
    up = np.where(denom > 0, 4.0 * X / safe, 0.0)
    vp = np.where(denom > 0, 9.0 * Y / safe, 0.0)
    dn = xn + 15.0 * yn + 3.0 * zn
    un, vn = 4.0 * xn / dn, 9.0 * yn / dn
    U = 13.0 * L * (up - un)
    V = 13.0 * L * (vp - vn)
    return L, U, V


def central_gradients(ch: np.ndarray):
    """Central differences with replicated borders; returns ``(gx, gy)``."""
    ch = np.asarray(ch, dtype=np.float64)
    p = np.pad(ch, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return gx, gy


@dataclass(frozen=True)
class FeatureStack:
    """Six feature channels ``[L, U, V, gx, gy, gmag]`` stacked as ``(6, H, W)``.

    ``normalization`` holds the per-channel ``(mean, scale)`` pairs that were
    applied; the gradient channels always share a zero mean and a common scale,
    so ``gmag == hypot(gx, gy)`` holds before and after standardisation.
    """

    data: np.ndarray
    normalization: np.ndarray = field(default_factory=lambda: identity_normalization())

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != len(CHANNEL_NAMES):
            raise DimensionError(f"feature stack must be (6, H, W), got {self.data.shape}")

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def channel(self, name):
        return self.data[CHANNEL_NAMES.index(name)]

    def patch(self, x, y, radius):
        """Feature patch ``(6, 2r+1, 2r+1)`` centred on integer pixel ``(x, y)``."""
        if x - radius < 0 or y - radius < 0 or x + radius >= self.width or y + radius >= self.height:
            raise DimensionError(f"patch at ({x}, {y}) with radius {radius} leaves the image")
        return self.data[:, y - radius : y + radius + 1, x - radius : x + radius + 1]


def identity_normalization(n_channels=len(CHANNEL_NAMES)):
    norm = np.zeros((n_channels, 2))
    norm[:, 1] = 1.0
    return norm


def raw_features(img: np.ndarray) -> np.ndarray:
    """Unstandardised ``(6, H, W)`` feature array of an RGB image."""
    L, U, V = rgb_to_luv(img)
    gx, gy = central_gradients(L)
    gmag = np.sqrt(gx * gx + gy * gy)
    return np.stack([L, U, V, gx, gy, gmag])


def fit_normalization(feature_arrays) -> np.ndarray:
    """Per-channel ``(mean, scale)`` from raw feature arrays.

    L, U and V get their own mean and standard deviation. The three gradient
    channels get mean 0 and one shared scale (RMS gradient magnitude).
    """
    acc = np.zeros(6)
    acc2 = np.zeros(6)
    count = 0
    for f in feature_arrays:
        flat = f.reshape(6, -1)
        acc += flat.sum(axis=1)
        acc2 += (flat * flat).sum(axis=1)
        count += flat.shape[1]
    if count == 0:
        raise ValueError("no feature data to fit normalization")
    mean = acc / count
    var = np.maximum(acc2 / count - mean * mean, 0.0)
    norm = identity_normalization()
    norm[:3, 0] = mean[:3]
    norm[:3, 1] = np.where(var[:3] > 1e-12, np.sqrt(var[:3]), 1.0)
    rms = np.sqrt(acc2[5] / count)
    norm[3:, 1] = rms if rms > 1e-12 else 1.0
    return norm


def compute_feature_stack(img: np.ndarray, normalization=None) -> FeatureStack:
    """Feature stack of an RGB image, standardised with ``normalization`` (identity if None)."""
    norm = identity_normalization() if normalization is None else np.asarray(normalization, dtype=np.float64)
    if norm.shape != (6, 2):
        raise DimensionError(f"normalization must be (6, 2), got {norm.shape}")
    feats = raw_features(img)
    feats = (feats - norm[:, 0, None, None]) / norm[:, 1, None, None]
    return FeatureStack(feats, norm)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _check_mode(mode):
    if mode not in _CONV_MODES:
        raise ValueError(f"unknown convolution mode {mode!r}; expected one of {_CONV_MODES}")


def convolve2d(ch: np.ndarray, f: np.ndarray, mode: str = "same-replicate") -> np.ndarray:
    """True 2D convolution (flipped filter) of one channel.

    ``valid`` returns ``(H-k+1, W-k+1)``; ``same-replicate`` pads with edge
    values; ``circular`` wraps around and agrees with the DFT product.
    """
    _check_mode(mode)
    ch = np.asarray(ch, dtype=np.float64)
    f = check_filter(f)
    if ch.ndim != 2:
        raise DimensionError(f"expected a 2D channel, got shape {ch.shape}")
    k = f.shape[0]
    r = k // 2
    if mode == "valid":
        if k > ch.shape[0] or k > ch.shape[1]:
            raise DimensionError(f"{k}x{k} filter does not fit a {ch.shape[0]}x{ch.shape[1]} image")
        out = ndimage.convolve(ch, f, mode="constant")
        return out[r : ch.shape[0] - r, r : ch.shape[1] - r]
    if mode == "same-replicate":
        return ndimage.convolve(ch, f, mode="nearest")
    if k > ch.shape[0] or k > ch.shape[1]:
        # wrap the kernel onto the image grid, then use the DFT
        return convolve_fft_circular(ch, f)
    return ndimage.convolve(ch, f, mode="wrap")


def convolve_fft_circular(ch: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Circular convolution through the 2D DFT; the filter centre maps to index (0, 0)."""
    ch = np.asarray(ch, dtype=np.float64)
    f = check_filter(f)
    h, w = ch.shape
    r = f.shape[0] // 2
    kern = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            kern[dy % h, dx % w] += f[dy + r, dx + r]
    return np.real(np.fft.ifft2(np.fft.fft2(ch) * np.fft.fft2(kern)))


def convolve_separable(ch: np.ndarray, row, col, mode: str = "same-replicate") -> np.ndarray:
    """Convolve with the outer product ``col @ row.T`` in two 1D passes."""
    _check_mode(mode)
    row = np.asarray(row, dtype=np.float64).ravel()
    col = np.asarray(col, dtype=np.float64).ravel()
    if row.size % 2 == 0 or col.size % 2 == 0:
        raise DimensionError("separable filter vectors must have odd length")
    if row.size != col.size:
        raise DimensionError("row and column vectors must have the same length")
    ch = np.asarray(ch, dtype=np.float64)
    k = row.size
    r = k // 2
    if mode == "valid":
        if k > ch.shape[0] or k > ch.shape[1]:
            raise DimensionError(f"{k}-tap filter does not fit a {ch.shape[0]}x{ch.shape[1]} image")
        tmp = ndimage.convolve1d(ch, col, axis=0, mode="constant")
        out = ndimage.convolve1d(tmp, row, axis=1, mode="constant")
        return out[r : ch.shape[0] - r, r : ch.shape[1] - r]
    nd_mode = "nearest" if mode == "same-replicate" else "wrap"
    if mode == "circular" and (k > ch.shape[0] or k > ch.shape[1]):
        return convolve_fft_circular(ch, np.outer(col, row))
    tmp = ndimage.convolve1d(ch, col, axis=0, mode=nd_mode)
    return ndimage.convolve1d(tmp, row, axis=1, mode=nd_mode)


def correlate_same(ch: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Replicate-border correlation: ``out[p] = sum_q f[q] * ch[p + q]``."""
    return convolve2d(ch, np.asarray(f)[::-1, ::-1], mode="same-replicate")


def correlate_separable_same(ch: np.ndarray, row, col) -> np.ndarray:
    """Replicate-border correlation with the outer product ``col @ row.T``."""
    row = np.asarray(row, dtype=np.float64).ravel()[::-1]
    col = np.asarray(col, dtype=np.float64).ravel()[::-1]
    return convolve_separable(ch, row, col, mode="same-replicate")
