"""Byte-exact file codecs for flow fields and images, plus flow coloring.

Formats: Middlebury `.flo` (float32 LE), a KITTI-convention 16-bit flow
container in a P6-style PNM (samples little-endian; standard netpbm is
big-endian above 255, so these files are for this toolchain and the
documented converter boundary, not for arbitrary PNM viewers), and plain
8-bit PPM/PGM. Every codec is a total inverse on its valid domain and the
byte layout never depends on the host.
"""

import struct

import numpy as np

FLO_MAGIC = struct.pack("<f", 202021.25)


def _as_flow(flow):
    arr = np.asarray(flow)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"flow fields must be [2,H,W], got {arr.shape}")
    return arr


def write_flo(path, flow):
    """Middlebury layout: magic, width, height (i32 LE), interleaved u,v f32 LE."""
    arr = _as_flow(flow).astype("<f4", copy=False)
    _, h, w = arr.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = arr[0]
    data[..., 1] = arr[1]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise ValueError(f"truncated header: {len(raw)} bytes")
    if raw[:4] != FLO_MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0:
        raise ValueError(f"nonpositive dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise ValueError(f"truncated payload: {len(raw)} bytes, need {need}")
    if len(raw) > need:
        raise ValueError(f"trailing bytes: {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12)
    data = data.reshape(h, w, 2)
    return np.stack((data[..., 0], data[..., 1])).astype(np.float32)


# -- PNM containers ----------------------------------------------------------

def _write_pnm(path, kind, maxval, data):
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{kind}\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm(path):
    """Returns (kind, width, height, maxval, payload bytes)."""
    with open(path, "rb") as f:
        raw = f.read()

    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            c = raw[pos:pos + 1]
            if c == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header: missing token")
        return raw[start:pos]

    kind = token().decode("ascii")
    if kind not in ("P5", "P6"):
        raise ValueError(f"bad magic {kind!r}: expected P5 or P6")
    w, h = int(token()), int(token())
    maxval = int(token())
    if w <= 0 or h <= 0:
        raise ValueError(f"nonpositive dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    return kind, w, h, maxval, raw[pos:]


def _pnm_payload(kind, w, h, maxval, payload):
    channels = 3 if kind == "P6" else 1
    itemsize = 2 if maxval > 255 else 1
    need = w * h * channels * itemsize
    if len(payload) != need:
        raise ValueError(f"truncated payload: {len(payload)} bytes, need {need}")
    dtype = "<u2" if itemsize == 2 else np.uint8
    return np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)


def write_kitti_flow(path, flow, valid=None):
    """Quantize to the KITTI convention: channel = round(64*flow) + 2^15.

    Values clip to [0, 65535]; channel 2 holds the validity mask (1/0).
    """
    arr = _as_flow(flow)
    _, h, w = arr.shape
    if valid is None:
        valid = np.ones((h, w), dtype=np.uint16)
    data = np.empty((h, w, 3), dtype="<u2")
    for c in range(2):
        q = np.rint(64.0 * np.asarray(arr[c], dtype=np.float64)) + 32768.0
        data[..., c] = np.clip(q, 0, 65535).astype("<u2")
    data[..., 2] = (np.asarray(valid) > 0).astype("<u2")
    _write_pnm(path, "P6", 65535, data)


def read_kitti_flow(path):
    """Returns (flow float32 [2,H,W], valid uint8 [H,W])."""
    kind, w, h, maxval, payload = _read_pnm(path)
    if kind != "P6":
        raise ValueError(f"expected 3-channel P6 flow container, got {kind}")
    if maxval != 65535:
        raise ValueError(f"wrong bit depth: maxval {maxval}, expected 65535")
    data = _pnm_payload(kind, w, h, maxval, payload).astype(np.float64)
    flow = np.stack(((data[..., 0] - 32768.0) / 64.0,
                     (data[..., 1] - 32768.0) / 64.0)).astype(np.float32)
    return flow, (data[..., 2] > 0).astype(np.uint8)


def write_ppm(path, img):
    """8-bit color image, [3,H,W] uint8."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 [3,H,W], got {arr.dtype} {arr.shape}")
    _write_pnm(path, "P6", 255, np.moveaxis(arr, 0, -1))


def read_ppm(path):
    kind, w, h, maxval, payload = _read_pnm(path)
    if kind != "P6":
        raise ValueError(f"expected 3-channel P6 image, got {kind}")
    if maxval != 255:
        raise ValueError(f"wrong bit depth: maxval {maxval}, expected 255")
    return np.moveaxis(_pnm_payload(kind, w, h, maxval, payload), -1, 0)


def write_pgm(path, img):
    """8-bit gray image, [H,W] uint8."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H,W], got {arr.dtype} {arr.shape}")
    _write_pnm(path, "P5", 255, arr[..., None])


def read_pgm(path):
    kind, w, h, maxval, payload = _read_pnm(path)
    if kind != "P5":
        raise ValueError(f"expected single-channel P5 image, got {kind}")
    if maxval != 255:
        raise ValueError(f"wrong bit depth: maxval {maxval}, expected 255")
    return _pnm_payload(kind, w, h, maxval, payload)[..., 0]


# -- visualization -----------------------------------------------------------

def _color_wheel():
    """The 55-bin wheel: RY 15, YG 6, GC 4, CB 11, BM 13, MR 6 segments."""
    segments = (15, 6, 4, 11, 13, 6)
    wheel = np.zeros((sum(segments), 3))
    col = 0
    ramps = (  # (from-channel fixed at 1, to-channel ramp up/down)
        (0, 1, +1), (1, 0, -1), (1, 2, +1), (2, 1, -1), (2, 0, +1), (0, 2, -1))
    for (hold, ramp, sign), n in zip(ramps, segments):
        t = np.arange(n) / n
        wheel[col:col + n, hold] = 1.0
        wheel[col:col + n, ramp] = t if sign > 0 else 1.0 - t
        col += n
    return wheel


_WHEEL = _color_wheel()


def flow_to_color(flow, max_norm=None):
    """Direction to hue, magnitude to saturation; zero flow is white.

    max_norm defaults to the 99th-percentile magnitude of the field;
    magnitudes above it render at 0.75 brightness. Returns [3,H,W] in [0,1].
    """
    arr = _as_flow(flow).astype(np.float64)
    u, v = arr[0], arr[1]
    rad = np.sqrt(u * u + v * v)
    if max_norm is None:
        max_norm = float(np.percentile(rad, 99.0))
    scale = max(max_norm, 1.0e-12)
    un, vn, radn = u / scale, v / scale, rad / scale

    ncols = _WHEEL.shape[0]
    a = np.arctan2(-vn, -un) / np.pi                 # [-1, 1]
    fk = (a + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1.0 - f) * _WHEEL[k0] + f * _WHEEL[k1]    # [H,W,3]

    r = np.minimum(radn, 1.0)[..., None]
    col = 1.0 - r * (1.0 - col)
    col = np.where(radn[..., None] > 1.0, col * 0.75, col)
    return np.moveaxis(col, -1, 0)
