"""Shared plumbing: seeded RNG streams, digests, tensor container, warps."""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"FGTN\x01"


def rng_for(master_seed, *tags):
    """Independent numpy Generator for a (seed, tags...) stream.

    Streams are derived by hashing, so the same tags always give the same
    stream and different tags give unrelated ones regardless of call order.
    """
    h = hashlib.sha256(repr((int(master_seed),) + tuple(tags)).encode("utf-8"))
    return np.random.Generator(np.random.PCG64(int.from_bytes(h.digest()[:8], "little")))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_digest(named_arrays) -> str:
    """Digest of a {name: ndarray} mapping, order-independent."""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        a = np.ascontiguousarray(named_arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode("utf-8"))
        h.update(repr(a.shape).encode("utf-8"))
        h.update(a.tobytes())
    return h.hexdigest()


def save_tensors(path, named_arrays, meta=None):
    """Write a named-tensor container: magic, JSON header, raw buffers.

    The header is canonical JSON and buffers are little-endian, so the file
    bytes are a pure function of (meta, arrays).
    """
    names = sorted(named_arrays)
    entries = []
    offset = 0
    buffers = []
    for name in names:
        a = np.ascontiguousarray(named_arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        buf = a.tobytes()
        entries.append({
            "name": name,
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(buf),
        })
        offset += len(buf)
        buffers.append(buf)
    header = canonical_json({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)


def load_tensors(path):
    """Read a named-tensor container, returning ({name: ndarray}, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def affine_matrix(params):
    """6-tuple (a, b, tx, c, d, ty) -> 2x3 float array [[a, b, tx], [c, d, ty]]."""
    p = np.asarray(params, dtype=np.float64)
    if p.shape != (6,):
        raise ValueError("affine must have 6 parameters")
    return p.reshape(2, 3)


def affine_det(params) -> float:
    m = affine_matrix(params)
    return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def affine_inverse(params):
    m = affine_matrix(params)
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-6:
        raise ValueError(f"affine not invertible (|det|={abs(det):.2e})")
    inv = np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det
    t = -inv @ m[:, 2]
    return (inv[0, 0], inv[0, 1], t[0], inv[1, 0], inv[1, 1], t[1])


def sample_affine(img, params, fill=0.0):
    """Resample img so that out(p) = img(M @ p), coordinates normalized.

    Pixel centers are mapped to [-1, 1] x [-1, 1] (x right, y down); M is the
    2x3 sampling transform. Bilinear interpolation, constant fill outside.
    Works on (H, W) or (H, W, C) float arrays. This is the single resampling
    kernel used for all view warps, forward and inverse.
    """
    m = affine_matrix(params)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # pixel center -> normalized coordinate
    xn = (xs + 0.5) / w * 2.0 - 1.0
    yn = (ys + 0.5) / h * 2.0 - 1.0
    sx = m[0, 0] * xn + m[0, 1] * yn + m[0, 2]
    sy = m[1, 0] * xn + m[1, 1] * yn + m[1, 2]
    # normalized coordinate -> source pixel index (fractional)
    fx = (sx + 1.0) / 2.0 * w - 0.5
    fy = (sy + 1.0) / 2.0 * h - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0
    out = np.zeros(img.shape[:2] + (img.shape[2],), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            val = np.full(img.shape[:2] + (img.shape[2],), fill, dtype=np.float64)
            val[inside] = img[yi[inside], xi[inside], :]
            wgt = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            out += wgt[..., None] * val
    out = out.astype(img.dtype if img.dtype.kind == "f" else np.float64)
    return out[..., 0] if squeeze else out
