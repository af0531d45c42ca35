"""Scene files, PPM images and camera list files.

Scene file layout (little-endian)::

    magic      5 bytes   b"FLWR1"
    sh_degree  uint8
    count      uint32
    scale      float64   meters per scene unit
    records    count x float32[14 + 3 * (sh_degree + 1)**2]

Each record stores position (3), log_scale (3), quaternion wxyz (4),
opacity_logit (1) and then the SH coefficients coefficient-major, RGB-minor.
"""

import struct
from pathlib import Path

import numpy as np

from .geometry import CameraView, GaussianScene, intrinsics_matrix, num_sh_coeffs

MAGIC = b"FLWR1"
_HEADER = struct.Struct("<5sBId")


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _record_dtype(sh_degree):
    n = num_sh_coeffs(sh_degree)
    return np.dtype(
        [
            ("position", "<f4", (3,)),
            ("log_scale", "<f4", (3,)),
            ("quat", "<f4", (4,)),
            ("opacity_logit", "<f4"),
            ("sh", "<f4", (n, 3)),
        ]
    )


def save_scene(scene, path):
    rec = np.empty(len(scene), dtype=_record_dtype(scene.sh_degree))
    rec["position"] = scene.positions
    rec["log_scale"] = scene.log_scales
    rec["quat"] = scene.quats
    rec["opacity_logit"] = scene.opacity_logits
    rec["sh"] = scene.sh
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, scene.sh_degree, len(scene), scene.scene_scale))
        f.write(rec.tobytes())


def load_scene(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, degree, count, scale = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if degree > 3:
        raise FormatError(f"unsupported sh degree {degree}", 5)
    dt = _record_dtype(degree)
    expected = _HEADER.size + count * dt.itemsize
    if len(data) != expected:
        offset = min(len(data), expected)
        raise FormatError(f"expected {expected} bytes for {count} primitives, found {len(data)}", offset)
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    return GaussianScene(
        positions=rec["position"],
        log_scales=rec["log_scale"],
        quats=rec["quat"],
        opacity_logits=rec["opacity_logit"],
        sh=rec["sh"],
        sh_degree=degree,
        scene_scale=scale,
    )


def write_ppm(path, image):
    """Write an ``HxWx3`` float image in [0, 1] as binary 8-bit PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(q.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError("only 8-bit P6 PPM is supported", 0)
    w, h = int(tokens[1]), int(tokens[2])
    if len(data) - pos != w * h * 3:
        raise FormatError("pixel data size mismatch", len(data))
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, 3).astype(np.float64) / 255.0


def write_camera_list(path, views, image_paths=None):
    """One camera per line: id, R (row-major), t, fx fy cx cy, image path, W H."""
    lines = []
    for i, v in enumerate(views):
        K = v.intrinsics
        img = image_paths[i] if image_paths is not None else "-"
        nums = [*v.rotation.ravel(), *v.translation, K[0, 0], K[1, 1], K[0, 2], K[1, 2]]
        lines.append(" ".join([str(v.id), *(repr(float(x)) for x in nums), str(img), str(v.width), str(v.height)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera_list(path, load_images=True):
    base = Path(path).parent
    views = []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) not in (18, 20):
            raise FormatError(f"line {lineno + 1}: expected 18 or 20 fields, got {len(parts)}", lineno)
        vals = [float(x) for x in parts[1:17]]
        R = np.array(vals[:9]).reshape(3, 3)
        t = np.array(vals[9:12])
        K = intrinsics_matrix(*vals[12:16])
        img_path = parts[17]
        image = None
        if img_path != "-" and load_images:
            p = Path(img_path)
            image = read_ppm(p if p.is_absolute() else base / p)
        if image is not None:
            h, w = image.shape[:2]
        elif len(parts) == 20:
            w, h = int(parts[18]), int(parts[19])
        else:
            raise FormatError(f"line {lineno + 1}: no image and no size given", lineno)
        views.append(CameraView(R, t, K, w, h, id=int(parts[0]), image=image))
    return views
