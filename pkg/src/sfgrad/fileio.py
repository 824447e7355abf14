"""File formats: portable float maps, masks, the parameter container,
camera descriptions, mesh export, and CSV metric rows.

The parameter container is an 8-byte little-endian header-length prefix,
a UTF-8 JSON header, and one contiguous little-endian payload.  Tensors are
stored as f32, complex ones as interleaved (re, im) f32 pairs; unknown
header keys survive a load/save round trip.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np
from PIL import Image

from .errors import DataError
from .fno import (
    ConvLayer,
    DenseLayer,
    FninHyper,
    FninParams,
    FourierLayer,
    SpectralWeights,
    named_arrays,
)
from .geometry import CameraModel, DepthMap, depth_to_points

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# PFM float images
# ---------------------------------------------------------------------------

def write_pfm(path, image: np.ndarray, little_endian: bool = True):
    """Write a (H, W) or (H, W, 3) float image; rows are stored bottom-up."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    if image.ndim == 2:
        magic = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataError("PFM stores (H, W) or (H, W, 3) images")
    data = np.flipud(image).astype("<f4" if little_endian else ">f4")
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{image.shape[1]} {image.shape[0]}\n".encode("ascii"))
        fh.write(f"{scale:.6f}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns float32 (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise DataError(f"not a PFM file (magic {magic!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise DataError("malformed PFM size line")
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        if scale == 0:
            raise DataError("PFM scale must be nonzero")
        count = width * height * channels
        raw = fh.read(count * 4)
        if len(raw) != count * 4:
            raise DataError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
    img = np.flipud(img).astype(np.float32)
    return img[..., 0] if channels == 1 else img


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def read_mask(path) -> np.ndarray:
    """8-bit grayscale PNG/PGM; pixels above 127 are masked in."""
    img = np.asarray(Image.open(path).convert("L"))
    return img > 127


def write_mask(path, mask: np.ndarray):
    img = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(img, mode="L").save(path)


def write_png(path, image: np.ndarray):
    Image.fromarray(image).save(path)


# ---------------------------------------------------------------------------
# Parameter container
# ---------------------------------------------------------------------------

def save_params(path, params: FninParams):
    """Serialize a parameter set; float tensors as f32, complex as c64."""
    hp = params.hyper
    tensors = {}
    payload = bytearray()
    for name, arr in named_arrays(params):
        if np.iscomplexobj(arr):
            data = np.ascontiguousarray(arr.astype("<c8")).tobytes()
            dtype = "c64"
        else:
            data = np.ascontiguousarray(arr.astype("<f4")).tobytes()
            dtype = "f32"
        tensors[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": len(payload),
            "length": len(data),
        }
        payload.extend(data)
    header = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": {"T": hp.n_layers, "k_max": hp.k_max,
                            "d_v": hp.width, "c_a": hp.attention_width},
        "tensors": tensors,
    }
    header.update(getattr(params, "extra_header", {}))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


_ITEM_SIZE = {"f32": 4, "c64": 8}


def load_params(path) -> FninParams:
    """Read a parameter container and rebuild the structured parameters."""
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise DataError("truncated container header prefix")
        header_len = struct.unpack("<Q", prefix)[0]
        blob = fh.read(header_len)
        if len(blob) != header_len:
            raise DataError("truncated container header")
        header = json.loads(blob.decode("utf-8"))
        payload = fh.read()

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"container format_version {version} unsupported; "
                        f"this build reads version {FORMAT_VERSION} - "
                        "re-export the parameters with a matching tool")
    hyper_raw = header.get("hyperparameters", {})
    for key in ("T", "k_max", "d_v", "c_a"):
        if key not in hyper_raw:
            raise DataError(f"container header misses hyperparameter {key!r}")
    table = header.get("tensors", {})

    spans = []
    arrays: dict[str, np.ndarray] = {}
    for name, meta in table.items():
        dtype = meta.get("dtype")
        if dtype not in _ITEM_SIZE:
            raise DataError(f"tensor {name}: unsupported dtype {dtype!r}")
        shape = tuple(int(s) for s in meta["shape"])
        offset, length = int(meta["offset"]), int(meta["length"])
        expected = _ITEM_SIZE[dtype] * int(np.prod(shape)) if shape else _ITEM_SIZE[dtype]
        if length != expected:
            raise DataError(f"tensor {name}: length {length} != dtype*shape {expected}")
        if offset < 0 or offset + length > len(payload):
            raise DataError(f"tensor {name}: payload range out of bounds")
        spans.append((offset, offset + length, name))
        raw = payload[offset:offset + length]
        if dtype == "c64":
            arr = np.frombuffer(raw, dtype="<c8").reshape(shape).astype(np.complex128)
        else:
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        arrays[name] = arr
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise DataError(f"overlapping payload ranges for {n0} and {n1}")

    hyper = FninHyper(n_layers=int(hyper_raw["T"]), k_max=int(hyper_raw["k_max"]),
                      width=int(hyper_raw["d_v"]), attention_width=int(hyper_raw["c_a"]))

    def count_layers(prefix, suffix):
        n = 0
        while f"{prefix}.{n}.{suffix}" in arrays:
            n += 1
        return n

    def dense(prefix):
        return [DenseLayer(arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"])
                for i in range(count_layers(prefix, "weight"))]

    def fourier(prefix):
        n = count_layers(prefix, "pointwise")
        if n != hyper.n_layers:
            raise DataError(f"header declares T={hyper.n_layers} but {prefix} net "
                            f"has {n} layers")
        return [FourierLayer(arrays[f"{prefix}.{t}.pointwise"], arrays[f"{prefix}.{t}.bias"],
                             SpectralWeights(arrays[f"{prefix}.{t}.spectral"]))
                for t in range(n)]

    def conv(prefix):
        return [ConvLayer(arrays[f"{prefix}.{i}.kernel"], arrays[f"{prefix}.{i}.bias"])
                for i in range(count_layers(prefix, "kernel"))]

    params = FninParams(
        lift=dense("lift"),
        project=dense("project"),
        initial_net=fourier("initial"),
        iterative_net=fourier("iterative"),
        attention_extractor=conv("att_extract"),
        attention_regressor=conv("att_regress"),
        hyper=hyper,
    ).validate()
    extra = {k: v for k, v in header.items()
             if k not in ("format_version", "hyperparameters", "tensors")}
    if extra:
        params.extra_header = extra
    return params


# ---------------------------------------------------------------------------
# Camera descriptions
# ---------------------------------------------------------------------------

def save_camera(path, cam: CameraModel):
    doc = {"projection": cam.projection, "f": cam.f, "mu": cam.mu,
           "width": cam.width, "height": cam.height}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_camera(path) -> CameraModel:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return CameraModel(
            projection=doc["projection"],
            width=int(doc["width"]),
            height=int(doc["height"]),
            f=None if doc.get("f") is None else float(doc["f"]),
            mu=float(doc.get("mu", 1.0)),
        )
    except KeyError as exc:
        raise DataError(f"camera description misses {exc}") from exc


# ---------------------------------------------------------------------------
# Mesh export
# ---------------------------------------------------------------------------

def export_obj(path, z: DepthMap, cam: CameraModel):
    """Write an ASCII OBJ mesh: one vertex per masked-in pixel, two triangles
    per fully valid 2x2 block, consistently wound toward the camera."""
    z_lin = z.to_linear()
    pts = depth_to_points(z_lin, cam).points * cam.mu
    mask = z_lin.mask
    h, w = mask.shape
    index = np.zeros(mask.shape, dtype=np.int64)
    index[mask] = np.arange(1, int(mask.sum()) + 1)  # OBJ indices are 1-based
    with open(path, "w") as fh:
        fh.write("# surface reconstruction export\n")
        for i, j in zip(*np.nonzero(mask)):
            x, y, d = pts[i, j]
            fh.write(f"v {x:.8g} {y:.8g} {d:.8g}\n")
        quad = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
        for i, j in zip(*np.nonzero(quad)):
            a = index[i, j]
            b = index[i, j + 1]
            c = index[i + 1, j]
            d = index[i + 1, j + 1]
            fh.write(f"f {a} {b} {c}\n")
            fh.write(f"f {c} {b} {d}\n")


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

def append_metric_row(path, obj_name: str, method: str, mae: float, runtime_s: float):
    new = not _file_has_content(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["object", "method", "MAE_mm", "runtime_s"])
        writer.writerow([obj_name, method, f"{mae:.8g}", f"{runtime_s:.6g}"])


def _file_has_content(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return bool(fh.read(1))
    except OSError:
        return False


def convert_dataset(src_dir, dst_dir):
    """Placeholder for photometric-stereo dataset conversion.

    Expected source layout per object: ``normals.pfm`` (3-channel, unit
    normals with n3 > 0 toward the camera), ``mask.png`` (or .pgm, >127
    masked in), ``camera.json`` with {projection, f, mu, width, height},
    and optionally ``gt_depth.pfm`` (relative linear depth).  Dataset
    specific axis flips or sign conventions must be applied by the caller;
    nothing here guesses encodings.
    """
    raise NotImplementedError("dataset conversion is dataset specific; "
                              "see the docstring for the expected layout")
