"""Model files: a JSON manifest plus a little-endian binary blob.

Float model blob: per layer, ``out*in*k*k`` float32 weights in
``[out][in][ky][kx]`` order followed by ``out`` float32 biases.

Quantized model blob: per layer, int8 weights in the same order followed by
``out`` int32 biases. Per-channel scales, multipliers and shifts live in the
manifest.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..errors import FormatError, ValidationError
from ..model import Activation, ConvLayer, FloatModel
from ..quant import QuantizedLayer, QuantizedModel
from .formats import atomic_write

FLOAT_FORMAT = "edgestereo-float-model"
QUANT_FORMAT = "edgestereo-quantized-model"
FORMAT_VERSION = 1


def _blob_path(manifest_path: Path, blob_path) -> Path:
    return Path(blob_path) if blob_path else manifest_path.with_suffix(".bin")


def _layer_header(layer) -> dict:
    return {"in": int(layer.in_channels), "out": int(layer.out_channels),
            "k": int(layer.kernel), "activation": str(layer.activation)}


def save_float_model(model: FloatModel, manifest_path, blob_path=None):
    manifest_path = Path(manifest_path)
    blob = _blob_path(manifest_path, blob_path)
    chunks = []
    for layer in model.layers:
        chunks.append(layer.weights.astype("<f4").tobytes())
        chunks.append(layer.biases.astype("<f4").tobytes())
    manifest = {"format": FLOAT_FORMAT, "version": FORMAT_VERSION,
                "layers": [_layer_header(l) for l in model.layers],
                "blob": _relative(blob, manifest_path)}
    atomic_write(blob, b"".join(chunks))
    atomic_write(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())


def save_qmodel(qmodel: QuantizedModel, manifest_path, blob_path=None):
    manifest_path = Path(manifest_path)
    blob = _blob_path(manifest_path, blob_path)
    chunks, layers = [], []
    for layer in qmodel.layers:
        chunks.append(layer.q_weights.astype("i1").tobytes())
        chunks.append(layer.q_biases.astype("<i4").tobytes())
        entry = _layer_header(layer)
        entry.update(scales=[float(s) for s in layer.channel_scales],
                     mul=[int(m) for m in layer.mul], shift=[int(h) for h in layer.shift])
        layers.append(entry)
    manifest = {"format": QUANT_FORMAT, "version": FORMAT_VERSION, "tau": int(qmodel.tau),
                "z": int(qmodel.z_bits), "layers": layers, "blob": _relative(blob, manifest_path)}
    atomic_write(blob, b"".join(chunks))
    atomic_write(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode())


def _relative(blob: Path, manifest_path: Path) -> str:
    try:
        return str(blob.resolve().relative_to(manifest_path.resolve().parent))
    except ValueError:
        return str(blob.resolve())


def _read_manifest(path: Path, expected_format: str) -> dict:
    raw = path.read_bytes()
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    if manifest.get("format") != expected_format:
        raise FormatError(f"{path}: format is {manifest.get('format')!r}, expected {expected_format!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {manifest.get('version')!r}")
    if not isinstance(manifest.get("layers"), list) or not manifest["layers"]:
        raise FormatError(f"{path}: 'layers' must be a non-empty list")
    if not isinstance(manifest.get("blob"), str) or not manifest["blob"]:
        raise FormatError(f"{path}: 'blob' must name the weight file")
    return manifest


def _int(obj, key, where, lo=None, hi=None) -> int:
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}.{key}: missing")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"{where}.{key}: expected an integer, got {v!r}"[:200])
    if lo is not None and v < lo or hi is not None and v > hi:
        raise FormatError(f"{where}.{key}: {v} outside [{lo}, {hi}]")
    return v


def _shape(entry, where, prev_out):
    if not isinstance(entry, dict):
        raise FormatError(f"{where}: layer entry must be an object")
    cin = _int(entry, "in", where, 1, 1 << 16)
    cout = _int(entry, "out", where, 1, 1 << 16)
    k = _int(entry, "k", where, 1, 255)
    if k % 2 == 0:
        raise FormatError(f"{where}.k: kernel size {k} must be odd")
    if prev_out is not None and cin != prev_out:
        raise FormatError(f"{where}.in: {cin} does not match the previous layer's {prev_out} outputs")
    act = entry.get("activation", "none")
    if not isinstance(act, str):
        raise FormatError(f"{where}.activation: expected a string")
    try:
        activation = Activation.parse(act)
    except ValidationError as exc:
        raise FormatError(f"{where}.activation: {exc}") from None
    return cin, cout, k, activation


def _read_blob(path: Path, manifest: dict, expected: int) -> bytes:
    if "\x00" in manifest["blob"]:
        raise FormatError(f"{path}: blob name contains a NUL byte")
    blob_path = Path(manifest["blob"])
    if not blob_path.is_absolute():
        blob_path = path.parent / blob_path
    data = blob_path.read_bytes()
    if len(data) != expected:
        raise FormatError(f"{blob_path}: expected {expected} bytes from the manifest, found {len(data)}")
    return data


def load_float_model(manifest_path) -> FloatModel:
    path = Path(manifest_path)
    manifest = _read_manifest(path, FLOAT_FORMAT)
    shapes, prev, total = [], None, 0
    for i, entry in enumerate(manifest["layers"]):
        cin, cout, k, act = _shape(entry, f"{path}: layers[{i}]", prev)
        shapes.append((cin, cout, k, act))
        total += 4 * (cout * cin * k * k + cout)
        prev = cout
    data = _read_blob(path, manifest, total)
    layers, pos = [], 0
    for i, (cin, cout, k, act) in enumerate(shapes):
        n = cout * cin * k * k
        w = np.frombuffer(data, "<f4", n, pos).reshape(cout, cin, k, k)
        pos += 4 * n
        b = np.frombuffer(data, "<f4", cout, pos)
        pos += 4 * cout
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise FormatError(f"{path}: layers[{i}]: blob holds non-finite weights or biases")
        layers.append(ConvLayer(w.astype(np.float64), b.astype(np.float64), act))
    return FloatModel(tuple(layers))


def _number_list(entry, key, where, n, integer):
    v = entry.get(key)
    if not isinstance(v, list) or len(v) != n:
        raise FormatError(f"{where}.{key}: expected a list of {n} numbers")
    for j, x in enumerate(v):
        ok = isinstance(x, int) if integer else isinstance(x, (int, float))
        if not ok or isinstance(x, bool):
            raise FormatError(f"{where}.{key}[{j}]: expected {'an integer' if integer else 'a number'}")
    return v


def load_qmodel(manifest_path) -> QuantizedModel:
    path = Path(manifest_path)
    manifest = _read_manifest(path, QUANT_FORMAT)
    tau = _int(manifest, "tau", str(path), 1, 1 << 30)
    z = _int(manifest, "z", str(path), 1, 16)
    mmax, hmax = 2 ** z - 1, min(2 ** z - 1, 31)
    shapes, prev, total = [], None, 0
    for i, entry in enumerate(manifest["layers"]):
        where = f"{path}: layers[{i}]"
        cin, cout, k, act = _shape(entry, where, prev)
        scales = _number_list(entry, "scales", where, cout, False)
        for j, s in enumerate(scales):
            try:
                s = float(s)
            except OverflowError:
                s = math.inf
            if not (math.isfinite(s) and s > 0):
                raise FormatError(f"{where}.scales[{j}]: scale must be finite and > 0, got {s}")
        mul = _number_list(entry, "mul", where, cout, True)
        shift = _number_list(entry, "shift", where, cout, True)
        for j, m in enumerate(mul):
            if not 0 <= m <= mmax:
                raise FormatError(f"{where}.mul[{j}]: {m} outside [0, {mmax}]")
        for j, h in enumerate(shift):
            if not 0 <= h <= hmax:
                raise FormatError(f"{where}.shift[{j}]: {h} outside [0, {hmax}]")
        shapes.append((cin, cout, k, act, scales, mul, shift))
        total += cout * cin * k * k + 4 * cout
        prev = cout
    data = _read_blob(path, manifest, total)
    layers, pos = [], 0
    for cin, cout, k, act, scales, mul, shift in shapes:
        n = cout * cin * k * k
        w = np.frombuffer(data, "i1", n, pos).reshape(cout, cin, k, k)
        pos += n
        b = np.frombuffer(data, "<i4", cout, pos)
        pos += 4 * cout
        layers.append(QuantizedLayer(w.copy(), b.astype(np.int64), np.array(scales, dtype=np.float64),
                                     np.array(mul), np.array(shift), act, z))
    return QuantizedModel(tuple(layers), tau, z)
