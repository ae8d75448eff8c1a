"""On-disk formats: RIDC checkpoints, binary PGM images, metrics CSV."""

from __future__ import annotations

import csv
import io as _io
import os
import re
import struct

import numpy as np

from .adapters import LoraGroup, LoraPair
from .diffusion import Denoiser
from .errors import ContractError
from .metrics import HIGHER_IS_BETTER, METRICS, MetricsHistory, MetricsRecord

MAGIC = b"RIDC"
VERSION = 1


# -- checkpoints --------------------------------------------------------
def encode_arrays(arrays: dict) -> bytes:
    """Header (magic, version, count) then, per array, name, rank, dims and float64 LE payload."""
    buf = _io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return buf.getvalue()


def decode_arrays(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ContractError("not a RIDC checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
            out[name] = arr
    except (struct.error, ValueError) as e:
        raise ContractError(f"truncated checkpoint: {e}") from e
    if pos != len(view):
        raise ContractError("trailing bytes after checkpoint payload")
    return out


def save_arrays(path, arrays: dict):
    data = encode_arrays(arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        return decode_arrays(f.read())


def model_arrays(model: Denoiser) -> dict:
    out = dict(model.named_params())
    out["schedule.alpha_bar"] = model.alpha_bar
    out["meta.t_dim"] = np.array([float(model.t_dim)])
    return out


_LORA = re.compile(r"layer(\d+)\.lora(\d+)\.([AB])$")


def model_from_arrays(arrays: dict) -> Denoiser:
    """Rebuild a denoiser; every pair except the newest comes back frozen."""
    if "skip.W" not in arrays or "meta.t_dim" not in arrays:
        raise ContractError("checkpoint lacks the skip weight or metadata")
    n_layers = 1 + max(int(m.group(1)) for k in arrays if (m := re.match(r"layer(\d+)\.W$", k)))
    layers = [LoraGroup(W=arrays[f"layer{i}.W"].copy(), bias=arrays.get(f"layer{i}.bias")) for i in range(n_layers)]
    for g in layers:
        if g.bias is not None:
            g.bias = g.bias.copy()
    pairs = {}
    for k, v in arrays.items():
        m = _LORA.match(k)
        if m:
            pairs.setdefault((int(m.group(1)), int(m.group(2))), {})[m.group(3)] = v.copy()
    for (i, t) in sorted(pairs):
        ab = pairs[(i, t)]
        layers[i].pairs.append(LoraPair(A=ab["A"], B=ab["B"], task_id=t))
    for g in layers:
        for p in g.pairs[:-1]:
            p.frozen = True
    t_dim = int(arrays["meta.t_dim"][0])
    return Denoiser(layers, arrays["schedule.alpha_bar"].copy(), t_dim=t_dim, c_dim=layers[0].d_in,
                    skip=arrays["skip.W"].copy())


def save_model(path, model: Denoiser):
    save_arrays(path, model_arrays(model))


def load_model(path) -> Denoiser:
    return model_from_arrays(load_arrays(path))


# -- images -------------------------------------------------------------
def write_pgm(path, img: np.ndarray):
    """8-bit binary PGM (P5) of an (H, W) image with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"write_pgm: expected a 2-D image, got shape {img.shape}")
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(u8.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ContractError(f"{path}: not a binary PGM")
    w, h, maxval = map(int, m.groups())
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end())
    return pix.reshape(h, w).astype(np.float64) / maxval


def sample_grid(samples: np.ndarray, n_conditions: int, side: int = 16, cells: int = 8) -> np.ndarray:
    """``cells`` x ``cells`` mosaic: one row per condition, first samples of each along the row."""
    per = len(samples) // n_conditions
    s = np.asarray(samples).reshape(n_conditions, per, side, side)
    grid = np.zeros((cells * side, cells * side))
    for r in range(min(cells, n_conditions)):
        for c in range(min(cells, per)):
            grid[r * side:(r + 1) * side, c * side:(c + 1) * side] = s[r, c]
    return grid


# -- metrics CSV --------------------------------------------------------
CSV_HEADER = ("task_index", "metric", "value", "direction", "active_from")


def _dir(hib: bool) -> str:
    return "higher" if hib else "lower"


def write_metrics_csv(path, history: MetricsHistory):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in history.records:
            for m in METRICS:
                act = history.active_from.get(m)
                w.writerow([rec.task_index, m, repr(float(rec.values[m])), _dir(history.directions[m]),
                            "" if act is None else act])


def read_metrics_csv(path) -> MetricsHistory:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ContractError(f"{path}: unexpected header {rows[:1]}")
    by_task, directions, active = {}, {}, {}
    for row in rows[1:]:
        if len(row) != 5:
            raise ContractError(f"{path}: malformed row {row}")
        t, m, v, d, a = row
        by_task.setdefault(int(t), {})[m] = float(v)
        if d not in ("higher", "lower"):
            raise ContractError(f"{path}: bad direction {d!r}")
        directions[m] = d == "higher"
        active[m] = int(a) if a != "" else None
    h = MetricsHistory(directions=dict(HIGHER_IS_BETTER) | directions,
                       active_from={m: a for m, a in active.items() if a is not None})
    for t in sorted(by_task):
        h.records.append(MetricsRecord(t, by_task[t], 0, 0))
    return h
