"""On-disk formats: episode directories, checkpoints, CSV tables and PGM frames.

Arrays are stored as raw little-endian float64 in row-major order, described
by a JSON manifest.  A checkpoint is a single file

    MAGIC | uint64 header length | JSON header | float64 payload

where the header lists every slot's name, shape and element offset.
"""

import csv
import io as _io
import json
import struct
from pathlib import Path

import numpy as np

from . import ad
from .datagen import Episode
from .errors import CheckpointError

EPISODE_FORMAT = "phidvae-episode"
EPISODE_VERSION = 1
CKPT_MAGIC = b"PHIDVAE-CKPT\n"
CKPT_VERSION = 1
_LE = "<f8"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_f64(path, arr):
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype=_LE).tobytes())


def read_f64(path, shape):
    data = np.frombuffer(Path(path).read_bytes(), dtype=_LE)
    if data.size != int(np.prod(shape, dtype=int)):
        raise ValueError(f"{path}: expected {shape}, found {data.size} values")
    return data.astype(np.float64).reshape(shape)


# PGM


def pgm_bytes(img):
    """P5 binary greymap, maxval 255; ``img`` holds intensities in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def write_pgm(path, img):
    Path(path).write_bytes(pgm_bytes(img))


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        parts.append(raw[start:pos])
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


# episodes

_EPISODE_ARRAYS = ("y", "truth_u", "truth_x", "clean_y", "u0")


def save_episode(episode, out_dir, frames=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name in _EPISODE_ARRAYS:
        a = getattr(episode, name)
        if a is None:
            continue
        a = np.asarray(a, dtype=np.float64)
        write_f64(out / f"{name}.f64", a)
        arrays[name] = {"file": f"{name}.f64", "shape": list(a.shape), "dtype": "float64", "endianness": "little"}
    manifest = {
        "format": EPISODE_FORMAT,
        "version": EPISODE_VERSION,
        "arrays": arrays,
        "frame_shape": list(episode.frame_shape) if episode.frame_shape else None,
        "gen_config": episode.gen_config,
        "seed": episode.gen_config.get("seed"),
    }
    (out / "manifest.json").write_text(dump_json(manifest))
    if frames and episode.frame_shape:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for n, row in enumerate(episode.y):
            write_pgm(fdir / f"frame_{n + 1:04d}.pgm", row.reshape(episode.frame_shape))
    return out


def load_episode(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no episode manifest in {path}") from exc
    if manifest.get("format") != EPISODE_FORMAT:
        raise ValueError(f"{path}: not an episode directory")
    arrays = {k: read_f64(path / v["file"], tuple(v["shape"])) for k, v in manifest["arrays"].items()}
    fs = manifest.get("frame_shape")
    return Episode(
        arrays["y"], arrays.get("truth_u"), arrays.get("truth_x"), arrays.get("clean_y"),
        arrays.get("u0"), manifest["gen_config"], tuple(fs) if fs else None,
    )


# checkpoints


def _rng_state(rng):
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=_json_default))


def save_checkpoint(path, theta, adam=None, rng=None, epoch=0, metrics=(), config=None, extra=None):
    slots = {f"theta/{k}": v for k, v in theta.items()}
    if adam is not None:
        slots.update({f"adam.m/{k}": v for k, v in adam.m.items()})
        slots.update({f"adam.v/{k}": v for k, v in adam.v.items()})
    layout, chunks, offset = [], [], 0
    for name, v in slots.items():
        a = np.asarray(ad.value(v), dtype=np.float64)
        layout.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(a, dtype=_LE).ravel())
        offset += a.size
    header = {
        "version": CKPT_VERSION,
        "slots": layout,
        "epoch": int(epoch),
        "adam_t": int(adam.t) if adam is not None else 0,
        "rng_state": _rng_state(rng) if rng is not None else None,
        "metrics": list(metrics),
        "config": config,
        "seed": (config or {}).get("seed"),
        "extra": extra or {},
    }
    hbytes = dump_json(header).encode("utf-8")
    payload = np.concatenate(chunks).tobytes() if chunks else b""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Returns (header, theta ParamSet, adam (m, v, t) or None, rng or None)."""
    from .elbo import AdamState

    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    header = json.loads(raw[pos + 8:pos + 8 + hlen].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data = np.frombuffer(raw[pos + 8 + hlen:], dtype=_LE)
    groups = {"theta": {}, "adam.m": {}, "adam.v": {}}
    for s in header["slots"]:
        n = int(np.prod(s["shape"], dtype=int))
        arr = data[s["offset"]:s["offset"] + n].astype(np.float64).reshape(s["shape"])
        group, name = s["name"].split("/", 1)
        groups[group][name] = arr
    theta = ad.ParamSet(groups["theta"])
    adam = None
    if groups["adam.m"]:
        adam = AdamState(ad.ParamSet(groups["adam.m"]), ad.ParamSet(groups["adam.v"]), header["adam_t"])
    rng = None
    if header.get("rng_state"):
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_state"]
    return header, theta, adam, rng


def check_layout(theta, expected_shapes):
    """Raise CheckpointError unless ``theta`` has exactly the expected slots and shapes."""
    got = {k: tuple(v) for k, v in theta.shapes.items()}
    want = {k: tuple(v) for k, v in expected_shapes.items()}
    if got != want:
        missing = sorted(set(want) - set(got))
        unexpected = sorted(set(got) - set(want))
        reshaped = sorted(k for k in set(got) & set(want) if got[k] != want[k])
        raise CheckpointError(
            f"checkpoint does not match the architecture: missing {missing}, "
            f"unexpected {unexpected}, reshaped {reshaped}"
        )


# CSV


def fmt_float(x):
    if x is None:
        return ""
    return format(float(x), ".17g")


def csv_text(header, rows):
    """RFC-4180 text with CRLF line ends; floats use 17 significant digits."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) or v is None else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    Path(path).write_bytes(csv_text(header, rows).encode("utf-8"))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def metrics_header(free_names):
    return (["epoch", "elbo", "nmse"] + [f"mu_lambda_{n}" for n in free_names]
            + [f"sigma_lambda_{n}" for n in free_names] + ["wallclock_s"])


def metrics_rows(metrics):
    return [[r["epoch"], float(r["elbo"]), float(r["nmse"])] + [float(v) for v in r["mu_lambda"]]
            + [float(v) for v in r["sigma_lambda"]] + [r["wallclock_s"]] for r in metrics]
