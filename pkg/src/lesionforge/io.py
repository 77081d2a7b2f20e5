"""Binary volume (MVOL) and network checkpoint (NNW1) formats, plus text logs.

MVOL: b"MVL1", u8 kind (0 = f32 intensity, 1 = u8 label), u32 nx, ny, nz,
then voxels x-fastest.  NNW1: b"NNW1", u32 layer count, then per layer
u32 in_dim, u32 out_dim, u8 activation code, row-major f32 weights
(out x in) and f32 biases.  All integers little-endian.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .nn_core import ACTIVATION_CODES, DenseLayer, LayerSpec

MVOL_MAGIC = b"MVL1"
NNW_MAGIC = b"NNW1"
KIND_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}


def mvol_bytes(volume):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeError(f"MVOL stores 3D volumes, got shape {volume.shape}")
    kind = 1 if volume.dtype == np.uint8 else 0
    nz, ny, nx = volume.shape
    header = MVOL_MAGIC + struct.pack("<BIII", kind, nx, ny, nz)
    return header + np.ascontiguousarray(volume, dtype=KIND_DTYPES[kind]).tobytes()


def mvol_write(volume, path):
    """Write a [z, y, x] array; uint8 arrays become label volumes, anything else f32."""
    Path(path).write_bytes(mvol_bytes(volume))


def mvol_parse(buf):
    if len(buf) < 4 or buf[:4] != MVOL_MAGIC:
        raise FormatError("bad MVOL magic", offset=0)
    if len(buf) < 17:
        raise FormatError("truncated MVOL header", offset=len(buf))
    kind = buf[4]
    if kind not in KIND_DTYPES:
        raise FormatError(f"unknown MVOL kind {kind}", offset=4)
    nx, ny, nz = struct.unpack_from("<III", buf, 5)
    dtype = KIND_DTYPES[kind]
    need = 17 + nx * ny * nz * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated MVOL payload: need {need} bytes, have {len(buf)}",
                          offset=len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after MVOL payload", offset=need)
    data = np.frombuffer(buf, dtype=dtype, count=nx * ny * nz, offset=17)
    return data.reshape(nz, ny, nx).astype(dtype.newbyteorder("="), copy=True)


def mvol_read(path):
    return mvol_parse(Path(path).read_bytes())


def nnw_bytes(layers):
    out = [NNW_MAGIC, struct.pack("<I", len(layers))]
    for layer in layers:
        s = layer.spec
        out.append(struct.pack("<IIB", s.input_dim, s.output_dim, ACTIVATION_CODES[s.activation]))
        out.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    return b"".join(out)


def nnw_parse(buf):
    if len(buf) < 4 or buf[:4] != NNW_MAGIC:
        raise FormatError("bad NNW1 magic", offset=0)
    if len(buf) < 8:
        raise FormatError("truncated NNW1 header", offset=len(buf))
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    layers = []
    for _ in range(count):
        if len(buf) < pos + 9:
            raise FormatError("truncated layer header", offset=pos)
        d_in, d_out, code = struct.unpack_from("<IIB", buf, pos)
        if code not in _CODE_NAMES:
            raise FormatError(f"unknown activation code {code}", offset=pos + 8)
        pos += 9
        n_w, n_b = d_in * d_out, d_out
        if len(buf) < pos + 4 * (n_w + n_b):
            raise FormatError("truncated layer parameters", offset=len(buf))
        w = np.frombuffer(buf, "<f4", n_w, pos).reshape(d_out, d_in).astype(np.float32)
        pos += 4 * n_w
        b = np.frombuffer(buf, "<f4", n_b, pos).astype(np.float32)
        pos += 4 * n_b
        layers.append(DenseLayer(LayerSpec(d_in, d_out, _CODE_NAMES[code]), w, b))
    if pos != len(buf):
        raise FormatError("trailing bytes after NNW1 layers", offset=pos)
    return layers


def infer_role(layers):
    last = layers[-1]
    if last.activation == "softmax":
        return "sdae_classifier"
    if len(layers) == 2 and last.activation == "linear" and \
            last.spec.output_dim == layers[0].spec.input_dim:
        return "nd"
    return "encoder"


def save_network(net, path):
    """Write ``net`` as NNW1 plus a ``.json`` sidecar holding role and provenance."""
    path = Path(path)
    path.write_bytes(nnw_bytes(net.layers))
    sidecar = {"role": net.role, "digest": net.digest(), "provenance": net.provenance}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2,
                                                                  default=str))


def load_network(path, role=None):
    from .autoencoder import TrainedNetwork

    path = Path(path)
    layers = nnw_parse(path.read_bytes())
    side = path.with_suffix(path.suffix + ".json")
    provenance = {}
    if side.exists():
        meta = json.loads(side.read_text())
        provenance = meta.get("provenance", {})
        role = role or meta.get("role")
    return TrainedNetwork(layers, role or infer_role(layers), provenance)


def write_training_log(history, path):
    """One tab-separated line per epoch: epoch, train loss, val loss, val accuracy, lr."""
    lines = ["epoch\ttrain_loss\tval_loss\tval_accuracy\tlr"]
    for r in history:
        lines.append(f"{r.epoch}\t{r.train_loss:.8g}\t{r.val_loss:.8g}\t"
                     f"{r.val_accuracy:.6g}\t{r.lr:.8g}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_error_map(emap, path, network_digest=""):
    """MVOL of the map values plus a JSON sidecar (kind, p, stride, network digest)."""
    path = Path(path)
    mvol_write(emap.values.astype(np.float32), path)
    mvol_write(emap.valid.astype(np.uint8), path.with_suffix(".valid.mvol"))
    side = {"kind": emap.kind, "patch_size": emap.patch_size, "stride": emap.stride,
            "network": network_digest}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2))


def read_error_map(path):
    from .novelty import ErrorMap

    path = Path(path)
    values = mvol_read(path)
    side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    vpath = path.with_suffix(".valid.mvol")
    valid = mvol_read(vpath).astype(bool) if vpath.exists() else np.ones(values.shape, bool)
    return ErrorMap(values, valid, side["kind"], side["patch_size"], side.get("stride", 1),
                    {"network": side.get("network", "")})


def save_study(study, directory):
    """One MVOL per sequence (``<name>.mvol``) and ``labels.mvol`` when present."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, vol in study.sequences.items():
        p = directory / f"{name}.mvol"
        mvol_write(vol.astype(np.float32), p)
        paths[name] = str(p)
    label_path = None
    if study.labels is not None:
        label_path = directory / "labels.mvol"
        mvol_write(study.labels.astype(np.uint8), label_path)
    return paths, None if label_path is None else str(label_path)


def load_study(sequence_paths, label_path=None, study_id=""):
    from .preprocess import Study

    seqs = {name: mvol_read(p).astype(np.float32) for name, p in sequence_paths.items() if p}
    labels = mvol_read(label_path) if label_path else None
    return Study(seqs, labels, study_id=study_id)
