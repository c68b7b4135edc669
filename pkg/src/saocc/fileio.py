"""Point cloud, mesh, checkpoint and run-config files.

Formats
-------
* PLY: ASCII only. One ``vertex`` element with float properties ``x y z``
  and optionally ``nx ny nz``; other properties are ignored.
* XYZ: one point per line, 3 (position) or 6 (position + normal) numbers.
* OBJ: ``v x y z`` lines then ``f i j k`` lines, 1-based indices.
* Checkpoint (little-endian)::

      b"SAOC" | u32 version | u32 n | n bytes of JSON network config
      repeated: u32 name_len | name (utf-8) | u32 rank | u64[rank] dims | f64[prod(dims)]
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParseError, SchemaError, VersionError
from .geometry import PointCloud
from .meshing import MiseConfig, TriMesh
from .network import ConvOccNet, NetConfig, parameter_shapes
from .pipeline import PretrainConfig, SAOptConfig

FLOAT_FMT = "%.17g"
MAGIC = b"SAOC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# point clouds


def _unit_normals(normals):
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return normals / norm


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"expected numbers, got {' '.join(tokens)!r}") from None


def load_xyz(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) not in (3, 6):
                raise ParseError(path, lineno, f"expected 3 or 6 values, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(path, lineno, f"expected {width} values like earlier lines, got {len(tokens)}")
            rows.append(_floats(tokens, path, lineno))
    data = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    normals = _unit_normals(data[:, 3:]) if width == 6 else None
    return PointCloud(data[:, :3], normals)


def load_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "expected 'ply' magic line")
    props, count, in_vertex = [], None, False
    elements = []
    end = None
    for i, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(path, i, "only 'format ascii 1.0' is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(path, i, "expected 'element <name> <count>'")
            in_vertex = tok[1] == "vertex"
            elements.append(tok[1])
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError(path, i, f"bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property":
            if in_vertex:
                if tok[1] == "list":
                    raise ParseError(path, i, "list properties on vertices are not supported")
                props.append(tok[-1])
        elif tok[0] == "end_header":
            end = i
            break
        else:
            raise ParseError(path, i, f"unexpected header line {line!r}")
    if end is None:
        raise ParseError(path, len(lines), "missing end_header")
    if count is None or elements[0] != "vertex":
        raise ParseError(path, end, "expected the vertex element first")
    for name in "xyz":
        if name not in props:
            raise ParseError(path, end, f"vertex property {name!r} missing")
    cols = [props.index(n) for n in "xyz"]
    has_n = all(n in props for n in ("nx", "ny", "nz"))
    ncols = [props.index(n) for n in ("nx", "ny", "nz")] if has_n else []
    body = lines[end:end + count]
    if len(body) < count:
        raise ParseError(path, len(lines), f"expected {count} vertex lines, file has {len(body)}")
    data = np.empty((count, len(props)))
    for k, line in enumerate(body):
        tok = line.split()
        if len(tok) != len(props):
            raise ParseError(path, end + k + 1, f"expected {len(props)} values, got {len(tok)}")
        data[k] = _floats(tok, path, end + k + 1)
    normals = _unit_normals(data[:, ncols]) if has_n else None
    return PointCloud(data[:, cols], normals)


def load_point_cloud(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix in (".xyz", ".txt", ".pts"):
        return load_xyz(path)
    raise ContractError(f"unsupported point cloud format {suffix!r} (use .ply or .xyz)")


def save_point_cloud(pc, path):
    path = Path(path)
    has_n = pc.normals is not None
    data = np.hstack([pc.points, pc.normals]) if has_n else pc.points
    with open(path, "w") as fh:
        if path.suffix.lower() == ".ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(pc)}\n")
            for name in ("x", "y", "z") + (("nx", "ny", "nz") if has_n else ()):
                fh.write(f"property double {name}\n")
            fh.write("end_header\n")
        np.savetxt(fh, data, fmt=FLOAT_FMT)


# ---------------------------------------------------------------------------
# meshes


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write("# saocc mesh\n")
        np.savetxt(fh, mesh.vertices, fmt="v " + " ".join([FLOAT_FMT] * 3))
        np.savetxt(fh, mesh.faces + 1, fmt="f %d %d %d")


def load_mesh(path):
    verts, faces, face_lines = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ParseError(path, lineno, "vertex needs 3 coordinates")
                verts.append(_floats(tok[1:4], path, lineno))
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ParseError(path, lineno, "only triangular faces are supported")
                try:
                    faces.append([int(t.split("/")[0]) - 1 for t in tok[1:]])
                except ValueError:
                    raise ParseError(path, lineno, "bad face index") from None
                face_lines.append(lineno)
    mesh = TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    bad = np.flatnonzero(np.any((mesh.faces < 0) | (mesh.faces >= len(mesh.vertices)), axis=1))
    if len(bad):
        raise ParseError(path, face_lines[bad[0]], "face index out of range")
    return mesh


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path):
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        for name, tensor in model.named_parameters():
            raw = name.encode()
            data = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def _read(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise SchemaError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise VersionError(f"{path}: not a checkpoint (magic {magic!r})")
        version, n = struct.unpack("<II", _read(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        try:
            cfg = NetConfig(**json.loads(_read(fh, n, "config")))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: bad config block: {exc}") from None
        expected = parameter_shapes(cfg)
        params = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise SchemaError("truncated checkpoint")
            (ln,) = struct.unpack("<I", head)
            name = _read(fh, ln, "tensor name").decode()
            (rank,) = struct.unpack("<I", _read(fh, 4, name))
            dims = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank, name))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read(fh, 8 * count, name), dtype="<f8").reshape(dims)
            if name not in expected:
                raise SchemaError(f"unexpected tensor {name!r} in checkpoint")
            if name in params:
                raise SchemaError(f"duplicate tensor {name!r} in checkpoint")
            if tuple(dims) != tuple(expected[name]):
                raise SchemaError(f"tensor {name!r} has shape {dims}, expected {expected[name]}")
            params[name] = ad.Tensor(data.astype(np.float64), requires_grad=True, name=name)
    missing = [k for k in expected if k not in params]
    if missing:
        raise SchemaError(f"checkpoint is missing tensor {missing[0]!r}")
    return ConvOccNet(cfg, {k: params[k] for k in expected})


# ---------------------------------------------------------------------------
# run config


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sa: SAOptConfig = field(default_factory=SAOptConfig)
    mise: MiseConfig = field(default_factory=MiseConfig)
    tau: float = 0.01
    seed: int = 0

    SECTIONS = ("net", "pretrain", "sa", "mise")

    def keys(self):
        out = {}
        for sec in self.SECTIONS:
            for f in fields(getattr(self, sec)):
                out[f"{sec}.{f.name}"] = type(getattr(getattr(self, sec), f.name))
        out["tau"] = float
        out["seed"] = int
        return out

    def set(self, key, text):
        kinds = self.keys()
        if key not in kinds:
            raise ContractError(f"unknown config key {key!r}")
        kind = kinds[key]
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            value = text.lower() == "true"
        else:
            value = kind(text) if kind is not int else int(text, 10)
        if "." in key:
            sec, name = key.split(".", 1)
            setattr(getattr(self, sec), name, value)
        else:
            setattr(self, key, value)

    def validate(self):
        self.net.validate()
        self.pretrain.validate()
        self.sa.validate()
        self.mise.validate()
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        return self

    def get(self, key):
        if "." in key:
            sec, name = key.split(".", 1)
            return getattr(getattr(self, sec), name)
        return getattr(self, key)

    def dumps(self):
        return "".join(f"{k} = {self.get(k)}\n" for k in self.keys())


def parse_run_config(text, path="<config>"):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, lineno, "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ValueError:
            raise ParseError(path, lineno, f"bad value {value!r} for {key}") from None
        except ContractError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return cfg.validate()


def load_run_config(path):
    with open(path) as fh:
        return parse_run_config(fh.read(), str(path))
