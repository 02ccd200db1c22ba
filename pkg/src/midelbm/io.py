"""Readers and writers: point clouds, Metaball files, configs, VTK, CSV, STL."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import dem, engine, geometry as geo, lbm


class MalformedInputError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _floats(path, lineno, tokens, count):
    if len(tokens) < count:
        raise MalformedInputError(path, lineno, f"expected {count} numbers, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens[:count]]
    except ValueError:
        raise MalformedInputError(path, lineno, f"not a number in {' '.join(tokens)!r}") from None
    if not all(np.isfinite(vals)):
        raise MalformedInputError(path, lineno, "non-finite value")
    return vals


# --- point clouds ---------------------------------------------------------

def read_xyz(path) -> np.ndarray:
    """Whitespace separated ``x y z`` rows; ``#`` comments and blank lines skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split("#", 1)[0].replace(",", " ").split()
            if tokens:
                rows.append(_floats(path, lineno, tokens, 3))
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows)


def write_xyz(path, points):
    np.savetxt(path, np.asarray(points, float).reshape(-1, 3), fmt="%.17g")


def read_ply(path) -> np.ndarray:
    """Vertex positions from an ASCII PLY file (other elements are ignored)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedInputError(path, 1, "missing 'ply' magic")
    elements = []  # (name, count, [props])
    i = 1
    fmt = None
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise MalformedInputError(path, i, "bad element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedInputError(path, i, "property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list",))
        elif tok[0] == "end_header":
            break
    else:
        raise MalformedInputError(path, i, "missing end_header")
    if fmt != "ascii":
        raise MalformedInputError(path, 2, f"only ascii PLY is supported, got {fmt!r}")
    rows = []
    for name, count, props in elements:
        if name != "vertex":
            i += count
            continue
        try:
            ix = [props.index(a) for a in "xyz"]
        except ValueError:
            raise MalformedInputError(path, i, "vertex element lacks x/y/z") from None
        for _ in range(count):
            if i >= len(lines):
                raise MalformedInputError(path, i, "unexpected end of file in vertex list")
            tok = lines[i].split()
            i += 1
            vals = _floats(path, i, tok, len(props))
            rows.append([vals[k] for k in ix])
        break
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows)


def read_points(path) -> np.ndarray:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


# --- Metaball files -------------------------------------------------------

def write_metaball(path, mb: geo.Metaball):
    lines = [f"metaball {mb.n} {mb.sphero_radius!r}"]
    lines += [f"{c[0]!r} {c[1]!r} {c[2]!r} {k!r}" for c, k in zip(mb.centers.tolist(), mb.weights.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metaball(path) -> geo.Metaball:
    """Header ``metaball <n> <sphero_radius>`` followed by n rows ``x y z k``."""
    header = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split("#", 1)[0].split()
            if not tokens:
                continue
            if header is None:
                if tokens[0] != "metaball" or len(tokens) != 3:
                    raise MalformedInputError(path, lineno, "expected 'metaball <n> <sphero_radius>'")
                try:
                    n = int(tokens[1])
                except ValueError:
                    raise MalformedInputError(path, lineno, "control point count is not an integer") from None
                header = (n, _floats(path, lineno, tokens[2:], 1)[0])
                continue
            if len(rows) == header[0]:
                raise MalformedInputError(path, lineno, "more control points than declared")
            rows.append(_floats(path, lineno, tokens, 4))
    if header is None:
        raise MalformedInputError(path, 1, "empty Metaball file")
    if len(rows) != header[0]:
        raise MalformedInputError(path, lineno, f"declared {header[0]} control points, found {len(rows)}")
    a = np.array(rows, float).reshape(-1, 4)
    try:
        return geo.Metaball(a[:, :3], a[:, 3], header[1])
    except ValueError as exc:
        raise MalformedInputError(path, 1, str(exc)) from None


# --- STL ------------------------------------------------------------------

def write_stl(path, verts, faces, name: str = "metaball"):
    v = np.asarray(verts, float)
    tri = v[np.asarray(faces)]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.divide(nrm, ln, out=np.zeros_like(nrm), where=ln > 0)
    out = [f"solid {name}"]
    for n, t in zip(nrm, tri):
        out.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
        out.append("    outer loop")
        out.extend(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}" for p in t)
        out.append("    endloop")
        out.append("  endfacet")
    out.append(f"endsolid {name}")
    Path(path).write_text("\n".join(out) + "\n")


def read_stl(path) -> np.ndarray:
    """Triangles (T, 3, 3) of an ASCII STL file."""
    verts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if tok and tok[0] == "vertex":
                verts.append(_floats(path, lineno, tok[1:], 3))
    if len(verts) % 3:
        raise MalformedInputError(path, lineno, "vertex count is not a multiple of 3")
    return np.array(verts).reshape(-1, 3, 3)


# --- legacy VTK -----------------------------------------------------------

def write_vtk(path, fld: lbm.LatticeField, binary: bool = False, fluid_density: float = 1.0):
    """STRUCTURED_POINTS snapshot with density, velocity and node class.

    Density is scaled by ``fluid_density`` and velocity converted to
    physical units; points are ordered x fastest as VTK expects.
    """
    spec = fld.spec
    d = spec.dim
    dims = list(fld.shape) + [1] * (3 - d)
    origin = fld.positions[0]
    n = fld.n

    def order(a):
        g = np.asarray(a).reshape(tuple(fld.shape) + np.asarray(a).shape[1:])
        return np.transpose(g, tuple(range(d))[::-1] + tuple(range(d, g.ndim))).reshape(n, -1)

    rho = order(fld.rho * fluid_density)
    vel = order(fld.u * spec.dx / spec.dt)
    cls = order(fld.node_class.astype(np.int32))
    head = ["# vtk DataFile Version 3.0", "midelbm lattice snapshot",
            "BINARY" if binary else "ASCII", "DATASET STRUCTURED_POINTS",
            "DIMENSIONS {} {} {}".format(*dims),
            "ORIGIN {!r} {!r} {!r}".format(*origin.tolist()),
            "SPACING {0!r} {0!r} {0!r}".format(spec.dx), f"POINT_DATA {n}"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode())
        for kind, name, typ, arr in (("SCALARS", "density", "double", rho),
                                     ("VECTORS", "velocity", "double", vel),
                                     ("SCALARS", "node_class", "int", cls)):
            line = f"{kind} {name} {typ}" + (" 1\nLOOKUP_TABLE default" if kind == "SCALARS" else "")
            fh.write((line + "\n").encode())
            if binary:
                fh.write(arr.astype(">f8" if typ == "double" else ">i4").tobytes())
                fh.write(b"\n")
            else:
                fmt = "%.17g" if typ == "double" else "%d"
                body = "\n".join(" ".join(fmt % v for v in row) for row in arr)
                fh.write((body + "\n").encode())


def read_vtk(path) -> dict:
    """Parse a file written by :func:`write_vtk` (arrays in x-fastest order)."""
    data = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = data.index(b"\n", pos)
        s = data[pos:end].decode()
        pos = end + 1
        return s

    out = {"arrays": {}}
    line()
    out["title"] = line()
    binary = line().strip() == "BINARY"
    line()
    out["dimensions"] = tuple(int(v) for v in line().split()[1:])
    out["origin"] = np.array([float(v) for v in line().split()[1:]])
    out["spacing"] = np.array([float(v) for v in line().split()[1:]])
    n = int(line().split()[1])
    while pos < len(data):
        head = line().split()
        if not head:
            continue
        kind, name, typ = head[:3]
        if kind == "SCALARS":
            line()
        width = 3 if kind == "VECTORS" else 1
        count = n * width
        if binary:
            dt = np.dtype(">f8" if typ == "double" else ">i4")
            arr = np.frombuffer(data, dt, count, pos).astype(float if typ == "double" else np.int32)
            pos += count * dt.itemsize + 1
        else:
            vals = []
            while len(vals) < count:
                vals.extend(line().split())
            arr = np.array(vals, float if typ == "double" else np.int32)
        out["arrays"][name] = arr.reshape(n, width) if width > 1 else arr
    return out


# --- CSV time series ------------------------------------------------------

def write_series_csv(path, records):
    rows = [",".join(engine.CSV_COLUMNS)]
    for r in records:
        for pid in range(len(r.position)):
            vals = [r.step, repr(r.time), pid, *r.position[pid].tolist(), *r.velocity[pid].tolist(),
                    *r.angular_velocity[pid].tolist(), *r.hydro_force[pid].tolist(),
                    *r.hydro_torque[pid].tolist(), r.contacts]
            rows.append(",".join(v if isinstance(v, str) else repr(v) for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")


def read_series_csv(path) -> list:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != engine.CSV_COLUMNS:
            raise MalformedInputError(path, 1, "unexpected column layout")
        table = [ln.strip().split(",") for ln in fh if ln.strip()]
    groups = {}
    for lineno, row in enumerate(table, 2):
        if len(row) != len(header):
            raise MalformedInputError(path, lineno, f"expected {len(header)} columns")
        groups.setdefault(int(row[0]), []).append(row)
    out = []
    for step, rows in groups.items():
        rows.sort(key=lambda r: int(r[2]))
        a = np.array([[float(v) for v in r[3:18]] for r in rows]).reshape(-1, 15)
        out.append(engine.TimeSeriesRecord(step, float(rows[0][1]), a[:, 0:3], a[:, 3:6], a[:, 6:9],
                                           a[:, 9:12], a[:, 12:15], int(rows[0][18])))
    return out


# --- scenario configs -----------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 3}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["domain", "dx", "dt_lbm", "dt_dem", "fluid", "particles"],
    "additionalProperties": False,
    "properties": {
        "domain": _VEC3,
        "lattice": {"enum": ["D2Q9", "D3Q15"]},
        "dx": {"type": "number", "exclusiveMinimum": 0},
        "dt_lbm": {"type": "number", "exclusiveMinimum": 0},
        "dt_dem": {"type": "number", "exclusiveMinimum": 0},
        "fluid": {
            "type": "object", "required": ["density", "viscosity"], "additionalProperties": False,
            "properties": {
                "density": {"type": "number", "exclusiveMinimum": 0},
                "viscosity": {"type": "number", "exclusiveMinimum": 0},
                "viscosity_unit": {"enum": ["dynamic", "kinematic"]},
                "body_acceleration": _VEC3,
            },
        },
        "gravity": _VEC3,
        "walls": {"type": "array", "items": {"enum": ["x", "y", "z"]}, "uniqueItems": True},
        "wall_velocity": {
            "type": "object", "additionalProperties": False,
            "patternProperties": {"^[xyz]$": {"type": "array", "items": _VEC3, "minItems": 2, "maxItems": 2}},
        },
        "contact": {
            "type": "object", "additionalProperties": False,
            "properties": {k: {"type": "number", "minimum": 0}
                           for k in ("kn", "kt", "eta_n", "eta_t", "mu_s")},
        },
        "particles": {
            "type": "array",
            "items": {
                "type": "object", "required": ["density", "position"], "additionalProperties": False,
                "properties": {
                    "metaball": {"type": "string"},
                    "sphere_radius": {"type": "number", "exclusiveMinimum": 0},
                    "sphero_radius": {"type": "number", "minimum": 0},
                    "density": {"type": "number", "exclusiveMinimum": 0},
                    "position": _VEC3,
                    "orientation": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    "velocity": _VEC3,
                    "angular_velocity": _VEC3,
                    "prescribed": {"type": "boolean"},
                },
                "oneOf": [{"required": ["metaball"]}, {"required": ["sphere_radius"]}],
            },
        },
        "steps": {"type": "integer", "minimum": 0},
        "duration": {"type": "number", "minimum": 0},
        "record_every": {"type": "integer", "minimum": 1},
        "snapshot_every": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "mass_resolution": {"type": "integer", "minimum": 32},
        "vtk_binary": {"type": "boolean"},
    },
}


def _pad3(v):
    v = [float(x) for x in v]
    return tuple(v + [0.0] * (3 - len(v)))


def config_from_dict(doc: dict, base_dir=".") -> engine.SimulationConfig:
    """Validate ``doc`` against :data:`CONFIG_SCHEMA` and build the config."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path).lstrip(".")
        raise engine.ConfigError(where or "<root>", e.message)
    base = Path(base_dir)
    particles = []
    for i, p in enumerate(doc["particles"]):
        if "metaball" in p:
            mpath = base / p["metaball"]
            if not mpath.is_file():
                raise engine.ConfigError(f"particles[{i}].metaball", f"file not found: {mpath}")
            shape = read_metaball(mpath)
            if "sphero_radius" in p:
                shape = geo.Metaball(shape.centers, shape.weights, p["sphero_radius"])
            source = str(p["metaball"])
        else:
            shape = geo.Metaball.sphere(p["sphere_radius"], sphero_radius=p.get("sphero_radius", 0.0))
            source = None
        particles.append(engine.ParticleConfig(
            shape, p["density"], _pad3(p["position"]), tuple(p.get("orientation", (1, 0, 0, 0))),
            _pad3(p.get("velocity", (0, 0, 0))), _pad3(p.get("angular_velocity", (0, 0, 0))),
            p.get("prescribed", False), source))
    fl = doc["fluid"]
    fluid = lbm.FluidConfig(fl["density"], fl["viscosity"], fl.get("viscosity_unit", "dynamic"),
                            _pad3(fl.get("body_acceleration", (0, 0, 0))))
    lattice = doc.get("lattice", "D3Q15")
    dim = 2 if lattice == "D2Q9" else 3
    steps = doc.get("steps")
    if steps is None:
        if "duration" not in doc:
            raise engine.ConfigError("steps", "either steps or duration is required")
        steps = int(round(doc["duration"] / doc["dt_lbm"]))
    kw = dict(
        domain=_pad3(doc["domain"]), lattice=lattice, dx=doc["dx"], dt_lbm=doc["dt_lbm"],
        dt_dem=doc["dt_dem"], fluid=fluid, particles=particles,
        walls=tuple(doc.get("walls", "xyz"[:dim])),
        wall_velocity={k: (_pad3(v[0]), _pad3(v[1])) for k, v in doc.get("wall_velocity", {}).items()},
        gravity=_pad3(doc.get("gravity", (0, -9.81) if dim == 2 else (0, 0, -9.81))),
        contact=dem.ContactParams(**doc.get("contact", {})), steps=steps,
        record_every=doc.get("record_every", 1), snapshot_every=doc.get("snapshot_every", 0),
        seed=doc.get("seed", 0), mass_resolution=doc.get("mass_resolution", 64),
        vtk_binary=doc.get("vtk_binary", False))
    return engine.SimulationConfig(**kw)


def load_config(path) -> tuple[engine.SimulationConfig, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedInputError(path, exc.lineno, exc.msg) from None
    return config_from_dict(doc, path.parent), doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --- run manifest ---------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    wall_clock: float = 0.0
    timing: dict = field(default_factory=dict)
    status: str = "ok"
    failure_step: int | None = None
    error: str | None = None
    outputs: list = field(default_factory=list)
    csv_columns: list = field(default_factory=lambda: list(engine.CSV_COLUMNS))
    csv_version: int = engine.CSV_VERSION

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
