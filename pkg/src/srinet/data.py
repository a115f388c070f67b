"""Mesh ingestion, surface sampling, synthetic shapes and export formats.

Desk-scale experiments run on analytically sampled shapes (sphere, box,
cylinder, cone, torus) with exact normals and natural part labels, or on
small user-supplied OFF meshes. Outputs go to ASCII PLY with per-vertex
colors for visual inspection.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError
from .geom import PointCloud

SHAPE_KINDS = ("sphere", "box", "cylinder", "cone", "torus")


@dataclass(frozen=True)
class TriangleMesh:
    """Triangle soup: (V, 3) vertices and (F, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InvalidInputError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise InvalidInputError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise InvalidInputError("face indices out of vertex range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass(frozen=True)
class DatasetSample:
    """One labeled cloud; part labels, when present, live on the cloud."""

    cloud: PointCloud
    class_id: int


def parse_off(text: str) -> TriangleMesh:
    """Parse ASCII OFF. Polygon faces are fan-triangulated and zero-area
    triangles dropped; counts must match the header."""
    tokens: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for tok in line.split():
            tokens.append((lineno, tok))
    if not tokens:
        raise ParseError("empty OFF file", line=1)

    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(tokens):
            last = tokens[-1][0] if tokens else 1
            raise ParseError(f"file ends before {what}", line=last)
        item = tokens[pos]
        pos += 1
        return item

    lineno, magic = take("header")
    header = magic
    if magic.upper().startswith("OFF") and len(magic) > 3:
        # some exporters glue the vertex count onto the magic word
        header = magic[:3]
        tokens.insert(pos, (lineno, magic[3:]))
    if header.upper() != "OFF":
        raise ParseError(f"expected OFF header, got {magic!r}", line=lineno)

    def take_int(what):
        lineno, tok = take(what)
        try:
            return int(tok)
        except ValueError:
            raise ParseError(f"expected integer {what}, got {tok!r}",
                             line=lineno) from None

    def take_float(what):
        lineno, tok = take(what)
        try:
            return float(tok)
        except ValueError:
            raise ParseError(f"expected number for {what}, got {tok!r}",
                             line=lineno) from None

    n_verts = take_int("vertex count")
    n_faces = take_int("face count")
    take_int("edge count")
    if n_verts < 0 or n_faces < 0:
        raise ParseError("negative counts in header", line=lineno)

    verts = np.empty((n_verts, 3))
    for i in range(n_verts):
        for j in range(3):
            verts[i, j] = take_float(f"vertex {i}")

    tris = []
    for i in range(n_faces):
        lineno, _ = tokens[pos] if pos < len(tokens) else (None, None)
        arity = take_int(f"face {i} size")
        if arity < 3:
            raise ParseError(f"face {i} has {arity} vertices", line=lineno)
        idx = [take_int(f"face {i} index") for _ in range(arity)]
        for j in idx:
            if j < 0 or j >= n_verts:
                raise ParseError(f"face {i} references vertex {j}", line=lineno)
        for a, b in zip(idx[1:-1], idx[2:]):
            tris.append((idx[0], a, b))

    mesh = TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))
    keep = mesh.face_areas() > 1e-12
    if not np.all(keep):
        mesh = TriangleMesh(mesh.vertices, mesh.faces[keep])
    return mesh


def load_off(path) -> TriangleMesh:
    return parse_off(Path(path).read_text())


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Sample n points uniformly by area, with face normals.

    Faces are chosen proportionally to area; the point within a face is
    barycentric-uniform via the square-root trick.
    """
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 1e-12 or len(areas) == 0:
        raise InvalidInputError("mesh has no non-degenerate faces to sample")
    rng = np.random.Generator(np.random.PCG64(seed))
    cum = np.cumsum(areas)
    face_idx = np.searchsorted(cum, rng.random(n) * total)
    face_idx = np.minimum(face_idx, len(areas) - 1)

    tri = mesh.vertices[mesh.faces[face_idx]]          # (n, 3, 3)
    s = np.sqrt(rng.random(n))
    t = rng.random(n)
    w0 = 1.0 - s
    w1 = s * (1.0 - t)
    w2 = s * t
    points = (w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1]
              + w2[:, None] * tri[:, 2])

    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals = cross / np.linalg.norm(cross, axis=1, keepdims=True)
    return PointCloud(points, normals=normals)


def _sample_disc(rng, n, radius):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    rho = radius * np.sqrt(rng.random(n))
    return rho * np.cos(theta), rho * np.sin(theta)


def _synth_sphere(rng, n, radius=0.5):
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radius * dirs, dirs.copy(), None


def _synth_box(rng, n, half=(0.5, 0.35, 0.25)):
    hx, hy, hz = half
    face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    u = rng.uniform(-1.0, 1.0, n)
    v = rng.uniform(-1.0, 1.0, n)
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for ax, (ha, hb, hc) in enumerate([(hx, hy, hz), (hy, hx, hz), (hz, hx, hy)]):
        m = axis == ax
        others = [i for i in range(3) if i != ax]
        pts[m, ax] = sign[m] * ha
        pts[m, others[0]] = u[m] * hb
        pts[m, others[1]] = v[m] * hc
        nrm[m, ax] = sign[m]
    return pts, nrm, axis


def _synth_cylinder(rng, n, radius=0.35, height=1.0):
    side_area = 2.0 * np.pi * radius * height
    cap_area = np.pi * radius ** 2
    region = rng.choice(3, size=n, p=np.array(
        [side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    side = region == 0
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-height / 2, height / 2, side.sum())
    nrm[side, 0] = np.cos(theta[side])
    nrm[side, 1] = np.sin(theta[side])
    for which, z_sign in ((region == 1, 1.0), (region == 2, -1.0)):
        cx, cy = _sample_disc(rng, which.sum(), radius)
        pts[which, 0] = cx
        pts[which, 1] = cy
        pts[which, 2] = z_sign * height / 2
        nrm[which, 2] = z_sign
    parts = np.where(side, 0, 1)
    return pts, nrm, parts


def _synth_cone(rng, n, radius=0.45, height=1.0):
    slant = np.hypot(radius, height)
    lateral_area = np.pi * radius * slant
    base_area = np.pi * radius ** 2
    lateral = rng.random(n) < lateral_area / (lateral_area + base_area)
    pts = np.empty((n, 3))
    nrm = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    nl = lateral.sum()
    t = np.sqrt(rng.random(nl))                    # distance from apex, scaled
    rho = t * radius
    pts[lateral, 0] = rho * np.cos(theta[lateral])
    pts[lateral, 1] = rho * np.sin(theta[lateral])
    pts[lateral, 2] = height * (1.0 - t)
    nrm[lateral, 0] = np.cos(theta[lateral]) * height / slant
    nrm[lateral, 1] = np.sin(theta[lateral]) * height / slant
    nrm[lateral, 2] = radius / slant
    base = ~lateral
    cx, cy = _sample_disc(rng, base.sum(), radius)
    pts[base, 0] = cx
    pts[base, 1] = cy
    pts[base, 2] = 0.0
    nrm[base] = (0.0, 0.0, -1.0)
    parts = np.where(lateral, 0, 1)
    return pts, nrm, parts


def _synth_torus(rng, n, major=0.4, minor=0.15):
    # rejection on the tube angle gives uniform area density
    u = rng.uniform(0.0, 2.0 * np.pi, n)
    v = np.empty(n)
    need = np.ones(n, dtype=bool)
    while need.any():
        cand = rng.uniform(0.0, 2.0 * np.pi, need.sum())
        accept = rng.random(need.sum()) <= (major + minor * np.cos(cand)) / (major + minor)
        idx = np.flatnonzero(need)[accept]
        v[idx] = cand[accept]
        need[idx] = False
    ring = major + minor * np.cos(v)
    pts = np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
    nrm = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    return pts, nrm, None


_SYNTH = {"sphere": _synth_sphere, "box": _synth_box,
          "cylinder": _synth_cylinder, "cone": _synth_cone,
          "torus": _synth_torus}


def synth_shape(kind: str, n: int, seed: int, noise: float = 0.0) -> DatasetSample:
    """Sample an analytic surface with exact normals and natural part labels.

    Class id is the kind's position in SHAPE_KINDS. Gaussian noise, when
    requested, perturbs positions only; normals stay analytic.
    """
    if kind not in _SYNTH:
        raise InvalidInputError(
            f"unknown shape kind {kind!r}, want one of {SHAPE_KINDS}")
    if n < 64:
        raise InvalidInputError(f"need n >= 64, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    pts, nrm, parts = _SYNTH[kind](rng, n)
    if noise > 0.0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    class_id = SHAPE_KINDS.index(kind)
    cloud = PointCloud(pts, normals=nrm, label=class_id, part_labels=parts)
    return DatasetSample(cloud, class_id)


def make_synth_dataset(per_class: int, n_points: int, seed: int,
                       noise: float = 0.01,
                       kinds=SHAPE_KINDS) -> list[DatasetSample]:
    """per_class samples of every kind, seeded independently per sample."""
    samples = []
    for c, kind in enumerate(kinds):
        for i in range(per_class):
            samples.append(synth_shape(kind, n_points,
                                       seed * 1_000_003 + c * 10_007 + i, noise))
    return samples


def split_dataset(samples, train_frac: float = 0.8, seed: int = 0):
    """Fixed stratified split: shuffle within each class, cut at train_frac."""
    rng = np.random.Generator(np.random.PCG64(seed))
    by_class: dict[int, list] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)
    train, test = [], []
    for c in sorted(by_class):
        group = by_class[c]
        order = rng.permutation(len(group))
        cut = int(round(train_frac * len(group)))
        train.extend(group[i] for i in order[:cut])
        test.extend(group[i] for i in order[cut:])
    return train, test


def jitter(cloud: PointCloud, sigma: float, clip: float, seed: int) -> PointCloud:
    """Clipped Gaussian coordinate noise, deterministic per seed."""
    if sigma < 0:
        raise InvalidInputError("sigma must be nonnegative")
    if sigma == 0.0:
        return cloud
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = np.clip(rng.normal(0.0, sigma, cloud.points.shape), -clip, clip)
    return cloud.with_points(cloud.points + noise)


# fixed viridis-like ramp: anchors interpolated linearly in RGB
_RAMP = np.array([
    (0.267, 0.005, 0.329), (0.283, 0.141, 0.458), (0.254, 0.265, 0.530),
    (0.207, 0.372, 0.553), (0.164, 0.471, 0.558), (0.128, 0.567, 0.551),
    (0.135, 0.659, 0.518), (0.267, 0.749, 0.441), (0.478, 0.821, 0.318),
    (0.741, 0.873, 0.150), (0.993, 0.906, 0.144),
])

# categorical palette for integer labels, cycled
_PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207),
], dtype=np.uint8)


def scalar_colors(values: np.ndarray) -> np.ndarray:
    """Map scalars through the ramp: min to the first color, max to the
    last; constant input maps everything to the first color."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    t = np.zeros_like(values) if hi - lo <= 0 else (values - lo) / (hi - lo)
    x = t * (len(_RAMP) - 1)
    i = np.minimum(x.astype(int), len(_RAMP) - 2)
    frac = x - i
    rgb = _RAMP[i] * (1 - frac[:, None]) + _RAMP[i + 1] * frac[:, None]
    return np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)


def label_colors(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return _PALETTE[labels % len(_PALETTE)]


def write_ply_colored(cloud: PointCloud, values: np.ndarray, path) -> None:
    """ASCII PLY with per-vertex RGB.

    Integer values use the categorical palette, floats the scalar ramp.
    """
    values = np.asarray(values)
    if values.shape != (cloud.n,):
        raise InvalidInputError(
            f"need one value per point, got {values.shape} for N={cloud.n}")
    colors = (label_colors(values) if np.issubdtype(values.dtype, np.integer)
              else scalar_colors(values))
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    buf.write(f"element vertex {cloud.n}\n")
    buf.write("property float x\nproperty float y\nproperty float z\n")
    buf.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    buf.write("end_header\n")
    for p, c in zip(cloud.points, colors):
        buf.write(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {c[0]} {c[1]} {c[2]}\n")
    Path(path).write_text(buf.getvalue())


def parse_ply(text: str) -> PointCloud:
    """Minimal ASCII PLY reader: x/y/z plus optional nx/ny/nz properties."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply magic", line=1)
    n_verts = None
    props: list[str] = []
    body_start = None
    in_vertex = False
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise ParseError("only ascii PLY is supported", line=lineno)
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_verts = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if n_verts is None or body_start is None:
        raise ParseError("incomplete PLY header", line=len(lines))

    want = {name: props.index(name) for name in ("x", "y", "z")
            if name in props}
    if len(want) != 3:
        raise ParseError("vertex element lacks x/y/z", line=body_start)
    has_normals = all(n in props for n in ("nx", "ny", "nz"))

    rows = []
    for lineno in range(body_start, body_start + n_verts):
        if lineno >= len(lines):
            raise ParseError("file ends before all vertices", line=len(lines))
        fields = lines[lineno].split()
        if len(fields) < len(props):
            raise ParseError("short vertex row", line=lineno + 1)
        rows.append([float(f) for f in fields[:len(props)]])
    arr = np.asarray(rows, dtype=np.float64)
    pts = arr[:, [props.index("x"), props.index("y"), props.index("z")]]
    normals = None
    if has_normals:
        normals = arr[:, [props.index("nx"), props.index("ny"), props.index("nz")]]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(lengths > 0, lengths, 1.0)
        if np.any(lengths <= 0):
            normals = None
    return PointCloud(pts, normals=normals)


def load_cloud(path) -> PointCloud:
    """Read point data: PLY directly, or the vertices of an OFF mesh as a
    bare cloud."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".ply" or text.lstrip().startswith("ply"):
        return parse_ply(text)
    mesh = parse_off(text)
    return PointCloud(mesh.vertices)


def load_manifest(path) -> list[tuple[Path, int]]:
    """Plain-text dataset manifest: `<file> <class id>` per line, # comments.
    Paths are resolved relative to the manifest."""
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise ParseError("expected `<path> <class id>`", line=lineno)
        try:
            class_id = int(parts[1])
        except ValueError:
            raise ParseError(f"bad class id {parts[1]!r}", line=lineno) from None
        entries.append((path.parent / parts[0], class_id))
    return entries
