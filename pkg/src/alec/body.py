"""Articulated body: template + linear blend skinning, UV chart, local frames.

The template couples a triangle mesh, a kinematic tree with smooth skinning
weights, and a UV chart that pins one surface point (face + barycentric
coordinates) to each valid pixel of an H x W grid. Posing runs forward
kinematics over per-joint local rotations (rotating each joint about its
rest position), blends the resulting joint transforms per vertex, then
applies the root rotation/translation on top.

Chart points t_k, local frames T_k and the root-normalized positional map
are all derived from the posed vertices. T_k columns are the two (unit)
leading triangle edges and their cross product; the basis is deliberately
not orthogonalized.
"""

from dataclasses import dataclass, field

import numpy as np

from . import blockio


class BodyError(ValueError):
    pass


class FrameError(BodyError):
    pass


# ---------------------------------------------------------------------------
# rotations


def quat_to_matrix(q):
    """(...,4) unit quaternions (w,x,y,z) -> (...,3,3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def identity_quats(j):
    q = np.zeros((j, 4))
    q[:, 0] = 1.0
    return q


def _smoothstep(lo, hi, t):
    s = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class BodyTemplate:
    vertices: np.ndarray        # (V,3) rest positions, meters
    faces: np.ndarray           # (F,3) int vertex indices
    joints: np.ndarray          # (J,3) rest joint positions
    parent: np.ndarray          # (J,) int, -1 for the root
    skin_weights: np.ndarray    # (V,J), rows sum to 1
    chart_pixels: np.ndarray    # (K,2) int (row, col)
    chart_faces: np.ndarray     # (K,) int face index per chart entry
    chart_bary: np.ndarray      # (K,3) barycentric coords, rows sum to 1
    uv_resolution: tuple        # (H_uv, W_uv)
    joint_names: list = field(default_factory=list)

    @property
    def num_chart_points(self):
        return len(self.chart_faces)

    def chart_uv(self):
        """(K,2) pixel-center chart coordinates normalized to [0,1] (u=col, v=row)."""
        h, w = self.uv_resolution
        px = self.chart_pixels.astype(np.float64)
        return np.stack([(px[:, 1] + 0.5) / w, (px[:, 0] + 0.5) / h], axis=1)

    def validate(self):
        v, f, j = len(self.vertices), len(self.faces), len(self.joints)
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise BodyError("face indices out of range")
        if self.chart_faces.min() < 0 or self.chart_faces.max() >= f:
            raise BodyError("chart face index out of range")
        if np.any(self.chart_bary < -1e-12):
            raise BodyError("negative barycentric coordinate in chart")
        if np.max(np.abs(self.chart_bary.sum(axis=1) - 1.0)) > 1e-9:
            raise BodyError("chart barycentric rows must sum to 1")
        if np.max(np.abs(self.skin_weights.sum(axis=1) - 1.0)) > 1e-9:
            raise BodyError("skin weight rows must sum to 1")
        if len(self.parent) != j or self.parent[0] != -1:
            raise BodyError("parent array malformed (expect parent[0] == -1)")
        _kinematic_order(self.parent)  # raises on cycles
        return self


@dataclass
class Pose:
    joint_rotations: np.ndarray   # (J,4) unit quaternions or (J,3,3) matrices
    root_rotation: np.ndarray     # (4,) quaternion or (3,3) matrix
    root_translation: np.ndarray  # (3,)

    def joint_matrices(self):
        r = np.asarray(self.joint_rotations, dtype=np.float64)
        return r if r.ndim == 3 else quat_to_matrix(r)

    def root_matrix(self):
        r = np.asarray(self.root_rotation, dtype=np.float64)
        return r if r.ndim == 2 else quat_to_matrix(r)

    def validate(self):
        for m in list(self.joint_matrices()) + [self.root_matrix()]:
            if np.max(np.abs(m @ m.T - np.eye(3))) > 1e-6:
                raise BodyError("rotation not orthonormal within 1e-6")
        return self

    @staticmethod
    def identity(j):
        return Pose(identity_quats(j), np.array([1.0, 0, 0, 0]), np.zeros(3))


@dataclass
class PosedBody:
    vertices: np.ndarray          # (V,3) posed
    points: np.ndarray            # (K,3) chart points t_k
    frames: np.ndarray            # (K,3,3) local frames T_k
    positional_map: np.ndarray    # (3,H,W) root-normalized positions
    mask: np.ndarray              # (H,W) bool validity
    chart_pixels: np.ndarray      # (K,2) pixel (row,col) per chart entry
    uv_resolution: tuple


# ---------------------------------------------------------------------------
# posing


def _kinematic_order(parent):
    j = len(parent)
    order, placed = [], np.zeros(j, dtype=bool)
    remaining = list(range(j))
    while remaining:
        progress = False
        rest = []
        for i in remaining:
            p = parent[i]
            if p < 0 or placed[p]:
                order.append(i)
                placed[i] = True
                progress = True
            else:
                rest.append(i)
        if not progress:
            raise BodyError(f"kinematic tree has a cycle through joints {rest}")
        remaining = rest
    return order


def joint_transforms(template, pose):
    """Global 4x4 joint transforms relative to rest (identity pose -> identity)."""
    rots = pose.joint_matrices()
    j = len(template.joints)
    g = np.zeros((j, 4, 4))
    for i in _kinematic_order(template.parent):
        p = template.joints[i]
        local = np.eye(4)
        local[:3, :3] = rots[i]
        local[:3, 3] = p - rots[i] @ p
        par = template.parent[i]
        g[i] = local if par < 0 else g[par] @ local
    return g


def pose_body(template, pose):
    """Linear blend skinning plus the root rigid motion; returns (V,3)."""
    g = joint_transforms(template, pose)
    v = template.vertices
    # blend per-joint transforms of each vertex: sum_j w_vj * (R_j v + t_j)
    rot = np.einsum("vj,jab->vab", template.skin_weights, g[:, :3, :3])
    trn = template.skin_weights @ g[:, :3, 3]
    skinned = np.einsum("vab,vb->va", rot, v) + trn
    return skinned @ pose.root_matrix().T + pose.root_translation


def chart_points(posed_vertices, template):
    """t_k: barycentric combination of each chart entry's posed face. (K,3)"""
    tri = posed_vertices[template.faces[template.chart_faces]]  # (K,3,3)
    return np.einsum("kc,kcd->kd", template.chart_bary, tri)


def local_frames(posed_vertices, template, area_eps=1e-12):
    """T_k = [e1 e2 e3]: unit first edge, unit second edge, their cross. (K,3,3)"""
    tri = posed_vertices[template.faces[template.chart_faces]]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 1]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    if np.any(area <= area_eps):
        bad = int(template.chart_faces[np.argmin(area)])
        raise FrameError(f"degenerate triangle (face {bad}) while building local frames")
    e1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = e2 / np.linalg.norm(e2, axis=1, keepdims=True)
    e3 = np.cross(e1, e2)
    e3 = e3 / np.linalg.norm(e3, axis=1, keepdims=True)
    return np.stack([e1, e2, e3], axis=2)


def positional_map(posed_vertices, template, pose):
    """Root-normalized chart positions on the UV grid: ((3,H,W), (H,W) mask)."""
    t = chart_points(posed_vertices, template)
    normed = (t - pose.root_translation) @ pose.root_matrix()
    h, w = template.uv_resolution
    m = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)
    r, c = template.chart_pixels[:, 0], template.chart_pixels[:, 1]
    m[:, r, c] = normed.T
    mask[r, c] = True
    return m, mask


def posed_body(template, pose):
    """Convenience: pose and derive every per-frame quantity at once."""
    v = pose_body(template, pose)
    pm, mask = positional_map(v, template, pose)
    return PosedBody(
        vertices=v,
        points=chart_points(v, template),
        frames=local_frames(v, template),
        positional_map=pm,
        mask=mask,
        chart_pixels=template.chart_pixels,
        uv_resolution=template.uv_resolution,
    )


def vertex_normals(vertices, faces):
    """Area-weighted smooth vertex normals, unit length. (V,3)"""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])  # area-weighted
    vn = np.zeros_like(vertices)
    for c in range(3):
        np.add.at(vn, faces[:, c], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm < 1e-20, 1.0, norm)


# ---------------------------------------------------------------------------
# procedural body


@dataclass
class BodyConfig:
    uv_resolution: int = 32     # must be a multiple of 32
    segments: int = 16          # angular tube resolution
    rings_scale: float = 1.0    # multiplier on per-part ring counts
    radius_jitter: float = 0.08 # seeded per-part radius variation


# name, axis start, axis end, radius, base chart rect (r0, r1, c0, c1) on the
# 32x32 grid; rect pixel counts sum to 798 at the base resolution.
_PARTS = [
    ("torso", (0.0, 0.82, 0.0), (0.0, 1.48, 0.0), 0.130, (0, 19, 0, 15)),
    ("head", (0.0, 1.50, 0.0), (0.0, 1.74, 0.0), 0.085, (0, 12, 16, 21)),
    ("arm_l", (-0.16, 1.42, 0.0), (-0.74, 1.42, 0.0), 0.045, (0, 21, 22, 26)),
    ("arm_r", (0.16, 1.42, 0.0), (0.74, 1.42, 0.0), 0.045, (0, 21, 27, 31)),
    ("leg_l", (-0.10, 0.88, 0.0), (-0.10, 0.06, 0.0), 0.062, (22, 31, 0, 8)),
    ("leg_r", (0.10, 0.88, 0.0), (0.10, 0.06, 0.0), 0.062, (22, 31, 9, 17)),
]

_JOINTS = [
    ("pelvis", (0.0, 0.95, 0.0), -1),
    ("chest", (0.0, 1.25, 0.0), 0),
    ("head", (0.0, 1.50, 0.0), 1),
    ("shoulder_l", (-0.18, 1.42, 0.0), 1),
    ("elbow_l", (-0.46, 1.42, 0.0), 3),
    ("shoulder_r", (0.18, 1.42, 0.0), 1),
    ("elbow_r", (0.46, 1.42, 0.0), 5),
    ("hip_l", (-0.10, 0.90, 0.0), 0),
    ("knee_l", (-0.10, 0.48, 0.0), 7),
    ("hip_r", (0.10, 0.90, 0.0), 0),
    ("knee_r", (0.10, 0.48, 0.0), 9),
]


def _part_weights(name, t, j):
    """Skin weight rows for axial parameters t of one part. (len(t), J)"""
    w = np.zeros((len(t), j))
    if name == "torso":
        s = _smoothstep(0.25, 0.75, t)
        w[:, 0] = 1 - s
        w[:, 1] = s
    elif name == "head":
        s = _smoothstep(0.0, 0.35, t)
        w[:, 1] = 1 - s
        w[:, 2] = s
    elif name.startswith("arm"):
        sh, el = (3, 4) if name.endswith("l") else (5, 6)
        s1 = _smoothstep(0.0, 0.12, t)
        s2 = _smoothstep(0.44, 0.60, t)  # elbow sits near t = 0.52
        w[:, 1] = 1 - s1
        w[:, sh] = s1 * (1 - s2)
        w[:, el] = s1 * s2
    else:
        hip, knee = (7, 8) if name.endswith("l") else (9, 10)
        s1 = _smoothstep(0.0, 0.10, t)
        s2 = _smoothstep(0.41, 0.57, t)  # knee sits near t = 0.49
        w[:, 0] = 1 - s1
        w[:, hip] = s1 * (1 - s2)
        w[:, knee] = s1 * s2
    return w


def _tube_axes(p0, p1):
    axis = p1 - p0
    length = np.linalg.norm(axis)
    w = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, w)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    return u, v, length


def make_procedural_body(config=None, seed=0):
    """Deterministic capsule-limb humanoid with a full UV chart.

    The chart packs one rectangle per body part into the UV grid; at the
    default 32x32 resolution it covers exactly 798 pixels, and the rectangle
    layout scales with the resolution (which must be a multiple of 32).
    """
    config = config or BodyConfig()
    if config.segments < 3:
        raise BodyError("segments must be >= 3")
    if config.uv_resolution % 32 != 0 or config.uv_resolution < 32:
        raise BodyError("uv_resolution must be a positive multiple of 32")
    if config.rings_scale <= 0:
        raise BodyError("rings_scale must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([1201, int(seed)])))

    joints = np.array([p for _, p, _ in _JOINTS])
    parent = np.array([p for _, _, p in _JOINTS], dtype=np.int64)
    names = [n for n, _, _ in _JOINTS]
    j = len(joints)
    s = config.segments

    verts, faces, weights = [], [], []
    chart_px, chart_face, chart_bary = [], [], []
    scale = config.uv_resolution // 32
    vbase = 0
    fbase = 0
    for name, p0, p1, radius, rect in _PARTS:
        p0 = np.array(p0)
        p1 = np.array(p1)
        u, v, length = _tube_axes(p0, p1)
        radius = radius * (1.0 + config.radius_jitter * (rng.uniform() - 0.5))
        rings = max(3, int(round(length * 14 * config.rings_scale)) + 1)

        t = np.linspace(0.0, 1.0, rings)
        theta = 2 * np.pi * np.arange(s) / s
        circ = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)  # (s,3)
        centers = p0[None] + t[:, None] * (p1 - p0)[None]
        pv = (centers[:, None, :] + radius * circ[None, :, :]).reshape(-1, 3)
        verts.append(pv)
        weights.append(np.repeat(_part_weights(name, t, j), s, axis=0))

        # quad (i, k): ring i, segment k (wrapping); two triangles each,
        # wound so normals face outward
        fi = []
        for i in range(rings - 1):
            for k in range(s):
                a = vbase + i * s + k
                b = vbase + i * s + (k + 1) % s
                c = vbase + (i + 1) * s + (k + 1) % s
                d = vbase + (i + 1) * s + k
                fi.append((a, b, c))
                fi.append((a, c, d))
        faces.append(np.array(fi, dtype=np.int64))

        r0, r1, c0, c1 = rect
        r0, r1 = r0 * scale, (r1 + 1) * scale - 1
        c0, c1 = c0 * scale, (c1 + 1) * scale - 1
        nrows, ncols = r1 - r0 + 1, c1 - c0 + 1
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        ta = (rr - r0 + 0.5) / nrows * (rings - 1)   # axial grid coordinate
        an = (cc - c0 + 0.5) / ncols * s             # angular grid coordinate
        qy, qx = np.floor(ta).astype(np.int64), np.floor(an).astype(np.int64)
        fy, fx = ta - qy, an - qx
        lower = fx >= fy  # triangle (a,b,c), else (a,c,d)
        fidx = fbase + (qy * s + qx) * 2 + (~lower).astype(np.int64)
        alpha = np.where(lower, 1.0 - fx, 1.0 - fy)
        beta = np.where(lower, fx - fy, fx)
        gamma = 1.0 - alpha - beta
        chart_px.append(np.stack([rr, cc], axis=1))
        chart_face.append(fidx)
        chart_bary.append(np.stack([alpha, beta, gamma], axis=1))

        vbase += rings * s
        fbase += (rings - 1) * s * 2

    raw_w = np.vstack(weights)
    template = BodyTemplate(
        vertices=np.vstack(verts),
        faces=np.vstack(faces),
        joints=joints,
        parent=parent,
        skin_weights=raw_w / raw_w.sum(axis=1, keepdims=True),
        chart_pixels=np.vstack(chart_px).astype(np.int64),
        chart_faces=np.concatenate(chart_face),
        chart_bary=np.vstack(chart_bary),
        uv_resolution=(config.uv_resolution, config.uv_resolution),
        joint_names=names,
    )
    return template.validate()


# ---------------------------------------------------------------------------
# file formats


def save_template(template, path):
    """JSON document with arrays externalized to a sibling .blob file."""
    import json
    from pathlib import Path

    path = Path(path)
    blob_name = path.stem + ".blob"
    arrays = {
        "vertices": template.vertices,
        "faces": template.faces,
        "joints": template.joints,
        "parent": template.parent,
        "skin_weights": template.skin_weights,
        "chart_pixels": template.chart_pixels,
        "chart_faces": template.chart_faces,
        "chart_bary": template.chart_bary,
    }
    blockio.write_blocks(path.parent / blob_name, blockio.BLOB_MAGIC,
                         {"kind": "body-template"}, {"arrays": arrays})
    doc = {
        "kind": "body-template",
        "uv_resolution": list(template.uv_resolution),
        "joint_names": template.joint_names,
        "blob": blob_name,
        "arrays": sorted(arrays.keys()),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_template(path):
    import json
    from pathlib import Path

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("kind") != "body-template":
        raise BodyError(f"{path}: not a body template document")
    _, _, sections = blockio.read_blocks(path.parent / doc["blob"], blockio.BLOB_MAGIC)
    a = sections["arrays"]
    template = BodyTemplate(
        vertices=a["vertices"],
        faces=a["faces"],
        joints=a["joints"],
        parent=a["parent"],
        skin_weights=a["skin_weights"],
        chart_pixels=a["chart_pixels"],
        chart_faces=a["chart_faces"],
        chart_bary=a["chart_bary"],
        uv_resolution=tuple(doc["uv_resolution"]),
        joint_names=list(doc.get("joint_names", [])),
    )
    return template.validate()


def save_poses(poses, path):
    """One line per frame: J*4 joint quaternions, 4 root quaternion, 3 root translation."""
    lines = [f"# alec-pose joints={len(poses[0].joint_rotations)}"]
    for p in poses:
        q = np.asarray(p.joint_rotations, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 4:
            raise BodyError("save_poses expects quaternion joint rotations")
        flat = np.concatenate([q.ravel(), np.asarray(p.root_rotation, dtype=np.float64).ravel(),
                               np.asarray(p.root_translation, dtype=np.float64).ravel()])
        lines.append(" ".join(repr(float(x)) for x in flat))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_poses(path):
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("# alec-pose"):
        raise BodyError(f"{path}: missing pose header")
    j = int(lines[0].split("joints=")[1])
    poses = []
    for ln in lines[1:]:
        vals = np.array([float(x) for x in ln.split()])
        if len(vals) != j * 4 + 7:
            raise BodyError(f"{path}: frame has {len(vals)} values, expected {j * 4 + 7}")
        poses.append(Pose(vals[: j * 4].reshape(j, 4), vals[j * 4 : j * 4 + 4], vals[j * 4 + 4 :]))
    return poses
