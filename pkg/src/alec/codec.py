"""The surface codec: UNet pose encoder + shared patch decoder + articulation.

A posed body contributes a root-normalized positional map; the UNet turns it
into a per-pixel feature z_k. For every chart point k and every local grid
coordinate p on the unit square, a shared MLP maps (u_k, p, z_k) to a
residual (plus optional unit normal and color). Residuals live in the local
frame T_k of patch k and are carried to world space as x = T_k r + t_k.

Decoder layout: 8 layers, the input re-concatenated at layer 4, trunk
through layer 6, then three two-layer heads. Batch normalization + softplus
everywhere in the decoder except each head's final layer; the normal head is
unit-normalized and the color head sigmoid-squashed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor


class CodecError(ValueError):
    pass


class ModelNotTrainedError(RuntimeError):
    pass


@dataclass
class CodecConfig:
    num_patches: int = 798
    samples_per_patch: int = 16
    feature_dim: int = 64
    hidden_dim: int = 256
    unet_channels: tuple = (32, 64, 128, 128, 128)
    uv_resolution: tuple = (32, 32)
    use_articulation: bool = True
    use_u_k: bool = True
    predict_normals: bool = True
    predict_colors: bool = True
    precision: str = "float64"

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def decoder_in_dim(self):
        return (2 if self.use_u_k else 0) + 2 + self.feature_dim

    def to_dict(self):
        d = self.__dict__.copy()
        d["unet_channels"] = list(self.unet_channels)
        d["uv_resolution"] = list(self.uv_resolution)
        return d

    @staticmethod
    def from_dict(d):
        cfg = CodecConfig(**d)
        cfg.unet_channels = tuple(cfg.unet_channels)
        cfg.uv_resolution = tuple(cfg.uv_resolution)
        return cfg


@dataclass
class PredictedCloud:
    points: np.ndarray            # (n,3) world positions
    normals: np.ndarray | None    # (n,3) unit, absent if head disabled
    colors: np.ndarray | None     # (n,3) in [0,1], absent if head disabled
    residuals: np.ndarray         # (n,3) local-frame offsets
    patch_ids: np.ndarray         # (n,) chart index per point

    def __len__(self):
        return len(self.points)


def sample_local_grid(m):
    """Evenly spaced points on the unit square: a sqrt(m) x sqrt(m) lattice
    including the endpoints; m = 1 gives the single center point. (m,2)"""
    if m < 1:
        raise CodecError("samples per patch must be >= 1")
    if m == 1:
        return np.array([[0.5, 0.5]])
    side = int(round(np.sqrt(m)))
    if side * side != m:
        raise CodecError(f"grid sampling needs a perfect square, got M={m}")
    ticks = np.linspace(0.0, 1.0, side)
    p, q = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([p.ravel(), q.ravel()], axis=1)


def articulate(r, n_local, frames, points, use_articulation=True):
    """Carry local-frame residuals to world space: x = T_k r + t_k.

    r, n_local: Tensors or arrays (n,3); frames (n,3,3), points (n,3) plain
    arrays. With articulation disabled, x = r + t_k and the normal is only
    re-normalized. Returns (x, n_world) (n_world None when n_local is None).
    """
    r = r if isinstance(r, Tensor) else Tensor(r)
    frames = np.asarray(frames, dtype=r.dtype)
    points = np.asarray(points, dtype=r.dtype)
    if use_articulation:
        x = T.rotate_rows(r, frames) + Tensor(points, dtype=r.dtype)
    else:
        x = r + Tensor(points, dtype=r.dtype)
    n_world = None
    if n_local is not None:
        n_local = n_local if isinstance(n_local, Tensor) else Tensor(n_local)
        n_world = T.rotate_rows(n_local, frames) if use_articulation else n_local
        n_world = T.normalize_rows(n_world)
    return x, n_world


class SurfaceCodec:
    """All learnable state plus the forward paths.

    Parameters live in an ordered {name: Tensor} dict; batch-norm layers
    keep their running statistics alongside. `trained` is flipped by the
    training loop and stored in checkpoints.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or CodecConfig()
        self.params = {}
        self.bn = {}
        self.trained = False
        self._grid = sample_local_grid(self.config.samples_per_patch)
        rng = T.seed_stream(seed, "init")
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _add_bn(self, name, channels):
        st = BatchNormState(channels, self.config.dtype)
        self.bn[name] = st
        self.params[f"{name}.g"] = st.gamma
        self.params[f"{name}.b"] = st.beta

    def _add_conv(self, rng, name, c_in, c_out, k=4, bn=True):
        dt = self.config.dtype
        self.params[f"{name}.w"] = T.he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dt)
        if bn:
            self._add_bn(f"{name}.bn", c_out)

    def _add_convt(self, rng, name, c_in, c_out, k=4, bn=True):
        dt = self.config.dtype
        self.params[f"{name}.w"] = T.he_uniform(rng, (c_in, c_out, k, k), c_in * k * k, dt)
        if bn:
            self._add_bn(f"{name}.bn", c_out)

    def _add_linear(self, rng, name, d_in, d_out, bn=True):
        # layers followed by batch norm skip the bias (the BN shift covers it)
        dt = self.config.dtype
        self.params[f"{name}.w"] = T.he_uniform(rng, (d_in, d_out), d_in, dt)
        if bn:
            self._add_bn(f"{name}.bn", d_out)
        else:
            self.params[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=dt), requires_grad=True)

    def _build(self, rng):
        cfg = self.config
        ch = cfg.unet_channels
        if len(ch) != 5:
            raise CodecError("unet_channels must list the five encoder widths")
        c_in = 3
        for i, c in enumerate(ch, 1):
            self._add_conv(rng, f"enc.d{i}", c_in, c)
            c_in = c
        # up path mirrors the encoder; skip concatenations double the input
        # channels; the last block emits the feature map without batch norm
        up_out = (ch[3], ch[2], ch[1], ch[0], cfg.feature_dim)
        skips = (ch[3], ch[2], ch[1], ch[0], 0)
        c_in = ch[4]
        for i, (c, s) in enumerate(zip(up_out, skips), 1):
            self._add_convt(rng, f"enc.u{i}", c_in, c, bn=(i < 5))
            c_in = c + s
        d_in, h = cfg.decoder_in_dim, cfg.hidden_dim
        self._add_linear(rng, "dec.l1", d_in, h)
        self._add_linear(rng, "dec.l2", h, h)
        self._add_linear(rng, "dec.l3", h, h)
        # layer 4 sees the trunk plus the re-injected input (a skip weight
        # block instead of a materialized concat)
        self._add_linear(rng, "dec.l4", h, h)
        self.params["dec.l4.s"] = T.he_uniform(rng, (d_in, h), h + d_in, cfg.dtype)
        self._add_linear(rng, "dec.l5", h, h)
        self._add_linear(rng, "dec.l6", h, h)
        heads = ["res"]
        if cfg.predict_normals:
            heads.append("nrm")
        if cfg.predict_colors:
            heads.append("col")
        for head in heads:
            self._add_linear(rng, f"dec.{head}.l7", h, h)
            self._add_linear(rng, f"dec.{head}.l8", h, 3, bn=False)

    # -- persistence helpers -------------------------------------------------

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def stat_arrays(self):
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.mean"] = st.running_mean
            out[f"{name}.var"] = st.running_var
        return out

    def _rebind_bn(self):
        for name, st in self.bn.items():
            st.gamma = self.params[f"{name}.g"]
            st.beta = self.params[f"{name}.b"]

    def load_state(self, params, stats):
        if set(params) != set(self.params):
            missing = set(self.params) ^ set(params)
            raise CodecError(f"checkpoint parameter set mismatch: {sorted(missing)[:4]}...")
        for name, arr in params.items():
            if arr.shape != self.params[name].data.shape:
                raise CodecError(f"parameter '{name}' shape mismatch")
            self.params[name] = Tensor(arr.astype(self.config.dtype), requires_grad=True)
        for name, st in self.bn.items():
            st.running_mean = stats[f"{name}.mean"].astype(self.config.dtype)
            st.running_var = stats[f"{name}.var"].astype(self.config.dtype)
        self._rebind_bn()

    def zero_residual_clone(self):
        """Copy whose head outputs are identically zero: points sit on the
        body, normals fall back to the patch normal e3. Baseline for evals."""
        clone = SurfaceCodec(self.config, seed=0)
        clone.load_state({n: p.data.copy() for n, p in self.params.items()}, self.stat_arrays())
        for head in ("res", "nrm", "col"):
            for suffix in (".l8.w", ".l8.b"):
                name = f"dec.{head}{suffix}"
                if name in clone.params:
                    clone.params[name] = Tensor(np.zeros_like(clone.params[name].data), requires_grad=True)
        clone.trained = True
        return clone

    # -- forward pieces ------------------------------------------------------

    def _bn(self, x, name, mode):
        return T.batch_norm(x, self.bn[name], training=(mode == "train"))

    def encode(self, pmap, mask, mode="eval"):
        """Positional map(s) -> per-pixel features. Accepts (3,H,W) or a
        (B,3,H,W) batch; invalid pixels are zero-filled via the mask."""
        cfg = self.config
        arr = pmap.data if isinstance(pmap, Tensor) else np.asarray(pmap)
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
            mask = np.asarray(mask)[None]
        if arr.shape[2:] != tuple(cfg.uv_resolution):
            raise CodecError(f"positional map {arr.shape[2:]} != model resolution {cfg.uv_resolution}")
        x = Tensor((arr * np.asarray(mask)[:, None, :, :]).astype(cfg.dtype))

        downs = []
        for i in range(1, 6):
            x = T.conv2d(x, self.params[f"enc.d{i}.w"], stride=2, padding=1)
            x = self._bn(x, f"enc.d{i}.bn", mode)
            x = T.leaky_relu(x, 0.2)
            downs.append(x)
        for i in range(1, 6):
            x = T.relu(x)
            x = T.conv_transpose2d(x, self.params[f"enc.u{i}.w"], stride=2, padding=1)
            if i < 5:
                x = self._bn(x, f"enc.u{i}.bn", mode)
                x = T.concat([x, downs[4 - i]], axis=1)
        return T.reshape(x, x.shape[1:]) if squeeze else x

    def _decode_rows(self, rows, mode):
        """rows: (n, decoder_in_dim) Tensor -> (residual, normal|None, color|None)."""
        train = mode == "train"
        x = rows
        for i in (1, 2, 3):
            x = T.linear_bn_softplus(x, self.params[f"dec.l{i}.w"], self.bn[f"dec.l{i}.bn"], train)
        x = T.linear_bn_softplus(x, self.params["dec.l4.w"], self.bn["dec.l4.bn"], train,
                                 x2=rows, w2=self.params["dec.l4.s"])
        for i in (5, 6):
            x = T.linear_bn_softplus(x, self.params[f"dec.l{i}.w"], self.bn[f"dec.l{i}.bn"], train)

        def head(tag):
            h = T.linear_bn_softplus(x, self.params[f"dec.{tag}.l7.w"], self.bn[f"dec.{tag}.l7.bn"], train)
            return T.affine(h, self.params[f"dec.{tag}.l8.w"], self.params[f"dec.{tag}.l8.b"])

        r = head("res")
        n = T.normalize_rows(head("nrm")) if self.config.predict_normals else None
        c = T.sigmoid(head("col")) if self.config.predict_colors else None
        return r, n, c

    def decode(self, u_k, p, z_k, mode="eval"):
        """Single-point-set decode per the shared-MLP contract.

        u_k (n,2) in [0,1]^2 (ignored when use_u_k is off), p (n,2), z_k
        (n,feature_dim). Returns (residual, normal|None, color|None) Tensors.
        """
        z_k = z_k if isinstance(z_k, Tensor) else Tensor(np.asarray(z_k, dtype=self.config.dtype))
        if z_k.shape[1] != self.config.feature_dim:
            raise CodecError(f"feature rows must have length {self.config.feature_dim}")
        cols = []
        if self.config.use_u_k:
            cols.append(Tensor(np.asarray(u_k, dtype=self.config.dtype)))
        cols.append(Tensor(np.asarray(p, dtype=self.config.dtype)))
        cols.append(z_k)
        return self._decode_rows(T.concat(cols, axis=1), mode)

    def _chart_uv(self, pb):
        h, w = pb.uv_resolution
        px = pb.chart_pixels.astype(np.float64)
        return np.stack([(px[:, 1] + 0.5) / w, (px[:, 0] + 0.5) / h], axis=1)

    def _forward_tensors(self, bodies, mode, grids=None):
        """Batched decode of several posed bodies on one tape.

        grids: optional per-body list of (rows (n_i,2) local coords, patch
        index per row); defaults to the model's M-point grid on every patch.
        Returns (x, n, c, r Tensors stacked over bodies, per-body row counts,
        patch ids).
        """
        cfg = self.config
        k, m = cfg.num_patches, cfg.samples_per_patch
        for pb in bodies:
            if len(pb.points) != k:
                raise CodecError(f"body chart has {len(pb.points)} points, model expects {k}")
        maps = np.stack([pb.positional_map for pb in bodies])
        masks = np.stack([pb.mask for pb in bodies])
        feats = self.encode(maps, masks, mode)              # (B, Z, H, W)
        h, w = cfg.uv_resolution
        flat = T.reshape(feats, (len(bodies), cfg.feature_dim, h * w))
        pix = bodies[0].chart_pixels
        zk = T.gather(flat, (slice(None), slice(None), pix[:, 0] * w + pix[:, 1]))
        zk = T.reshape(T.transpose(zk, (0, 2, 1)), (len(bodies) * k, cfg.feature_dim))

        uv = self._chart_uv(bodies[0])
        if grids is None:
            per_body = [(np.tile(self._grid, (k, 1)), np.repeat(np.arange(k), m))] * len(bodies)
        else:
            per_body = grids
        rows_p, rows_patch, rows_z, counts = [], [], [], []
        for b, (pcoords, pid) in enumerate(per_body):
            rows_p.append(pcoords)
            rows_patch.append(pid)
            rows_z.append(b * k + pid)
            counts.append(len(pid))
        p_all = np.vstack(rows_p).astype(cfg.dtype)
        patch_all = np.concatenate(rows_patch)
        if grids is None:
            z_rows = T.repeat_rows(zk, m)  # default grid: every patch gets M rows
        else:
            z_rows = T.gather(zk, np.concatenate(rows_z))

        cols = []
        if cfg.use_u_k:
            cols.append(Tensor(uv[patch_all].astype(cfg.dtype)))
        cols.append(Tensor(p_all))
        cols.append(z_rows)
        r, n_local, c = self._decode_rows(T.concat(cols, axis=1), mode)

        frames = np.concatenate([pb.frames[pid] for pb, (_, pid) in zip(bodies, per_body)])
        points = np.concatenate([pb.points[pid] for pb, (_, pid) in zip(bodies, per_body)])
        x, n = articulate(r, n_local, frames, points, cfg.use_articulation)
        return x, n, c, r, counts, patch_all

    def forward(self, pb, mode="eval"):
        """Full prediction for one posed body: K*M points. Returns a
        PredictedCloud of plain arrays (deterministic in eval mode)."""
        x, n, c, r, counts, patch = self._forward_tensors([pb], mode)
        return PredictedCloud(
            points=x.data.astype(np.float64),
            normals=None if n is None else n.data.astype(np.float64),
            colors=None if c is None else c.data.astype(np.float64),
            residuals=r.data.astype(np.float64),
            patch_ids=patch,
        )

    # -- adaptive sampling ---------------------------------------------------

    def patch_areas(self, pb):
        """Approximate per-patch area by triangulating the default M-grid
        prediction: 2*(sqrt(M)-1)^2 triangles per patch. (K,)"""
        m = self.config.samples_per_patch
        side = int(round(np.sqrt(m)))
        if side < 2:
            raise CodecError("patch areas need at least a 2x2 local grid")
        cloud = self.forward(pb, mode="eval")
        pts = cloud.points.reshape(self.config.num_patches, side, side, 3)
        a = pts[:, :-1, :-1]
        b = pts[:, :-1, 1:]
        c = pts[:, 1:, :-1]
        d = pts[:, 1:, 1:]
        t1 = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)
        t2 = 0.5 * np.linalg.norm(np.cross(b - d, c - d), axis=-1)
        return (t1 + t2).sum(axis=(1, 2))

    def adaptive_sample(self, pb, density):
        """Density-proportional resampling: patch k gets n_k = max(1,
        round(density * area_k)) points from a stratified lattice."""
        if not self.trained:
            raise ModelNotTrainedError("adaptive_sample needs a trained model (see pipeline.train)")
        if density <= 0:
            raise CodecError("density must be positive (points per square meter)")
        areas = self.patch_areas(pb)
        n_k = np.maximum(1, np.floor(density * areas + 0.5).astype(np.int64))
        coords, pids = [], []
        for k, n in enumerate(n_k):
            side = int(np.ceil(np.sqrt(n)))
            ticks = (np.arange(side) + 0.5) / side
            p, q = np.meshgrid(ticks, ticks, indexing="ij")
            lattice = np.stack([p.ravel(), q.ravel()], axis=1)[: int(n)]
            coords.append(lattice)
            pids.append(np.full(int(n), k, dtype=np.int64))
        grid = (np.vstack(coords), np.concatenate(pids))
        x, n, c, r, counts, patch = self._forward_tensors([pb], "eval", grids=[grid])
        return PredictedCloud(
            points=x.data.astype(np.float64),
            normals=None if n is None else n.data.astype(np.float64),
            colors=None if c is None else c.data.astype(np.float64),
            residuals=r.data.astype(np.float64),
            patch_ids=patch,
        )
