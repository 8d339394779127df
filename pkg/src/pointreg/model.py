"""The registration network.

Pipeline for one (source, target) pair, both sets normalized into the unit
box: a per-grid-point MLP turns each set into a descriptor tensor over a
fixed reference grid, descriptors correlate all-to-all into a correlation
tensor, and a small CNN plus two fully connected layers regress control-point
displacements for a thin-plate-spline warp of the source. The final layer
starts at zero, so an untrained model is the identity warp.

Descriptor computation sorts the input points canonically first. Max-pooling
makes the result mathematically order-free; the sort makes it bitwise
order-free, which the determinism guarantees elsewhere rely on.

Training throughput note: all per-pair MLP rows of a batch are pushed
through one stacked matrix product with per-pair batch-norm groups, which is
considerably faster than looping pairs on one core.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import autodiff as ad
from . import tps


class CorruptCheckpointError(RuntimeError):
    """Raised when a checkpoint fails structural or checksum validation."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PrNetConfig:
    """Architecture hyperparameters; defaults follow the 2D reference setup."""

    dim: int = 2
    grid_shape: tuple = (11, 11)
    mlp_widths: tuple = (16, 32, 64, 128)
    conv_channels: tuple = (128, 256, 512)
    conv_kernels: tuple = (3, 4, 5)
    fc_hidden: int = 64
    leaky_slope: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"PrNetConfig: dim must be 2 or 3, got {self.dim}")
        if len(self.grid_shape) != self.dim or any(r < 2 for r in self.grid_shape):
            raise ValueError(f"PrNetConfig: grid_shape {self.grid_shape} invalid for dim {self.dim}")
        if len(self.conv_kernels) != len(self.conv_channels):
            raise ValueError("PrNetConfig: conv_kernels and conv_channels lengths differ")
        self.spatial_trace()  # validates the kernel chain fits the grid

    @staticmethod
    def for_dim(dim: int) -> "PrNetConfig":
        if dim == 3:
            return PrNetConfig(
                dim=3, grid_shape=(5, 5, 5), conv_kernels=(3, 2, 2), fc_hidden=512
            )
        return PrNetConfig()

    @property
    def grid_count(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def theta_count(self) -> int:
        return 3**self.dim

    @property
    def output_size(self) -> int:
        return self.theta_count * self.dim

    def spatial_trace(self) -> list:
        """Spatial extents after each conv layer, validating the chain."""
        extents = list(self.grid_shape)
        trace = [tuple(extents)]
        for k in self.conv_kernels:
            extents = [e - k + 1 for e in extents]
            if any(e < 1 for e in extents):
                raise ValueError(
                    f"PrNetConfig: kernel chain {self.conv_kernels} does not fit grid {self.grid_shape}"
                )
            trace.append(tuple(extents))
        return trace

    def flat_features(self) -> int:
        return self.conv_channels[-1] * int(np.prod(self.spatial_trace()[-1]))

    def np_dtype(self):
        return np.dtype(self.dtype)


# ---------------------------------------------------------------------------
# reference grid


@dataclass(frozen=True)
class ReferenceGrid:
    dim: int
    shape: tuple
    points: np.ndarray

    @property
    def count(self) -> int:
        return self.points.shape[0]


def build_reference_grid(dim: int, shape) -> ReferenceGrid:
    """Uniform lattice over [-1, 1]^dim, row-major point order."""
    shape = tuple(int(s) for s in shape)
    if dim not in (2, 3) or len(shape) != dim:
        raise ValueError(f"build_reference_grid: shape {shape} invalid for dim {dim}")
    if any(s < 2 for s in shape):
        raise ValueError(f"build_reference_grid: every resolution must be >= 2, got {shape}")
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    pts = np.array(list(product(*axes)), dtype=np.float64)
    return ReferenceGrid(dim=dim, shape=shape, points=pts)


# ---------------------------------------------------------------------------
# weights


@dataclass
class _Layer:
    weight: ad.Tensor
    bias: ad.Tensor
    bn_scale: ad.Tensor = None
    bn_shift: ad.Tensor = None
    bn_state: ad.BatchNormState = None


@dataclass
class PrNetWeights:
    config: PrNetConfig
    mlp: list = field(default_factory=list)
    convs: list = field(default_factory=list)
    fc1: _Layer = None
    out: _Layer = None

    def params(self) -> list:
        """Trainable tensors in a fixed, documented order."""
        ps = []
        for layer in [*self.mlp, *self.convs, self.fc1]:
            ps.extend([layer.weight, layer.bias, layer.bn_scale, layer.bn_shift])
        ps.extend([self.out.weight, self.out.bias])
        return ps

    def named_arrays(self) -> dict:
        """Every persistent array (parameters and running stats) by name."""
        out = {}

        def put(prefix, layer, with_bn=True):
            out[f"{prefix}.weight"] = layer.weight.data
            out[f"{prefix}.bias"] = layer.bias.data
            if with_bn:
                out[f"{prefix}.bn_scale"] = layer.bn_scale.data
                out[f"{prefix}.bn_shift"] = layer.bn_shift.data
                out[f"{prefix}.bn_mean"] = layer.bn_state.running_mean
                out[f"{prefix}.bn_var"] = layer.bn_state.running_var

        for i, layer in enumerate(self.mlp):
            put(f"mlp{i}", layer)
        for i, layer in enumerate(self.convs):
            put(f"conv{i}", layer)
        put("fc1", self.fc1)
        put("out", self.out, with_bn=False)
        return out


def _uniform_init(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _bn_layer(features, dtype):
    return (
        ad.Tensor(np.ones(features, dtype=dtype), requires_grad=True),
        ad.Tensor(np.zeros(features, dtype=dtype), requires_grad=True),
        ad.init_batch_norm(features, dtype),
    )


def init_weights(config: PrNetConfig, seed: int) -> PrNetWeights:
    """Fan-in-scaled uniform init everywhere; the output layer starts at zero."""
    dt = config.np_dtype()
    weights = PrNetWeights(config=config)
    stream = 0

    def layer_rng():
        nonlocal stream
        stream += 1
        return np.random.default_rng([int(seed), stream])

    in_w = 2 * config.dim
    for width in config.mlp_widths:
        rng = layer_rng()
        w = ad.Tensor(_uniform_init(rng, (in_w, width), in_w, dt), requires_grad=True)
        b = ad.Tensor(np.zeros(width, dtype=dt), requires_grad=True)
        sc, sh, st = _bn_layer(width, dt)
        weights.mlp.append(_Layer(w, b, sc, sh, st))
        in_w = width

    in_c = config.grid_count
    for ch, k in zip(config.conv_channels, config.conv_kernels):
        rng = layer_rng()
        kshape = (ch, in_c) + (k,) * config.dim
        fan_in = in_c * k**config.dim
        kern = ad.Tensor(_uniform_init(rng, kshape, fan_in, dt), requires_grad=True)
        b = ad.Tensor(np.zeros(ch, dtype=dt), requires_grad=True)
        sc, sh, st = _bn_layer(ch, dt)
        weights.convs.append(_Layer(kern, b, sc, sh, st))
        in_c = ch

    flat = config.flat_features()
    rng = layer_rng()
    w1 = ad.Tensor(_uniform_init(rng, (flat, config.fc_hidden), flat, dt), requires_grad=True)
    b1 = ad.Tensor(np.zeros(config.fc_hidden, dtype=dt), requires_grad=True)
    sc, sh, st = _bn_layer(config.fc_hidden, dt)
    weights.fc1 = _Layer(w1, b1, sc, sh, st)

    w2 = ad.Tensor(np.zeros((config.fc_hidden, config.output_size), dtype=dt), requires_grad=True)
    b2 = ad.Tensor(np.zeros(config.output_size, dtype=dt), requires_grad=True)
    weights.out = _Layer(w2, b2)
    return weights


# ---------------------------------------------------------------------------
# normalization into the unit box


@dataclass(frozen=True)
class Normalizer:
    """Similarity transform: subtract the center, then scale uniformly."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def fit_normalizer(points, extent: float = 0.9) -> Normalizer:
    """Transform putting the centroid at the origin and the largest
    coordinate magnitude at ``extent``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError(f"fit_normalizer: need a nonempty [N, dim] set, got {pts.shape}")
    center = pts.mean(axis=0)
    spread = np.abs(pts - center).max()
    scale = extent / spread if spread > 0 else 1.0
    return Normalizer(center=center, scale=float(scale))


# ---------------------------------------------------------------------------
# descriptor and correlation tensors


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Points sorted lexicographically by coordinates.

    Descriptors are computed on this ordering, so any permutation of the
    input yields bitwise-identical results.
    """
    pts = np.asarray(points)
    return pts[np.lexsort(pts.T[::-1])]


def _descriptor_rows(point_sets, grid: ReferenceGrid, dtype) -> np.ndarray:
    """Stacked MLP input rows [grid_point, set_point] for each set in order."""
    g = grid.points.astype(dtype)
    k_counts = [p.shape[0] for p in point_sets]
    blocks = []
    left = None
    for pts, k in zip(point_sets, k_counts):
        if left is None or left.shape[0] != grid.count * k:
            left = np.repeat(g, k, axis=0)
        right = np.tile(np.asarray(pts, dtype=dtype), (grid.count, 1))
        blocks.append(np.concatenate([left, right], axis=1))
    return np.concatenate(blocks, axis=0) if len(blocks) > 1 else blocks[0]


def _mlp_chain(rows: np.ndarray, weights: PrNetWeights, train: bool) -> ad.Tensor:
    cfg = weights.config
    h = rows
    for layer in weights.mlp:
        h = ad.dense_bn_act(
            h, layer.weight, layer.bias, layer.bn_scale, layer.bn_shift,
            layer.bn_state, train, cfg.leaky_slope,
        )
    return h


def _descriptor_block(ordered_sets, grid: ReferenceGrid, weights: PrNetWeights, train: bool) -> ad.Tensor:
    """Descriptors for pre-sorted sets, stacked as [(num_sets * G), d].

    All sets share a single MLP pass (and in train mode a single set of
    batch statistics); pooling happens per set afterwards. Runs of sets with
    equal point counts pool together in one reshape.
    """
    g = grid.count
    rows = _descriptor_rows(ordered_sets, grid, weights.config.np_dtype())
    h = _mlp_chain(rows, weights, train)
    counts = [s.shape[0] for s in ordered_sets]
    parts = []
    offset = 0
    i = 0
    while i < len(counts):
        j = i
        while j < len(counts) and counts[j] == counts[i]:
            j += 1
        n_rows = (j - i) * g * counts[i]
        segment = h if n_rows == h.data.shape[0] else ad.row_slice(h, offset, offset + n_rows)
        parts.append(ad.max_pool_rows(segment, counts[i]))
        offset += n_rows
        i = j
    pooled = parts[0] if len(parts) == 1 else ad.concat_rows(parts)
    return ad.l2_normalize_rows(pooled)


def _folded_mlp(weights: PrNetWeights) -> list:
    """Per-layer (weight, bias) with the eval-mode batch norm folded in."""
    dt = weights.config.np_dtype()
    layers = []
    for layer in weights.mlp:
        st = layer.bn_state
        inv = 1.0 / np.sqrt(st.running_var.astype(dt) + st.eps)
        alpha = layer.bn_scale.data * inv
        wf = np.ascontiguousarray(layer.weight.data * alpha)
        bf = (layer.bias.data - st.running_mean.astype(dt)) * alpha + layer.bn_shift.data
        layers.append((wf, bf))
    return layers


def _sdt_eval(ordered_sets, grid: ReferenceGrid, weights: PrNetWeights) -> np.ndarray:
    """Descriptors for pre-sorted sets without graph bookkeeping.

    Inference twin of ``_descriptor_block``: one set at a time so the
    intermediates stay cache-sized, batch norm folded into the weights, and
    all scratch recycled. Differences from the graph path are float rounding
    only.
    """
    cfg = weights.config
    dt = cfg.np_dtype()
    slope = cfg.leaky_slope
    gpts = grid.points.astype(dt)
    g, dim = gpts.shape
    layers = _folded_mlp(weights)
    widths = [wf.shape[1] for wf, _ in layers]
    out = np.empty((len(ordered_sets) * g, widths[-1]), dtype=dt)
    cap = g * max(p.shape[0] for p in ordered_sets)
    buf_in = ad._scratch.take((cap, 2 * dim), dt)
    bufs = [ad._scratch.take((cap, wd), dt) for wd in widths]
    lows = [ad._scratch.take((cap, wd), dt) for wd in widths]
    for si, pts in enumerate(ordered_sets):
        k = pts.shape[0]
        rows = g * k
        rin = buf_in[:rows]
        rv = rin.reshape(g, k, 2 * dim)
        rv[:, :, :dim] = gpts[:, None, :]
        rv[:, :, dim:] = np.asarray(pts, dtype=dt)
        h = rin
        for (wf, bf), buf, low in zip(layers, bufs, lows):
            z = np.matmul(h, wf, out=buf[:rows])
            z += bf
            np.multiply(z, slope, out=low[:rows])
            np.maximum(z, low[:rows], out=z)
            h = z
        np.max(h.reshape(g, k, widths[-1]), axis=1, out=out[si * g:(si + 1) * g])
    for b in [buf_in] + bufs + lows:
        ad._scratch.give(b)
    norms = np.sqrt(np.einsum("nd,nd->n", out, out))[:, None]
    np.maximum(norms, 1e-12, out=norms)
    out /= norms
    return out


def compute_sdt(points, grid: ReferenceGrid, weights: PrNetWeights, train: bool = False) -> ad.Tensor:
    """Shape descriptor tensor: one unit-norm feature row per grid point.

    Eval mode returns a constant tensor (no gradients flow back to the
    weights); train mode participates in the graph.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != grid.dim:
        raise ValueError(f"compute_sdt: points {pts.shape} do not match grid dim {grid.dim}")
    if pts.shape[0] == 0:
        raise ValueError("compute_sdt: empty point set")
    if train:
        return _descriptor_block([canonical_order(pts)], grid, weights, train)
    return ad.Tensor(_sdt_eval([canonical_order(pts)], grid, weights))


def compute_correlation(f_s: ad.Tensor, f_g: ad.Tensor, normalize: bool = True) -> ad.Tensor:
    """All-to-all inner products of descriptor rows.

    Row i holds the response of source grid point i against every target
    grid point. With ``normalize`` each row is scaled to unit norm, the form
    consumed by the prediction head.
    """
    if f_s.data.shape[1] != f_g.data.shape[1]:
        raise ValueError(
            f"compute_correlation: feature dims differ, {f_s.data.shape} vs {f_g.data.shape}"
        )
    c = ad.matmul(f_s, f_g, transpose_b=True)
    return ad.l2_normalize_rows(c) if normalize else c


# ---------------------------------------------------------------------------
# prediction head


def _conv_stack(c: ad.Tensor, weights: PrNetWeights, train: bool) -> ad.Tensor:
    """Correlation [G_s, t] -> conv features, flattened to a single row.

    Batch norm over a conv output treats spatial positions as the batch, so
    each layer's feature map is flattened to [positions, channels] and back.
    """
    cfg = weights.config
    h = ad.reshape(ad.transpose2d(c), (c.data.shape[1],) + cfg.grid_shape)
    for layer in weights.convs:
        h = ad.conv_valid(h, layer.weight, layer.bias)
        shape = h.data.shape
        flat = ad.transpose2d(ad.reshape(h, (shape[0], int(np.prod(shape[1:])))))
        flat = ad.batch_norm(flat, layer.bn_scale, layer.bn_shift, layer.bn_state, train)
        flat = ad.leaky_relu(flat, cfg.leaky_slope)
        h = ad.reshape(ad.transpose2d(flat), shape)
    return ad.reshape(h, (1, cfg.flat_features()))


def _fc_head(flat_rows: ad.Tensor, weights: PrNetWeights, train: bool) -> ad.Tensor:
    cfg = weights.config
    h = ad.dense_bn_act(
        flat_rows, weights.fc1.weight, weights.fc1.bias, weights.fc1.bn_scale,
        weights.fc1.bn_shift, weights.fc1.bn_state, train, cfg.leaky_slope,
    )
    return ad.linear(h, weights.out.weight, weights.out.bias)


def predict_theta(c: ad.Tensor, weights: PrNetWeights, train: bool = False) -> ad.Tensor:
    """Regress TPS targets from one correlation tensor: theta = theta0 + head(c).

    Train-mode use requires batching (the FC batch-norm needs more than one
    row); see ``forward_shared_source``.
    """
    cfg = weights.config
    flat = _conv_stack(c, weights, train)
    delta = _fc_head(flat, weights, train)
    theta0 = tps.make_control_grid(cfg.dim).points.astype(delta.data.dtype)
    return ad.add(ad.reshape(delta, (cfg.theta_count, cfg.dim)), theta0)


# ---------------------------------------------------------------------------
# full forward


@dataclass
class SourceCache:
    """Per-source constants reused across pairs: sorted points, warp basis
    (full precision plus the network dtype), and (eval mode only) the frozen
    source descriptor.

    The descriptor belongs to the weights it was computed with; a cache must
    not outlive a weight update (the trainer keeps descriptor-free caches
    for exactly that reason).
    """

    ordered: np.ndarray
    basis: np.ndarray
    basis_f64: np.ndarray
    sdt_eval: np.ndarray = None


def prepare_source(source, weights: PrNetWeights, grid: ReferenceGrid,
                   descriptor: bool = True) -> SourceCache:
    src = canonical_order(np.asarray(source, dtype=np.float64))
    control = tps.make_control_grid(weights.config.dim)
    basis = tps.tps_basis(control, src)
    cache = SourceCache(
        ordered=src, basis=basis.astype(weights.config.np_dtype()), basis_f64=basis
    )
    if descriptor:
        cache.sdt_eval = _sdt_eval([src], grid, weights)
    return cache


def forward_shared_source(
    source,
    targets,
    weights: PrNetWeights,
    train: bool = False,
    grid: ReferenceGrid = None,
    cache: SourceCache = None,
    with_graph: bool = None,
):
    """Forward pass for one source against ``targets`` (list of point sets).

    Returns ``(deltas, transformed)``: the ``[B, theta_count*dim]`` tensor of
    predicted control-point displacements and a list of transformed source
    sets. Target sets of equal size share one batched descriptor pass.
    Coordinates are taken as already being in the network frame (the training
    data is generated there); ``forward`` and the evaluator fit and invert
    the similarity normalization around this call.

    Training always builds the autodiff graph. Eval skips it by default and
    runs the fast inference descriptors; pass ``with_graph=True`` to get
    eval-mode outputs that still backpropagate to the weights.
    """
    cfg = weights.config
    if grid is None:
        grid = build_reference_grid(cfg.dim, cfg.grid_shape)
    if cache is None:
        cache = prepare_source(source, weights, grid)
    batch = len(targets)
    if batch == 0:
        raise ValueError("forward_shared_source: no targets")

    ordered = [canonical_order(np.asarray(t, dtype=np.float64)) for t in targets]
    if any(t.shape[0] == 0 for t in ordered):
        raise ValueError("forward_shared_source: empty target set")
    g = grid.count

    if train or with_graph:
        # The source rides along in the same pass; in train mode its
        # descriptor then sees the same batch statistics as the targets'.
        desc = _descriptor_block([cache.ordered] + ordered, grid, weights, train=train)
        f_s = ad.row_slice(desc, 0, g)
        f_g_all = ad.row_slice(desc, g, (1 + batch) * g)
    else:
        if cache.sdt_eval is None:
            cache.sdt_eval = _sdt_eval([cache.ordered], grid, weights)
        f_s = ad.Tensor(cache.sdt_eval)
        f_g_all = ad.Tensor(_sdt_eval(ordered, grid, weights))

    # Rows of f_g_all are target grid points; against the source descriptor
    # this directly yields each pair's correlation in conv layout
    # (channel = target grid point, spatial = source grid point).
    corr = ad.matmul(f_g_all, f_s, transpose_b=True)
    corr = ad.l2_normalize_block_cols(corr, g)
    h = ad.reshape(corr, (batch, g) + cfg.grid_shape)
    for layer in weights.convs:
        h = ad.conv_bn_act_batch(
            h, layer.weight, layer.bias, layer.bn_scale, layer.bn_shift,
            layer.bn_state, train, cfg.leaky_slope,
        )
    flat = ad.reshape(h, (batch, cfg.flat_features()))
    deltas = _fc_head(flat, weights, train)

    theta0 = tps.make_control_grid(cfg.dim).points.astype(deltas.data.dtype).reshape(1, -1)
    # The plain eval path takes the full-precision basis: theta is exact at
    # identity, so the transform round-trips to solver precision, not f32's.
    basis = cache.basis if (train or with_graph) else cache.basis_f64
    transformed = []
    for i in range(batch):
        theta_i = ad.reshape(ad.add(ad.row_slice(deltas, i, i + 1), theta0), (cfg.theta_count, cfg.dim))
        transformed.append(ad.matmul(ad.Tensor(basis), theta_i))
    return deltas, transformed


def forward(source, target, weights: PrNetWeights):
    """Single-pair inference in original coordinates.

    The similarity normalization is fitted on the source, applied to both
    sets before the network, and inverted on the output points. Returns the
    fitted warp (network frame) and the transformed, canonically ordered
    source points (original frame, plain arrays, eval mode).
    """
    cfg = weights.config
    norm = fit_normalizer(source)
    grid = build_reference_grid(cfg.dim, cfg.grid_shape)
    cache = prepare_source(norm.apply(source), weights, grid)
    thetas, transformed = forward_shared_source(
        None, [norm.apply(target)], weights, train=False, grid=grid, cache=cache
    )
    control = tps.make_control_grid(cfg.dim)
    delta = np.asarray(thetas.data[0], dtype=np.float64).reshape(cfg.theta_count, cfg.dim)
    warp = tps.TpsWarp(grid=control, theta=control.points + delta)
    return warp, norm.invert(np.asarray(transformed[0].data, dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"PTREGCK1"


def write_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write named arrays plus JSON metadata; bit-exact on round-trip.

    Layout: magic, manifest length, JSON manifest (array names, shapes,
    dtypes, payload checksum, user metadata), then the raw little-endian
    array payload in manifest order.
    """
    names = sorted(arrays)
    payload = bytearray()
    entries = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"write_checkpoint: array {name} has non-float dtype {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        payload.extend(le.tobytes())
    manifest = {
        "version": 1,
        "arrays": entries,
        "meta": meta,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.array(len(blob), dtype="<u4").tobytes())
        f.write(blob)
        f.write(bytes(payload))


def read_checkpoint(path) -> tuple:
    """Read a checkpoint written by ``write_checkpoint``; verifies the checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(_MAGIC)
    (mlen,) = np.frombuffer(raw[off : off + 4], dtype="<u4")
    off += 4
    try:
        manifest = json.loads(raw[off : off + int(mlen)].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    off += int(mlen)
    payload = raw[off:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.get("payload_sha256"):
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    cursor = 0
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        chunk = payload[cursor : cursor + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: truncated payload at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        cursor += nbytes
    if cursor != len(payload):
        raise CorruptCheckpointError(f"{path}: {len(payload) - cursor} trailing payload bytes")
    return arrays, manifest["meta"]


def save_model(path, weights: PrNetWeights, extra_meta: dict = None, extra_arrays: dict = None) -> None:
    cfg = weights.config
    meta = {
        "kind": "pointreg-model",
        "config": {
            "dim": cfg.dim,
            "grid_shape": list(cfg.grid_shape),
            "mlp_widths": list(cfg.mlp_widths),
            "conv_channels": list(cfg.conv_channels),
            "conv_kernels": list(cfg.conv_kernels),
            "fc_hidden": cfg.fc_hidden,
            "leaky_slope": cfg.leaky_slope,
            "dtype": cfg.dtype,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = weights.named_arrays()
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise ValueError(f"save_model: extra array names collide: {sorted(overlap)}")
        arrays = {**arrays, **extra_arrays}
    write_checkpoint(path, arrays, meta)


def load_model(path) -> tuple:
    """Load weights plus (meta, extra arrays not belonging to the model)."""
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != "pointreg-model":
        raise CorruptCheckpointError(f"{path}: not a model checkpoint")
    c = meta["config"]
    cfg = PrNetConfig(
        dim=c["dim"],
        grid_shape=tuple(c["grid_shape"]),
        mlp_widths=tuple(c["mlp_widths"]),
        conv_channels=tuple(c["conv_channels"]),
        conv_kernels=tuple(c["conv_kernels"]),
        fc_hidden=c["fc_hidden"],
        leaky_slope=c["leaky_slope"],
        dtype=c["dtype"],
    )
    weights = init_weights(cfg, seed=0)
    consumed = set()
    for name, target in weights.named_arrays().items():
        if name not in arrays:
            raise CorruptCheckpointError(f"{path}: missing array {name}")
        if tuple(arrays[name].shape) != tuple(target.shape):
            raise CorruptCheckpointError(
                f"{path}: array {name} has shape {arrays[name].shape}, expected {target.shape}"
            )
        target[...] = arrays[name]
        consumed.add(name)
    extras = {k: v for k, v in arrays.items() if k not in consumed}
    return weights, meta, extras
