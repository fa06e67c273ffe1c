"""SOM-guided encoder, point-cloud decoder and task heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptySourceError, ShapeMismatchError
from .grouping import Assignment, Groups, knn_assign, node_knn
from .layers import BatchNorm, Conv2d, ConvBlock, FCBlock, Linear, Module, SharedMLP
from .nn import chamfer
from .som import canonical_order


@dataclass
class EncoderConfig:
    som_size: int = 8
    k: int = 3
    dim: int = 3
    use_normals: bool = False
    point_widths: tuple = (64, 64, 128)
    node_widths: tuple = (256, 512)
    global_dim: int = 512
    hierarchical: bool = False
    k_prime: int = 9
    hier_widths: tuple = (512,)

    def __post_init__(self):
        self.point_widths = tuple(self.point_widths)
        self.node_widths = tuple(self.node_widths)
        self.hier_widths = tuple(self.hier_widths)
        if not self.point_widths or not self.node_widths:
            raise ValueError("point and node stacks need at least one layer")
        if min(self.point_widths + self.node_widths + self.hier_widths + (self.global_dim,)) < 1:
            raise ValueError("all widths must be >= 1")
        if not 1 <= self.k <= self.som_size**2:
            raise ValueError("k must lie in [1, som_size^2]")
        if self.hierarchical and not 1 <= self.k_prime <= self.som_size**2:
            raise ValueError("k_prime must lie in [1, som_size^2]")

    @property
    def input_dim(self) -> int:
        return self.dim * (2 if self.use_normals else 1)

    @property
    def point_layers(self) -> tuple:
        return (self.input_dim,) + self.point_widths

    @property
    def node_layers(self) -> tuple:
        # pooled point feature concatenated with the node coordinate
        return (self.point_widths[-1] + self.dim,) + self.node_widths

    @property
    def node_feature_dim(self) -> int:
        return self.hier_widths[-1] if self.hierarchical else self.node_widths[-1]


@dataclass
class EncoderBatch:
    """Numpy-side preprocessing for a batch of (cloud, SOM) pairs."""

    rows: np.ndarray  # canonical-order normalized rows (+ normals), all clouds stacked
    node_coords: np.ndarray  # (B M) x D
    node_groups: Groups  # rows owned by each node, global node index b * M + j
    row_node: np.ndarray  # global node index per row
    row_point: np.ndarray  # global (canonical) point index per row
    row_cloud: np.ndarray
    point_offsets: np.ndarray  # first global point index of each cloud
    orders: list  # canonical order per cloud (original indices)
    assignments: list  # per cloud, in original point order
    neighbor_index: np.ndarray | None = None  # (B M k') global node indices

    @property
    def batch_size(self) -> int:
        return len(self.orders)


def prepare_batch(clouds, soms, cfg: EncoderConfig) -> EncoderBatch:
    if len(clouds) != len(soms) or not clouds:
        raise EmptySourceError("need one SOM per cloud and a non-empty batch")
    M = cfg.som_size**2
    rows, coords, row_node, row_point, orders, assigns, nbrs = [], [], [], [], [], [], []
    offsets = [0]
    for b, (cloud, som) in enumerate(zip(clouds, soms)):
        if som.dim != cloud.dim or cloud.dim != cfg.dim:
            raise ShapeMismatchError(f"cloud is {cloud.dim}-D, SOM {som.dim}-D, encoder {cfg.dim}-D")
        if som.size != M:
            raise ShapeMismatchError(f"SOM has {som.size} nodes, encoder expects {M}")
        if cfg.use_normals and cloud.normals is None:
            raise ShapeMismatchError("encoder expects normals but the cloud has none")
        a = knn_assign(cloud, som, cfg.k)
        key = cloud.points if not cfg.use_normals else np.hstack([cloud.points, cloud.normals])
        order = canonical_order(key)
        perm = (order[:, None] * cfg.k + np.arange(cfg.k)).reshape(-1)
        feat = a.normalized[perm]
        if cfg.use_normals:
            feat = np.hstack([feat, cloud.normals[a.owner_point[perm]]])
        rows.append(feat)
        row_node.append(a.owner_node[perm] + b * M)
        row_point.append(np.repeat(np.arange(cloud.n), cfg.k) + offsets[-1])
        offsets.append(offsets[-1] + cloud.n)
        coords.append(som.nodes)
        orders.append(order)
        assigns.append(a)
        if cfg.hierarchical:
            nbrs.append(node_knn(som, cfg.k_prime).reshape(-1) + b * M)
    row_node = np.concatenate(row_node)
    B = len(clouds)
    return EncoderBatch(
        rows=np.concatenate(rows),
        node_coords=np.concatenate(coords),
        node_groups=Groups.from_owner(row_node, B * M),
        row_node=row_node,
        row_point=np.concatenate(row_point),
        row_cloud=row_node // M,
        point_offsets=np.array(offsets),
        orders=orders,
        assignments=assigns,
        neighbor_index=np.concatenate(nbrs) if nbrs else None,
    )


@dataclass
class EncodeOutput:
    global_feature: Tensor  # B x global_dim
    node_features: Tensor  # (B M) x F, after the node stack
    pooled: Tensor  # (B M) x P, max-pooled point features before node concatenation
    point_features: Tensor  # rows x P
    batch: EncoderBatch


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.point_mlp = SharedMLP(cfg.point_layers, rng, dtype)
        self.node_mlp = SharedMLP(cfg.node_layers, rng, dtype)
        if cfg.hierarchical:
            self.hier_mlp = SharedMLP((cfg.node_widths[-1] + cfg.dim,) + cfg.hier_widths, rng, dtype)
        self.global_fc = FCBlock(cfg.node_feature_dim, cfg.global_dim, rng, dtype)

    def __call__(self, clouds, soms) -> EncodeOutput:
        return self.forward_batch(prepare_batch(clouds, soms, self.cfg))

    def forward_batch(self, batch: EncoderBatch) -> EncodeOutput:
        cfg, M = self.cfg, self.cfg.som_size**2
        point_feat = self.point_mlp(Tensor(batch.rows.astype(self.dtype)))
        # isolated nodes get the zero vector
        pooled = ad.group_max(point_feat, batch.node_groups)
        coords = Tensor(batch.node_coords.astype(self.dtype))
        node_feat = self.node_mlp(ad.concat([pooled, coords]))
        if cfg.hierarchical:
            idx = batch.neighbor_index
            rel = batch.node_coords[idx] - np.repeat(batch.node_coords, cfg.k_prime, axis=0)
            grouped = ad.concat([ad.gather_rows(node_feat, idx), Tensor(rel.astype(self.dtype))])
            node_feat = ad.group_max(self.hier_mlp(grouped), Groups.uniform(len(batch.node_coords), cfg.k_prime))
        glob = ad.group_max(node_feat, Groups.uniform(batch.batch_size, M))
        return EncodeOutput(self.global_fc(glob), node_feat, pooled, point_feat, batch)


# --- heads ---------------------------------------------------------------------------


class ClassifierHead(Module):
    """global_dim -> hidden... -> K, with input dropout on the last two layers."""

    def __init__(self, in_dim: int, n_classes: int, rng, hidden=(256, 128), keep=0.4, dtype=np.float32):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.hidden = [FCBlock(a, b, rng, dtype) for a, b in zip((in_dim,) + tuple(hidden[:-1]), hidden)]
        self.out = Linear(hidden[-1] if hidden else in_dim, n_classes, rng, dtype)
        self.keep = keep
        self.n_classes = n_classes

    def __call__(self, x, rng=None):
        n_layers = len(self.hidden) + 1
        for i, layer in enumerate(self.hidden + [self.out]):
            if i >= n_layers - 2 and self.training and self.keep < 1:
                x = ad.dropout(x, self.keep, rng, train=True)
            x = layer(x)
        return x


class Classifier(Module):
    def __init__(self, enc_cfg: EncoderConfig, n_classes: int, rng, hidden=(256, 128), keep=0.4, dtype=np.float32):
        self.encoder = Encoder(enc_cfg, rng, dtype)
        self.head = ClassifierHead(enc_cfg.global_dim, n_classes, rng, hidden, keep, dtype)

    def __call__(self, clouds, soms, rng=None) -> Tensor:
        return self.head(self.encoder(clouds, soms).global_feature, rng)

    def forward_batch(self, batch: EncoderBatch, rng=None) -> Tensor:
        return self.head(self.encoder.forward_batch(batch).global_feature, rng)


class SegmentHead(Module):
    """Per-row fusion of point, node and global features; average pooling mid-stack."""

    def __init__(self, enc_cfg: EncoderConfig, n_parts: int, rng, pre_widths=(256, 128), post_widths=(128,), dtype=np.float32):
        if n_parts < 1:
            raise ValueError("need at least one part")
        self.in_dim = enc_cfg.point_widths[-1] + enc_cfg.node_feature_dim + enc_cfg.global_dim
        self.pre = SharedMLP((self.in_dim,) + tuple(pre_widths), rng, dtype)
        self.post = SharedMLP((pre_widths[-1],) + tuple(post_widths), rng, dtype)
        self.out = Linear(post_widths[-1] if post_widths else pre_widths[-1], n_parts, rng, dtype)
        self.n_parts = n_parts

    def __call__(self, enc: EncodeOutput) -> Tensor:
        batch = enc.batch
        fused = ad.concat(
            [
                enc.point_features,
                ad.gather_rows(enc.node_features, batch.row_node),
                ad.gather_rows(enc.global_feature, batch.row_cloud),
            ]
        )
        x = self.pre(fused)
        x = ad.group_mean(x, Groups.from_owner(batch.row_point, int(batch.point_offsets[-1])))
        return self.out(self.post(x))


class Segmenter(Module):
    def __init__(self, enc_cfg: EncoderConfig, n_parts: int, rng, pre_widths=(256, 128), post_widths=(128,), dtype=np.float32):
        self.encoder = Encoder(enc_cfg, rng, dtype)
        self.head = SegmentHead(enc_cfg, n_parts, rng, pre_widths, post_widths, dtype)

    def forward_batch(self, batch: EncoderBatch) -> Tensor:
        """Scores for every point in canonical order, clouds stacked."""
        return self.head(self.encoder.forward_batch(batch))

    def __call__(self, clouds, soms) -> list:
        """Per-cloud N x K score arrays in each cloud's original point order."""
        batch = prepare_batch(clouds, soms, self.encoder.cfg)
        return unstack_scores(self.forward_batch(batch).data, batch)


def unstack_scores(scores: np.ndarray, batch: EncoderBatch) -> list:
    out = []
    for b, order in enumerate(batch.orders):
        block = scores[batch.point_offsets[b] : batch.point_offsets[b + 1]]
        restored = np.empty_like(block)
        restored[order] = block
        out.append(restored)
    return out


# --- decoder ----------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    code_dim: int = 512
    fc_points: int = 64
    fc_hidden: int = 256
    grid: int = 4
    stages: int = 2
    channels: tuple = (128, 64, 32)
    pc_hidden: int = 32
    out_dim: int = 3

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.fc_points < 0 or self.grid < 1 or self.stages < 0:
            raise ValueError("invalid decoder geometry")
        if len(self.channels) != self.stages + 1:
            raise ValueError("need one channel width per resolution (stages + 1)")
        if self.fc_points + self.conv_points < 1:
            raise ValueError("decoder must emit at least one point")

    @property
    def final_size(self) -> int:
        return self.grid * 2**self.stages

    @property
    def conv_points(self) -> int:
        return self.final_size**2

    @property
    def n_points(self) -> int:
        return self.fc_points + self.conv_points

    @property
    def coarse_sizes(self) -> list:
        return [(self.grid * 2**s) ** 2 for s in range(self.stages)]


class ConvToPoints(Module):
    """Two 1x1 convolutions mapping a C x H x W map to H*W points."""

    def __init__(self, c_in, hidden, out_dim, rng, dtype=np.float32):
        self.block = ConvBlock(c_in, hidden, 1, rng, dtype)
        self.proj = Conv2d(hidden, out_dim, 1, rng, dtype)

    def __call__(self, x):
        y = self.proj(self.block(x))  # B x D x H x W
        B, D, H, W = y.shape
        return ad.reshape(ad.transpose(y, (0, 2, 3, 1)), (B, H * W, D))


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        if cfg.fc_points:
            self.fc_hidden = FCBlock(cfg.code_dim, cfg.fc_hidden, rng, dtype)
            self.fc_out = Linear(cfg.fc_hidden, cfg.out_dim * cfg.fc_points, rng, dtype)
        self.seed_fc = FCBlock(cfg.code_dim, cfg.channels[0] * cfg.grid * cfg.grid, rng, dtype)
        self.upconvs = [ConvBlock(a, b, 3, rng, dtype) for a, b in zip(cfg.channels[:-1], cfg.channels[1:])]
        self.to_points = [ConvToPoints(c, cfg.pc_hidden, cfg.out_dim, rng, dtype) for c in cfg.channels]

    def __call__(self, code) -> tuple[Tensor, list]:
        """Return (B x N x D final cloud, coarse clouds from lower resolutions)."""
        cfg = self.cfg
        code = code if isinstance(code, Tensor) else Tensor(code)
        if code.shape[-1] != cfg.code_dim:
            raise ShapeMismatchError(f"code has length {code.shape[-1]}, decoder expects {cfg.code_dim}")
        B = code.shape[0]
        fmap = ad.reshape(self.seed_fc(code), (B, cfg.channels[0], cfg.grid, cfg.grid))
        coarse = []
        for stage, upconv in enumerate(self.upconvs):
            coarse.append(self.to_points[stage](fmap))
            fmap = upconv(ad.upsample_nn_2x(fmap))
        conv_pts = self.to_points[-1](fmap)
        if not cfg.fc_points:
            return conv_pts, coarse
        fc_pts = ad.reshape(self.fc_out(self.fc_hidden(code)), (B, cfg.fc_points, cfg.out_dim))
        return ad.concat([fc_pts, conv_pts], axis=1), coarse


class AutoEncoder(Module):
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, rng, dtype=np.float32):
        if dec_cfg.code_dim != enc_cfg.global_dim or dec_cfg.out_dim != enc_cfg.dim:
            raise ShapeMismatchError("decoder code/out dims must match encoder global_dim/dim")
        self.encoder = Encoder(enc_cfg, rng, dtype)
        self.decoder = Decoder(dec_cfg, rng, dtype)

    def forward_batch(self, batch: EncoderBatch):
        return self.decoder(self.encoder.forward_batch(batch).global_feature)

    def __call__(self, clouds, soms):
        return self.forward_batch(prepare_batch(clouds, soms, self.encoder.cfg))


def reconstruction_loss(final: Tensor, coarse: list, targets: Sequence[np.ndarray], coarse_supervision: bool = True) -> Tensor:
    """Mean over the batch of Chamfer(final, target), plus every coarse level when enabled."""
    total = None
    B = final.shape[0]
    for b, target in enumerate(targets):
        terms = [chamfer(final[b], target)]
        if coarse_supervision:
            terms += [chamfer(c[b], target) for c in coarse]
        for t in terms:
            total = t if total is None else total + t
    return ad.scale(total, 1.0 / B)


# --- single-cloud conveniences ----------------------------------------------------------


def encode(encoder: Encoder, cloud, som) -> tuple[np.ndarray, np.ndarray, Assignment]:
    """Global feature, pooled node features (M x P, before concatenation) and assignment."""
    out = encoder([cloud], [som])
    return out.global_feature.data[0], out.pooled.data, out.batch.assignments[0]


def decode(decoder: Decoder, code) -> tuple[np.ndarray, list]:
    final, coarse = decoder(Tensor(np.asarray(code, dtype=decoder.seed_fc.fc.W.dtype).reshape(1, -1)))
    return final.data[0], [c.data[0] for c in coarse]


def classify(model: Classifier, cloud, som, rng=None) -> np.ndarray:
    return model([cloud], [som], rng).data[0]


def segment(model: Segmenter, cloud, som) -> np.ndarray:
    return model([cloud], [som])[0]


def retrieve(query_scores, library_scores, restrict_to_category: bool = True) -> list:
    """Rank library items by L2 distance between score vectors.

    Only items whose predicted category (argmax) matches the query's are
    ranked when ``restrict_to_category`` is set. Returns ``(index, distance)``
    pairs, nearest first, ties to the lower index.
    """
    lib = np.asarray(library_scores, dtype=np.float64)
    if lib.size == 0:
        raise EmptySourceError("retrieval library is empty")
    q = np.asarray(query_scores, dtype=np.float64)
    if lib.ndim != 2 or lib.shape[1] != q.shape[0]:
        raise ShapeMismatchError("query and library score vectors must have equal length")
    cand = np.arange(len(lib))
    if restrict_to_category:
        cand = cand[lib.argmax(axis=1) == q.argmax()]
    dist = np.sqrt(((lib[cand] - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    return [(int(cand[i]), float(dist[i])) for i in order]
