"""Attention graph network mapping per-vertex features to displacements.

Seven graph-attention layers, each followed by a per-vertex feature
normalization layer. Each attention layer runs two heads whose outputs
are summed; neighborhood messages are aggregated both by sum and by
mean, concatenated, and projected back to the layer width. The final
displacement head is zero-initialized, so an untrained network is the
identity deformation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

_NORM_EPS = 1e-5
_CONFIG_KEY = "__config_json__"


@dataclass
class GraphNetConfig:
    layer_count: int = 7
    hidden_width: int = 128
    heads: int = 2
    leaky_slope: float = 0.2
    norm_kind: str = "vertex_standardize"
    input_width: int = 3

    def __post_init__(self):
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.hidden_width % self.heads != 0:
            raise ValueError("hidden_width must be divisible by the head count")

    @property
    def head_width(self):
        """Per-head output width F'; the attention vector has length 2F'."""
        return self.hidden_width // self.heads


def _glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


# ---------------------------------------------------------------------------
# attention-weighted neighborhood aggregation

# Aggregation is a sparse matrix product with the (fixed) edge structure;
# only the attention coefficients change between forward passes, so the
# CSR pattern — and its transpose, needed for the gradient — is cached
# per mesh.


class _EdgeAdjacency:
    def __init__(self, mesh):
        edges = mesh.edge_list()  # sorted by (src, dst): already CSR order
        n = mesh.num_vertices
        self.src = edges[:, 0]
        self.dst = edges[:, 1]
        e = edges.shape[0]
        indptr = np.concatenate([[0], np.cumsum(mesh.degrees())]).astype(np.int32)
        self.mat = sp.csr_matrix(
            (np.ones(e), self.dst.astype(np.int32), indptr), shape=(n, n)
        )
        self.bounds = ad._segment_bounds(self.src, n)
        self.perm_t = np.lexsort((self.src, self.dst))
        indptr_t = np.concatenate([[0], np.cumsum(np.bincount(self.dst, minlength=n))])
        self.mat_t = sp.csr_matrix(
            (np.ones(e), self.src[self.perm_t].astype(np.int32), indptr_t.astype(np.int32)),
            shape=(n, n),
        )
        # block matrix summing H attention heads in a single product:
        # row u of the (n, H*n) matrix holds head h's edge weights at
        # column h*n + dst. self.block_pos[h] gives each head's slot in
        # the shared data array (heads stored back to back within a row).
        self.num_vertices = n
        self.num_edges = e
        self._block_mats = {}

    def block_mat(self, heads):
        cached = self._block_mats.get(heads)
        if cached is not None:
            return cached
        n, e = self.num_vertices, self.num_edges
        deg = np.diff(self.mat.indptr)
        indptr = np.concatenate([[0], np.cumsum(heads * deg)])
        off = np.arange(e) - np.repeat(self.mat.indptr[:-1], deg)  # rank within row
        pos = [indptr[self.src] + h * deg[self.src] + off for h in range(heads)]
        indices = np.empty(heads * e, dtype=np.int64)
        for h in range(heads):
            indices[pos[h]] = h * n + self.dst
        mat = sp.csr_matrix(
            (np.ones(heads * e), indices, indptr.astype(np.int64)), shape=(n, heads * n)
        )
        cached = (mat, pos)
        self._block_mats[heads] = cached
        return cached


def _adjacency(mesh):
    adj = getattr(mesh, "_edge_adjacency", None)
    if adj is None:
        adj = _EdgeAdjacency(mesh)
        mesh._edge_adjacency = adj
    return adj


def edge_aggregate(att, z, adj):
    """out[u] = sum over edges (u, v) of att_edge * z[v].

    `att` is ordered like the mesh's edge list. Differentiable in both
    arguments."""
    att, z = ad.as_tensor(att), ad.as_tensor(z)
    adj.mat.data = att.values
    values = adj.mat @ z.values
    src, dst = adj.src, adj.dst

    def backfn(g):
        g_att = np.einsum("ef,ef->e", g[src], z.values[dst])
        adj.mat_t.data = att.values[adj.perm_t]
        g_z = adj.mat_t @ g
        return (g_att, g_z)

    return ad._record(values, (att, z), backfn)


def edge_aggregate_heads(atts, zs, adj):
    """Sum over heads h of (edge_aggregate(atts[h], zs[h], adj)).

    All heads are folded into one sparse product against a block matrix
    so the hot path pays a single csr dispatch. Differentiable in every
    attention vector and feature matrix."""
    heads = len(atts)
    atts = [ad.as_tensor(a) for a in atts]
    zs = [ad.as_tensor(z) for z in zs]
    mat, pos = adj.block_mat(heads)
    for h in range(heads):
        mat.data[pos[h]] = atts[h].values
    stacked = np.concatenate([z.values for z in zs], axis=0)
    values = mat @ stacked
    src, dst = adj.src, adj.dst

    def backfn(g):
        gsrc = g[src]
        grads = []
        for h in range(heads):
            grads.append(np.einsum("ef,ef->e", gsrc, zs[h].values[dst]))
        for h in range(heads):
            adj.mat_t.data = atts[h].values[adj.perm_t]
            grads.append(adj.mat_t @ g)
        return tuple(grads)

    return ad._record(values, tuple(atts) + tuple(zs), backfn)


def sum_mean_concat(s, inv_deg):
    """[s || inv_deg * s] columnwise, in one output pass.

    `inv_deg` is a constant (n, 1) scaling column (reciprocal vertex
    degrees), turning the summed aggregate into the mean aggregate."""
    s = ad.as_tensor(s)
    n, d = s.shape
    values = np.empty((n, 2 * d))
    values[:, :d] = s.values
    np.multiply(s.values, inv_deg, out=values[:, d:])

    def backfn(g):
        return (g[:, :d] + inv_deg * g[:, d:],)

    return ad._record(values, (s,), backfn)


def warm_topology(mesh):
    """Precompute the edge caches used by attention layers (one-time,
    per-mesh setup; lets inference timing cover the forward pass only)."""
    mesh.edge_list()
    mesh.degrees()
    _adjacency(mesh)


# ---------------------------------------------------------------------------
# single layers


def gcn_layer(features, mesh, weights, leaky_slope=0.2):
    """Fixed-weight baseline layer: neighbors aggregated with the
    symmetric degree normalization c_uv = 1 / sqrt(deg(u) deg(v)).

    `weights` carries 'psi' (message transform), 'phi_self', 'phi_msg'
    and 'bias'.
    """
    x = ad.as_tensor(features)
    if x.shape[0] != mesh.num_vertices:
        raise ValueError(f"feature rows {x.shape[0]} != vertex count {mesh.num_vertices}")
    edges = mesh.edge_list()
    deg = mesh.degrees().astype(np.float64)
    src, dst = edges[:, 0], edges[:, 1]
    coeff = 1.0 / np.sqrt(deg[src] * deg[dst])
    msgs = x[dst] @ ad.as_tensor(weights["psi"])
    agg = ad.segment_sum(coeff[:, None] * msgs, src, mesh.num_vertices)
    out = x @ ad.as_tensor(weights["phi_self"]) + agg @ ad.as_tensor(weights["phi_msg"])
    return ad.leaky_relu(out + ad.as_tensor(weights["bias"]), leaky_slope)


class GatLayer:
    """One multi-head graph attention layer (see module docstring)."""

    def __init__(self, width, heads, leaky_slope, rng):
        if width % heads != 0:
            raise ValueError("layer width must be divisible by the head count")
        self.width = width
        self.heads = heads
        self.head_width = width // heads
        self.leaky_slope = leaky_slope
        self.params = {}
        for h in range(heads):
            self.params[f"head{h}_attn_w"] = Tensor(_glorot(rng, width, self.head_width), requires_grad=True)
            self.params[f"head{h}_attn_a"] = Tensor(
                rng.uniform(-0.3, 0.3, 2 * self.head_width), requires_grad=True
            )
            self.params[f"head{h}_psi"] = Tensor(_glorot(rng, width, self.head_width), requires_grad=True)
        self.params["combine"] = Tensor(_glorot(rng, 2 * self.head_width, width), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(width), requires_grad=True)

    def attention_coefficients(self, features, mesh, head):
        """Softmax-normalized coefficients of one head over the edge list."""
        x = ad.as_tensor(features)
        edges = mesh.edge_list()
        src, dst = edges[:, 0], edges[:, 1]
        w = self.params[f"head{head}_attn_w"]
        avec = self.params[f"head{head}_attn_a"]
        # a^T [W x_u || W x_v] == x_u . (W a_src) + x_v . (W a_dst)
        a_src = avec[np.arange(self.head_width)]
        a_dst = avec[np.arange(self.head_width, 2 * self.head_width)]
        score_src = x @ (w @ a_src)
        score_dst = x @ (w @ a_dst)
        e = ad.leaky_relu(score_src[src] + score_dst[dst], self.leaky_slope)
        return ad.segment_softmax(e, src, mesh.num_vertices)

    def __call__(self, features, mesh):
        x = ad.as_tensor(features)
        if x.shape[1] != self.width:
            raise ValueError(f"feature width {x.shape[1]} != layer width {self.width}")
        if x.shape[0] != mesh.num_vertices:
            raise ValueError(f"feature rows {x.shape[0]} != vertex count {mesh.num_vertices}")
        adj = _adjacency(mesh)
        src, dst = adj.src, adj.dst
        inv_deg = (1.0 / mesh.degrees().astype(np.float64))[:, None]
        hw = self.head_width
        # One wide projection per layer: all per-head message transforms
        # and the collapsed attention-score vectors
        # (a^T [W x_u || W x_v] == x_u . (W a_src) + x_v . (W a_dst)) are
        # concatenated column-wise so the BLAS runs a single full-width
        # product instead of several narrow ones.
        blocks = [self.params[f"head{h}_psi"] for h in range(self.heads)]
        for h in range(self.heads):
            w = self.params[f"head{h}_attn_w"]
            avec = self.params[f"head{h}_attn_a"]
            blocks.append(ad.reshape(w @ avec[np.arange(hw)], (-1, 1)))
            blocks.append(ad.reshape(w @ avec[np.arange(hw, 2 * hw)], (-1, 1)))
        proj = x @ ad.concat(blocks, axis=1)  # (n, heads*hw + 2*heads)
        score_base = self.heads * hw
        atts, zs = [], []
        for h in range(self.heads):
            e = ad.leaky_relu(
                proj[src, score_base + 2 * h] + proj[dst, score_base + 2 * h + 1],
                self.leaky_slope,
            )
            atts.append(ad.segment_softmax(e, src, mesh.num_vertices, bounds=adj.bounds))
            zs.append(proj[:, h * hw : (h + 1) * hw])
        sum_agg = edge_aggregate_heads(atts, zs, adj)
        combined = sum_mean_concat(sum_agg, inv_deg) @ self.params["combine"]
        return ad.fused_affine_leaky(combined, None, self.params["bias"], self.leaky_slope)


class NormLayer:
    """Per-vertex feature standardization with a learnable affine."""

    def __init__(self, width):
        self.params = {
            "gamma": Tensor(np.ones(width), requires_grad=True),
            "beta": Tensor(np.zeros(width), requires_grad=True),
        }

    def __call__(self, features):
        return ad.vertex_standardize(
            features, self.params["gamma"], self.params["beta"], eps=_NORM_EPS
        )


# ---------------------------------------------------------------------------
# full network


class GraphNet:
    """Input projection, alternating attention and norm layers, and a
    zero-initialized displacement head."""

    def __init__(self, config, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        w = config.hidden_width
        self.input_w = Tensor(_glorot(rng, config.input_width, w), requires_grad=True)
        self.input_b = Tensor(np.zeros(w), requires_grad=True)
        self.layers = [GatLayer(w, config.heads, config.leaky_slope, rng) for _ in range(config.layer_count)]
        self.norms = [NormLayer(w) for _ in range(config.layer_count)]
        self.head_w = Tensor(np.zeros((w, 3)), requires_grad=True)
        self.head_b = Tensor(np.zeros(3), requires_grad=True)

    def parameters(self):
        params = {"input_w": self.input_w, "input_b": self.input_b}
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            for name, p in layer.params.items():
                params[f"gat{i}_{name}"] = p
            for name, p in norm.params.items():
                params[f"norm{i}_{name}"] = p
        params["head_w"] = self.head_w
        params["head_b"] = self.head_b
        return params

    def displacements(self, mesh, vertex_coords, image_features):
        """Per-vertex 3-D displacement from [coords || image features]."""
        feats = ad.concat([ad.as_tensor(vertex_coords), ad.as_tensor(image_features)], axis=1)
        if feats.shape[1] != self.config.input_width:
            raise ValueError(
                f"input width {feats.shape[1]} != configured {self.config.input_width}"
            )
        h = ad.leaky_relu(feats @ self.input_w + self.input_b, self.config.leaky_slope)
        for layer, norm in zip(self.layers, self.norms):
            h = norm(layer(h, mesh))
        return h @ self.head_w + self.head_b

    def deform(self, mesh, image_features, vertex_coords=None):
        """Predicted vertex tensor: reference coordinates plus displacement."""
        coords = Tensor(mesh.vertices) if vertex_coords is None else ad.as_tensor(vertex_coords)
        return coords + self.displacements(mesh, coords, image_features)


def forward(net, mesh, image_features):
    """Deform a mesh; returns a TriMesh with the same facets."""
    pred = net.deform(mesh, image_features)
    return mesh.with_vertices(pred.values)


# ---------------------------------------------------------------------------
# checkpointing: parameter records plus a config header record


def save_graphnet(path, net, extra_params=None, extra_config=None):
    """Write the network (and optional extractor parameters) to a
    checkpoint. The first record holds the configuration as JSON encoded
    one byte per float64 value."""
    config = dict(asdict(net.config))
    if extra_config:
        config.update(extra_config)
    blob = np.frombuffer(json.dumps(config, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    records = {_CONFIG_KEY: Tensor(blob.astype(np.float64))}
    records.update(net.parameters())
    if extra_params:
        for name, p in extra_params.items():
            records[f"extractor/{name}"] = p
    ad.save_checkpoint(path, records)


def load_graphnet(path):
    """Load a checkpoint; returns (net, extractor_params, config_dict)."""
    records = ad.load_checkpoint(path)
    if _CONFIG_KEY not in records:
        raise ValueError(f"{path}: checkpoint lacks a configuration header record")
    blob = records.pop(_CONFIG_KEY).values.astype(np.uint8).tobytes()
    config = json.loads(blob.decode("utf-8"))
    net_fields = {k: config[k] for k in (
        "layer_count", "hidden_width", "heads", "leaky_slope", "norm_kind", "input_width")}
    net = GraphNet(GraphNetConfig(**net_fields))
    extractor = {}
    params = net.parameters()
    for name, tensor in records.items():
        if name.startswith("extractor/"):
            tensor.requires_grad = True
            extractor[name[len("extractor/"):]] = tensor
            continue
        if name not in params:
            raise ValueError(f"{path}: unexpected parameter '{name}'")
        if params[name].shape != tensor.shape:
            raise ValueError(
                f"{path}: parameter '{name}' has shape {tensor.shape}, expected {params[name].shape}"
            )
        params[name].values = tensor.values
    return net, extractor, config
