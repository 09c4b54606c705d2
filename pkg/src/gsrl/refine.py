"""KNN-graph autoencoder that smooths per-Gaussian properties in 3D.

Properties are encoded as an 11-vector (quaternion, log-scale, color,
logit-opacity). The encoder runs three message-passing layers, each an MLP over
``concat(h_i, max_{j in N(i)} h_j)``; the decoder maps the 128-d latents back to
property space pointwise and re-applies the output activations. Positions are
never touched.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .errors import ContractViolation
from .gaussians import GaussianCloud
from .regressor import activate_opacity, activate_rotation, activate_scale

DEFAULT_K = 16
PROPERTY_DIM = 11
LATENT_DIM = 128

# Fixed per-dimension centering/scaling of the encoded properties, so that every
# property group enters (and leaves) the network at a comparable magnitude.
_PROP_SHIFT = torch.tensor([0.0] * 4 + [-2.5] * 3 + [0.5] * 3 + [0.0])
_PROP_SCALE = torch.tensor([0.5] * 4 + [1.0] * 3 + [0.3] * 3 + [2.0])


class KnnGraph(NamedTuple):
    positions: Tensor  # [n, 3]
    neighbors: Tensor  # [n, K] int64

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    @staticmethod
    def cat(graphs: list["KnnGraph"]) -> "KnnGraph":
        """Disjoint union; neighbor indices are offset to the concatenated numbering."""
        offsets, total = [], 0
        for g in graphs:
            offsets.append(total)
            total += g.positions.shape[0]
        return KnnGraph(
            torch.cat([g.positions for g in graphs]),
            torch.cat([g.neighbors + o for g, o in zip(graphs, offsets)]),
        )


def _lexsort_rows(vals: Tensor, idx: Tensor) -> tuple[Tensor, Tensor]:
    """Order each row by (value, index)."""
    o = torch.argsort(idx, dim=1, stable=True)
    vals, idx = vals.gather(1, o), idx.gather(1, o)
    o = torch.argsort(vals, dim=1, stable=True)
    return vals.gather(1, o), idx.gather(1, o)


def _exact_row(p: Tensor, i: int, k: int) -> Tensor:
    d = (p - p[i]).pow(2).sum(-1)
    d[i] = float("inf")
    return torch.argsort(d, stable=True)[:k]


def build_knn(positions: Tensor, k: int = DEFAULT_K, chunk: int = 512, margin: int = 8) -> KnnGraph:
    """Exact Euclidean KNN (K = min(k, n-1)), no self-loops, ties to the lower index.

    Candidates come from a fast float32 distance expansion; they are re-ranked
    with exact float64 differences, and any row whose K-th exact distance is not
    safely below the best excluded candidate bound is recomputed exhaustively.
    """
    n = positions.shape[0]
    if n < 2:
        raise ContractViolation(f"a KNN graph needs at least 2 nodes, got {n}")
    k = min(k, n - 1)
    m = min(k + margin, n - 1)
    p = positions.detach().double()
    centered = p - p.mean(0)
    pf = centered.float()
    sq = (pf * pf).sum(1)
    sq_max = float(sq.max())
    rows = []
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        qf = pf[s:e]
        approx = sq[s:e, None] + sq[None, :] - 2 * qf @ pf.T
        approx[torch.arange(e - s), torch.arange(s, e)] = float("inf")
        a_vals, cand = torch.topk(approx, m + 1 if m < n - 1 else m, dim=1, largest=False, sorted=True)
        exact = (p[cand[:, :m]] - p[s:e, None]).pow(2).sum(-1)
        vals, idx = _lexsort_rows(exact, cand[:, :m])
        out = idx[:, :k].clone()
        if m < n - 1:
            # every non-candidate has approximate distance >= a_vals[:, m]
            err = 1e-5 * (sq[s:e] + sq_max) + 1e-30
            unsafe = ~(vals[:, k - 1] < a_vals[:, m].double() - err.double())
            for r in unsafe.nonzero().flatten().tolist():
                out[r] = _exact_row(p, s + r, k)
        rows.append(out)
    return KnnGraph(positions, torch.cat(rows))


def encode_properties(cloud: GaussianCloud) -> Tensor:
    """[n, 11] = quaternion, log-scale, color, logit-opacity."""
    return torch.cat(
        [
            cloud.quats,
            torch.log(cloud.scales),
            cloud.colors,
            torch.logit(cloud.opacities)[:, None],
        ],
        dim=-1,
    )


def decode_properties(raw: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Re-activate an [n, 11] property vector into valid (quats, scales, colors, opacities)."""
    return (
        activate_rotation(raw[:, 0:4]),
        activate_scale(raw[:, 4:7]),
        raw[:, 7:10].clamp(0.0, 1.0),
        activate_opacity(raw[:, 10]),
    )


class _NeighborMax(torch.autograd.Function):
    """``max_j h[neighbors[i, j]]`` whose backward routes each gradient entry to the
    single winning neighbor (first index on ties), avoiding an [n, K, C] scatter."""

    @staticmethod
    def forward(ctx, h: Tensor, neighbors: Tensor) -> Tensor:
        vals = h[neighbors[:, 0]]
        k = neighbors.shape[1]
        arg = torch.zeros(vals.shape, dtype=torch.uint8 if k <= 256 else torch.int64)
        for j in range(1, k):
            x = h[neighbors[:, j]]
            better = x > vals  # strict: the first maximal column wins
            arg.mul_(~better).add_(better.to(arg.dtype) * j)
            torch.maximum(vals, x, out=vals)
        ctx.save_for_backward(neighbors.gather(1, arg.long()))
        ctx.n = h.shape[0]
        return vals

    @staticmethod
    def backward(ctx, grad: Tensor):
        (src,) = ctx.saved_tensors
        out = torch.zeros(ctx.n, grad.shape[1], dtype=grad.dtype)
        return out.scatter_add_(0, src, grad), None


def neighbor_max(h: Tensor, neighbors: Tensor) -> Tensor:
    return _NeighborMax.apply(h, neighbors)


class _EdgeLayer(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * cin, cout), nn.ReLU(), nn.Linear(cout, cout))

    def forward(self, h: Tensor, neighbors: Tensor) -> Tensor:
        pooled = neighbor_max(h, neighbors)
        return self.mlp(torch.cat([h, pooled], dim=-1))


class RefineOutput(NamedTuple):
    cloud: GaussianCloud
    raw: Tensor  # [n, 11] decoder output in encoded property space
    target: Tensor  # [n, 11] encoded input properties
    latent: Tensor  # [n, 128]


class RefineNet(nn.Module):
    def __init__(self, hidden: int = 64, latent: int = LATENT_DIM, residual: bool = False):
        super().__init__()
        self.residual = residual
        self.latent_dim = latent
        self.encoder = nn.ModuleList(
            [_EdgeLayer(PROPERTY_DIM, hidden), _EdgeLayer(hidden, latent), _EdgeLayer(latent, latent)]
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent, latent), nn.ReLU(),
            nn.Linear(latent, hidden), nn.ReLU(),
            nn.Linear(hidden, PROPERTY_DIM),
        )
        # He init keeps activations from fading through the nine stacked layers
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            self.decoder[-1].weight.mul_(0.0 if residual else 0.1)

    def encode(self, props: Tensor, graph: KnnGraph) -> Tensor:
        h = props
        for i, layer in enumerate(self.encoder):
            h = layer(h, graph.neighbors)
            if i < len(self.encoder) - 1:
                h = torch.relu(h)
        return h

    def forward(self, cloud: GaussianCloud, graph: KnnGraph) -> RefineOutput:
        n = len(cloud)
        if graph.neighbors.shape[0] != n or graph.positions.shape[0] != n:
            raise ContractViolation(f"graph has {graph.neighbors.shape[0]} nodes, cloud has {n}")
        target = encode_properties(cloud)
        latent = self.encode((target - _PROP_SHIFT) / _PROP_SCALE, graph)
        delta = self.decoder(latent) * _PROP_SCALE
        raw = target + delta if self.residual else delta + _PROP_SHIFT
        quats, scales, colors, opac = decode_properties(raw)
        out = GaussianCloud(cloud.means, quats, scales, colors, opac, features=cloud.features)
        return RefineOutput(out, raw, target, latent)


def refine(cloud: GaussianCloud, graph: KnnGraph, net: RefineNet) -> GaussianCloud:
    return net(cloud, graph).cloud


def reconstruction_error(out: RefineOutput) -> Tensor:
    """Mean squared error between decoded and input properties in encoded space."""
    return (out.raw - out.target).pow(2).mean()
