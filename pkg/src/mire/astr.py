"""Adaptive semantic topology refinement.

Per source domain we keep a topology: the class-anchor matrix (centroids of
embedded features), its RBF-kernel adjacency, and the previous iteration's
anchors. Training-time feature aggregation mixes each sample's feature with an
adjacency-and-cosine weighted combination of its domain's anchors; anchors are
then refreshed by an exponential moving average, and a contrastive consistency
loss over a bipartite anchor graph between every pair of source domains pulls
matched classes together and pushes mismatched classes beyond a margin.

Gradient flow: anchors act as constants inside aggregation (the sample feature
is the only differentiable input), while the consistency loss sees current
anchors composed as phi * batch-local centroid (differentiable) plus
(1 - phi) * detached EMA history, so it trains the encoder and the graph
convolution weights but not the running anchor state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nets import bgcn_forward
from .tensor import Tensor

SIGMA2_FLOOR = 1e-6


@dataclass
class AggregationConfig:
    phi: float = 0.5

    def validate(self):
        if not 0.0 < self.phi <= 1.0:
            raise ContractError(f"phi must be in (0,1], got {self.phi}")


@dataclass
class CcrConfig:
    margin: float = 2.0
    loss_weight: float = 0.1

    def validate(self):
        if self.margin <= 0:
            raise ContractError(f"margin must be positive, got {self.margin}")
        if self.loss_weight < 0:
            raise ContractError(f"loss weight must be >= 0, got {self.loss_weight}")


@dataclass
class SemanticTopology:
    domain: int
    anchors: np.ndarray            # [K, D], current iteration
    prev_anchors: np.ndarray       # [K, D], previous iteration
    adjacency: np.ndarray          # [K, K]
    sigma2: float
    iteration: int


@dataclass
class BipartiteGraph:
    domain_pair: tuple
    affinity: np.ndarray           # [K, K], cross-domain anchor affinities
    block: np.ndarray              # [2K, 2K] assembled adjacency


def median_bandwidth(anchors):
    """Median of pairwise squared anchor distances, floored."""
    k = anchors.shape[0]
    if k < 2:
        return 1.0
    d2 = ((anchors[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    off = d2[~np.eye(k, dtype=bool)]
    return float(max(np.median(off), SIGMA2_FLOOR))


def adjacency_from_anchors(anchors, sigma2):
    d2 = ((anchors[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma2))


def init_topology(bundle, nets, source_domains=None, batch_size=64):
    """Per-domain topologies from class centroids of encoded train features."""
    doms = list(range(len(bundle.domains))) if source_domains is None \
        else list(source_domains)
    k = bundle.spec.num_classes
    topos = {}
    for d in doms:
        samples = bundle.domain_samples(d, split="train")
        feats, ys = [], []
        with T.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                images = np.stack([s.image for s in chunk])
                feats.append(nets.encoder.encode(images).data)
                ys.extend(s.y for s in chunk)
        feats = np.concatenate(feats)
        ys = np.array(ys)
        anchors = np.zeros((k, feats.shape[1]))
        for c in range(k):
            rows = feats[ys == c]
            if len(rows) == 0:
                raise ContractError(
                    f"domain {d} has no training samples of class {c}")
            anchors[c] = rows.mean(axis=0)
        sigma2 = median_bandwidth(anchors)
        topos[d] = SemanticTopology(
            domain=d, anchors=anchors, prev_anchors=anchors.copy(),
            adjacency=adjacency_from_anchors(anchors, sigma2),
            sigma2=sigma2, iteration=0)
    return topos


def aggregation_weights(f, k, topo, use_adjacency=True):
    """Softmax over classes of (A_kj + cos(f, c_j)) / 2 for a single feature."""
    if not 0 <= k < topo.anchors.shape[0]:
        raise ContractError(f"class {k} out of range for topology")
    f2 = f if isinstance(f, Tensor) else Tensor(f)
    cosv = T.cosine_matrix(T.reshape(f2, (1, -1)), Tensor(topo.anchors))
    arow = topo.adjacency[k] if use_adjacency else np.zeros(topo.anchors.shape[0])
    logits = (cosv + Tensor(arow[None, :])) * 0.5
    return T.reshape(T.softmax(logits, axis=-1), (-1,))


def aggregate(f, k, topo, cfg=None, use_adjacency=True):
    """f' = phi * f + (1 - phi) * sum_j w_j c_j; anchors are constants."""
    cfg = cfg or AggregationConfig()
    cfg.validate()
    f2 = f if isinstance(f, Tensor) else Tensor(f)
    if cfg.phi == 1.0:
        return f2
    w = aggregation_weights(f2, k, topo, use_adjacency)
    mixed = T.reshape(T.reshape(w, (1, -1)) @ Tensor(topo.anchors), (-1,))
    return f2 * cfg.phi + mixed * (1.0 - cfg.phi)


def aggregate_batch(feats, ys, ds, topos, cfg=None, use_adjacency=True):
    """Batched aggregation; each row uses its own domain's topology."""
    cfg = cfg or AggregationConfig()
    cfg.validate()
    if cfg.phi == 1.0:
        return feats
    b = feats.data.shape[0]
    ys = np.asarray(ys)
    ds = np.asarray(ds)
    pieces, orders = [], []
    for d in sorted(set(ds.tolist())):
        idx = np.flatnonzero(ds == d)
        topo = topos[d]
        fd = T.gather_rows(feats, idx)
        cosm = T.cosine_matrix(fd, Tensor(topo.anchors))
        arows = topo.adjacency[ys[idx]] if use_adjacency \
            else np.zeros((len(idx), topo.anchors.shape[0]))
        w = T.softmax((cosm + Tensor(arows)) * 0.5, axis=-1)
        agg = w @ Tensor(topo.anchors)
        pieces.append(fd * cfg.phi + agg * (1.0 - cfg.phi))
        orders.append(idx)
    stacked = T.concat(pieces, axis=0)
    order = np.concatenate(orders)
    inverse = np.empty(b, dtype=int)
    inverse[order] = np.arange(b)
    return T.gather_rows(stacked, inverse)


def local_anchors(feats, ys, num_classes):
    """Per-class means of the rows present in the batch -> dict class -> row."""
    ys = np.asarray(ys)
    out = {}
    for c in range(num_classes):
        idx = np.flatnonzero(ys == c)
        if len(idx):
            out[c] = T.tmean(T.gather_rows(feats, idx), axis=0, keepdims=True)
    return out


def composed_current_anchors(topo, feats, ys, phi):
    """Differentiable current anchors: phi * c_local + (1-phi) * detached EMA
    history; classes absent from the batch keep their previous anchor."""
    k = topo.anchors.shape[0]
    locals_ = local_anchors(feats, ys, k)
    rows = []
    for c in range(k):
        prev = Tensor(topo.anchors[c][None, :])
        if c in locals_:
            rows.append(locals_[c] * phi + prev * (1.0 - phi))
        else:
            rows.append(prev)
    return T.concat(rows, axis=0)


def update_anchors(topo, feats, ys, cfg=None, ds=None):
    """EMA anchor update from (detached) aggregated batch features, then
    rebuild the adjacency from the new anchors. Advances the iteration."""
    cfg = cfg or AggregationConfig()
    cfg.validate()
    feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    ys = np.asarray(ys)
    if ds is not None and len(ds) and not np.all(np.asarray(ds) == topo.domain):
        raise ContractError(
            f"update_anchors: batch contains samples outside domain {topo.domain}")
    if feats.shape[0] != ys.shape[0]:
        raise ContractError("update_anchors: feature/label count mismatch")
    k = topo.anchors.shape[0]
    if len(ys) and (ys.min() < 0 or ys.max() >= k):
        raise ContractError("update_anchors: class label out of range")
    new_anchors = topo.anchors.copy()
    for c in range(k):
        rows = feats[ys == c]
        if len(rows):
            new_anchors[c] = cfg.phi * rows.mean(axis=0) \
                + (1.0 - cfg.phi) * topo.anchors[c]
    topo.prev_anchors = topo.anchors
    topo.anchors = new_anchors
    topo.sigma2 = median_bandwidth(new_anchors)
    topo.adjacency = adjacency_from_anchors(new_anchors, topo.sigma2)
    topo.iteration += 1
    return topo


def bipartite_affinity(prev_a, cur_a, prev_b, cur_b, cross_model=True):
    """Affinity[i,j] = mean of the two temporal anchor cosines, times the
    cross-domain cosine of current anchors. Works on Tensors (differentiable)
    or arrays."""
    prev_a, cur_a = Tensor._lift(prev_a), Tensor._lift(cur_a)
    prev_b, cur_b = Tensor._lift(prev_b), Tensor._lift(cur_b)
    k = cur_a.data.shape[0]
    cross = T.cosine_matrix(cur_a, cur_b)
    if not cross_model:
        return cross
    ti = T.reshape(T.cosine_rows(prev_a, cur_a), (k, 1))
    tj = T.reshape(T.cosine_rows(prev_b, cur_b), (1, -1))
    return (ti + tj) * 0.5 * cross


def assemble_block(affinity):
    """[[0, A], [A^T, 0]] with negative entries clamped to zero."""
    aff = T.relu(Tensor._lift(affinity))
    k, m = aff.data.shape
    top = T.concat([Tensor(np.zeros((k, k))), aff], axis=1)
    bottom = T.concat([T.transpose(aff), Tensor(np.zeros((m, m)))], axis=1)
    return T.concat([top, bottom], axis=0)


def build_bipartite(topo_a, topo_b, cross_model=True):
    if topo_a.iteration != topo_b.iteration:
        raise ContractError(
            f"bipartite topologies at different iterations: "
            f"{topo_a.iteration} vs {topo_b.iteration}")
    if topo_a.iteration < 1:
        raise ContractError("bipartite graph needs at least one anchor update")
    aff = bipartite_affinity(topo_a.prev_anchors, topo_a.anchors,
                             topo_b.prev_anchors, topo_b.anchors,
                             cross_model=cross_model)
    return BipartiteGraph(domain_pair=(topo_a.domain, topo_b.domain),
                          affinity=aff.data,
                          block=assemble_block(aff).data)


def ccr_loss(z, cfg=None):
    """Matched-class squared distances plus a margin hinge on all
    mismatched cross-domain pairs. Rows 0..K-1 belong to the first domain,
    rows K..2K-1 to the second."""
    cfg = cfg or CcrConfig()
    cfg.validate()
    z = Tensor._lift(z)
    n = z.data.shape[0]
    if n % 2 != 0:
        raise ContractError(f"ccr_loss expects 2K rows, got {n}")
    k = n // 2
    za = T.gather_rows(z, np.arange(k))
    zb = T.gather_rows(z, np.arange(k, 2 * k))
    matched = T.tsum(T.sq_dist_rows(za, zb))
    if k == 1:
        return matched
    na = T.tsum(za * za, axis=1, keepdims=True)          # [K,1]
    nb = T.tsum(zb * zb, axis=1, keepdims=True)          # [K,1]
    d2 = na + T.transpose(nb) - (za @ T.transpose(zb)) * 2.0
    hinge = T.relu(Tensor(np.full((k, k), cfg.margin)) - d2)
    off_diag = Tensor(1.0 - np.eye(k))
    return matched + T.tsum(hinge * off_diag)


def astr_loss(topologies, composed, bgcn, ccr_cfg=None, domains=None,
              cross_model=True, cross_domain=True, graph_structure=True):
    """lambda-weighted mean consistency loss over source-domain pairs.

    ``composed`` maps domain -> differentiable current-anchor Tensor; the
    stored ``prev_anchors`` of each topology provide the temporal reference.
    """
    ccr_cfg = ccr_cfg or CcrConfig()
    ccr_cfg.validate()
    doms = sorted(topologies if domains is None else domains)
    if len(doms) < 2:
        raise ContractError("astr_loss needs at least two source domains")
    if ccr_cfg.loss_weight == 0.0:
        return Tensor(0.0)
    if cross_domain:
        pairs = [(a, b) for i, a in enumerate(doms) for b in doms[i + 1:]]
    else:
        pairs = [(d, d) for d in doms]
    total = Tensor(0.0)
    for da, db in pairs:
        cur_a, cur_b = composed[da], composed[db]
        prev_a = Tensor(topologies[da].prev_anchors)
        prev_b = Tensor(topologies[db].prev_anchors)
        if graph_structure:
            aff = bipartite_affinity(prev_a, cur_a, prev_b, cur_b,
                                     cross_model=cross_model)
            block = assemble_block(aff)
            nodes = T.concat([cur_a, cur_b], axis=0)
            z = bgcn_forward(nodes, block, bgcn)
        else:
            z = T.concat([cur_a, cur_b], axis=0)
        total = total + ccr_loss(z, ccr_cfg)
    return total * (ccr_cfg.loss_weight / len(pairs))
