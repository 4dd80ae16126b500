"""Feature extractor, classifier heads, and the bipartite graph conv stack.

The encoder is a small 3-block CNN (8/16/32 channels, 3x3 kernels, relu,
2x average pooling per block) followed by global average pooling and a linear
projection to the feature dimension. The post-relu activations of every conv
block are retained so saliency maps can be taken against them.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .errors import ContractError, FormatError, ShapeError
from .tensor import Tensor

DEFAULT_FEATURE_DIM = 64
ENCODER_WIDTHS = (8, 16, 32)


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderNet:
    """3-block conv encoder; ``encode`` returns [batch, feature_dim] features."""

    def __init__(self, in_channels=3, feature_dim=DEFAULT_FEATURE_DIM, seed=0):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.params = {}
        cin = in_channels
        for i, cout in enumerate(ENCODER_WIDTHS, start=1):
            fan_in = cin * 9
            self.params[f"conv{i}_w"] = Tensor(
                kaiming_uniform(rng, (cout, cin, 3, 3), fan_in), requires_grad=True)
            self.params[f"conv{i}_b"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        self.params["proj_w"] = Tensor(
            kaiming_uniform(rng, (cin, feature_dim), cin), requires_grad=True)
        self.params["proj_b"] = Tensor(np.zeros(feature_dim), requires_grad=True)
        # post-relu conv activations from the most recent encode call
        self.conv_activations = []

    def encode(self, images, retain_activation=None):
        """images: [B,C,H,W] in [0,1] -> features [B, feature_dim].

        ``retain_activation``: index into the conv stack whose post-relu
        activation should keep its gradient after backward (for Grad-CAM).
        """
        if not isinstance(images, Tensor):
            images = Tensor(images)
        if images.data.ndim != 4 or images.data.shape[1] != self.in_channels:
            raise ShapeError(f"encode expects [B,{self.in_channels},H,W] images, "
                             f"got shape {images.data.shape}")
        h = images
        self.conv_activations = []
        for i in range(1, len(ENCODER_WIDTHS) + 1):
            h = T.conv2d(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"],
                         stride=1, padding=1)
            h = T.relu(h)
            if retain_activation is not None and \
                    (i - 1) == retain_activation % len(ENCODER_WIDTHS):
                h.retain_grad = True
            self.conv_activations.append(h)
            h = T.avg_pool2d(h, 2)
        pooled = T.global_avg_pool(h)
        return pooled @ self.params["proj_w"] + self.params["proj_b"]


class ClassifierHead:
    """Linear map from feature space to logits."""

    def __init__(self, in_dim, out_dim, seed=0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = {
            "w": Tensor(kaiming_uniform(rng, (in_dim, out_dim), in_dim),
                        requires_grad=True),
            "b": Tensor(np.zeros(out_dim), requires_grad=True),
        }

    def classify(self, features):
        if features.data.ndim != 2 or features.data.shape[1] != self.in_dim:
            raise ShapeError(f"classify expects [B,{self.in_dim}] features, "
                             f"got shape {features.data.shape}")
        return features @ self.params["w"] + self.params["b"]


class BgcnStack:
    """Stack of graph convolution layers with symmetric normalization."""

    def __init__(self, dim, num_layers=2, seed=0):
        if num_layers < 1:
            raise ContractError("BgcnStack needs at least one layer")
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.num_layers = num_layers
        self.params = {
            f"gc{l}_w": Tensor(kaiming_uniform(rng, (dim, dim), dim),
                               requires_grad=True)
            for l in range(num_layers)
        }


def bgcn_forward(node_feats, adjacency, stack):
    """H_{l+1} = act(D^-1/2 (A+I) D^-1/2 H_l W_l); relu between layers,
    identity after the last. Returns the final [nodes, dim] embedding."""
    if not isinstance(node_feats, Tensor):
        node_feats = Tensor(node_feats)
    if not isinstance(adjacency, Tensor):
        adjacency = Tensor(adjacency)
    n = adjacency.data.shape[0]
    if adjacency.data.ndim != 2 or adjacency.data.shape[1] != n:
        raise ShapeError(f"adjacency must be square, got {adjacency.data.shape}")
    if node_feats.data.shape[0] != n:
        raise ShapeError(f"node count mismatch: features {node_feats.data.shape} "
                         f"vs adjacency {adjacency.data.shape}")
    if np.abs(adjacency.data - adjacency.data.T).max() > 1e-9:
        raise ContractError("bgcn_forward requires a symmetric adjacency")
    if adjacency.data.min() < 0:
        raise ContractError("bgcn_forward requires a non-negative adjacency")

    a_hat = adjacency + Tensor(np.eye(n))
    d_inv_sqrt = T.tsum(a_hat, axis=1, keepdims=True) ** -0.5
    norm = a_hat * d_inv_sqrt * T.transpose(d_inv_sqrt)
    h = node_feats
    for l in range(stack.num_layers):
        h = norm @ h @ stack.params[f"gc{l}_w"]
        if l < stack.num_layers - 1:
            h = T.relu(h)
    return h


class ModelBundle:
    """Shared encoder plus class/domain heads and the BGCN stack."""

    def __init__(self, num_classes, num_domains, feature_dim=DEFAULT_FEATURE_DIM,
                 bgcn_layers=2, seed=0):
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.feature_dim = feature_dim
        self.encoder = EncoderNet(feature_dim=feature_dim, seed=seed)
        self.class_head = ClassifierHead(feature_dim, num_classes, seed=seed + 1)
        self.domain_head = ClassifierHead(feature_dim, num_domains, seed=seed + 2)
        self.bgcn = BgcnStack(feature_dim, num_layers=bgcn_layers, seed=seed + 3)

    def named_params(self):
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("class_head", self.class_head),
                            ("domain_head", self.domain_head), ("bgcn", self.bgcn)):
            for name, p in mod.params.items():
                out[f"{prefix}.{name}"] = p
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.grad = None

    def state_arrays(self):
        return {k: p.data.copy() for k, p in self.named_params().items()}

    def load_state_arrays(self, state):
        for k, p in self.named_params().items():
            if k not in state:
                raise FormatError(f"checkpoint missing parameter '{k}'")
            if state[k].shape != p.data.shape:
                raise FormatError(f"checkpoint parameter '{k}' has shape "
                                  f"{state[k].shape}, expected {p.data.shape}")
            p.data = state[k].copy()


def save_checkpoint(path, bundle, extra=None):
    """Directory checkpoint: manifest.json (name -> shape, offset) + params.bin."""
    os.makedirs(path, exist_ok=True)
    manifest = {"format": "mire-checkpoint-v1",
                "num_classes": bundle.num_classes,
                "num_domains": bundle.num_domains,
                "feature_dim": bundle.feature_dim,
                "bgcn_layers": bundle.bgcn.num_layers,
                "params": {}}
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        for name, p in sorted(bundle.named_params().items()):
            manifest["params"][name] = {"shape": list(p.data.shape),
                                        "offset": fh.tell()}
            T.write_array(fh, p.data)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "mire-checkpoint-v1":
        raise FormatError(f"unknown checkpoint format in {path}")
    bundle = ModelBundle(manifest["num_classes"], manifest["num_domains"],
                         feature_dim=manifest["feature_dim"],
                         bgcn_layers=manifest["bgcn_layers"])
    state = {}
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        for name, meta in manifest["params"].items():
            fh.seek(meta["offset"])
            state[name] = T.read_array(fh)
    bundle.load_state_arrays(state)
    return bundle
