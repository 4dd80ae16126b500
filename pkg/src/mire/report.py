"""Rendering of run artifacts: loss curves, adjacency heatmaps, 2-D PCA of
features, and a markdown summary. All plots are written as SVG."""

from __future__ import annotations

import json
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import synthdata
from . import tensor as T
from .errors import FormatError
from .nets import load_checkpoint


def pca_2d(features):
    """Deterministic 2-D PCA projection (rows = samples)."""
    centered = features - features.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2]
    # fix sign for determinism
    signs = np.sign(basis[np.arange(2), np.abs(basis).argmax(axis=1)])
    return centered @ (basis * signs[:, None]).T


def plot_loss_curves(fold, out_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(fold["train_cls"], label="classification loss")
    if fold.get("train_ccr"):
        offset = len(fold["train_cls"]) - len(fold["train_ccr"])
        ax.plot(range(offset, len(fold["train_cls"])), fold["train_ccr"],
                label="consistency loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_adjacency(topology_dir, out_path):
    with open(os.path.join(topology_dir, "header.json")) as fh:
        header = json.load(fh)
    doms = sorted(header, key=int)
    fig, axes = plt.subplots(1, len(doms), figsize=(3 * len(doms), 3))
    if len(doms) == 1:
        axes = [axes]
    with open(os.path.join(topology_dir, "topology.bin"), "rb") as fh:
        for ax, d in zip(axes, doms):
            fh.seek(header[d]["offset"])
            T.read_array(fh)            # anchors
            T.read_array(fh)            # previous anchors
            adj = T.read_array(fh)
            im = ax.imshow(adj, vmin=0, vmax=1, cmap="viridis")
            ax.set_title(f"domain {d}")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_feature_pca(nets, samples, out_path, max_points=400):
    samples = samples[:max_points]
    with T.no_grad():
        feats = np.concatenate([
            nets.encoder.encode(np.stack([s.image for s in chunk])).data
            for chunk in [samples[i:i + 64] for i in range(0, len(samples), 64)]])
    proj = pca_2d(feats)
    ys = np.array([s.y for s in samples])
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(proj[:, 0], proj[:, 1], c=ys, cmap="tab10", s=12)
    ax.set_title("feature PCA (color = class)")
    fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def render_run(run_dir, out_dir):
    """Render all artifacts found in a finished fold run directory."""
    os.makedirs(out_dir, exist_ok=True)
    fold_path = os.path.join(run_dir, "fold.json")
    if not os.path.exists(fold_path):
        raise FormatError(f"{run_dir} has no fold.json; run 'mire train' first")
    with open(fold_path) as fh:
        fold = json.load(fh)
    written = []

    path = os.path.join(out_dir, "loss_curves.svg")
    plot_loss_curves(fold, path)
    written.append(path)

    topo_dir = os.path.join(run_dir, "phase3", "topology")
    if os.path.isdir(topo_dir):
        path = os.path.join(out_dir, "adjacency.svg")
        plot_adjacency(topo_dir, path)
        written.append(path)

    ckpt_dir = os.path.join(run_dir, "phase3", "checkpoint")
    spec_path = os.path.join(run_dir, "spec.json")
    if os.path.isdir(ckpt_dir) and os.path.exists(spec_path):
        with open(spec_path) as fh:
            meta = json.load(fh)
        spec = synthdata.DatasetSpec(**meta["spec"])
        bundle = synthdata.generate(spec, heldout_domain=meta["target_domain"])
        nets = load_checkpoint(ckpt_dir)
        path = os.path.join(out_dir, "feature_pca.svg")
        plot_feature_pca(nets, bundle.domain_samples(meta["target_domain"]), path)
        written.append(path)

    summary = os.path.join(out_dir, "summary.md")
    with open(summary, "w") as fh:
        fh.write("# Run summary\n\n")
        fh.write(f"- target domain: {fold['target_domain']}\n")
        fh.write(f"- seed: {fold['seed']}\n")
        fh.write(f"- DeepAll test accuracy: "
                 f"{fold['deepall_test_accuracy']:.2f}%\n")
        fh.write(f"- MiRe test accuracy: {fold['test_accuracy']:.2f}%\n")
        fh.write(f"- selected epoch: {fold['best_epoch']} "
                 f"(best validation accuracy)\n")
    written.append(summary)
    return written


def write_pgm(path, img):
    """8-bit binary PGM of a [H,W] array in [0,1]."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = (arr * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
