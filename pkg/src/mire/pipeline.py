"""Four-phase training protocol and leave-one-domain-out evaluation.

Phase 0 trains the shared encoder with class and domain heads on the original
source images (the saliency maps need both heads). Phase 1 runs the data
mixing over the sources. Phase 2 trains a fresh model with plain cross-entropy
on originals plus mixed images and computes the initial anchor topologies.
Phase 3 continues from the phase-2 weights with feature aggregation, anchor
refreshes, and the consistency loss. Held-out evaluation always uses raw
encoder features through the class head.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import astr, cdm, synthdata
from . import tensor as T
from .errors import ConfigError, NumericError
from .nets import ModelBundle, save_checkpoint
from .saliency import SaliencyConfig
from .tensor import Sgd, Tensor

PAPER_EPOCHS = 100
PAPER_SEED_COUNT = 10
DESK_EPOCHS = 30
DESK_SEED_COUNT = 5


@dataclass
class AblationFlags:
    no_cdm: bool = False
    no_mc: bool = False
    no_md: bool = False
    no_blur: bool = False
    invert_md: bool = False
    no_astr: bool = False
    no_cross_domain: bool = False
    no_cross_model: bool = False
    no_graph_structure: bool = False
    no_feature_aggregation: bool = False

    @staticmethod
    def names():
        return list(AblationFlags().__dict__)


@dataclass
class TrainConfig:
    # [paper] provenance: batch 16, phi 0.5, lambda 0.1, xi 2, threshold 0.2,
    # crop ratio 1/8, momentum 0.9, weight decay 5e-4, 100 epochs.
    # [chosen]: lr (paper silent), desk-scale epoch/seed counts, phase0 epochs.
    epochs: int = DESK_EPOCHS
    phase0_epochs: int = 5
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seeds: tuple = tuple(range(DESK_SEED_COUNT))
    phi: float = 0.5
    lam: float = 0.1
    xi: float = 2.0
    threshold: float = 0.2
    crop_ratio: float = 1.0 / 8.0
    feature_dim: int = 64
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self):
        if self.epochs < 1 or self.phase0_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def phase2_epochs(self):
        return max(1, self.epochs // 2)

    @property
    def phase3_epochs(self):
        return max(1, self.epochs - self.epochs // 2)

    @classmethod
    def paper_scale(cls, **kw):
        kw.setdefault("epochs", PAPER_EPOCHS)
        kw.setdefault("seeds", tuple(range(PAPER_SEED_COUNT)))
        return cls(**kw)

    def agg_config(self):
        phi = 1.0 if self.flags.no_feature_aggregation else self.phi
        return astr.AggregationConfig(phi=phi)

    def ema_config(self):
        return astr.AggregationConfig(phi=self.phi)

    def ccr_config(self):
        lam = 0.0 if self.flags.no_astr else self.lam
        return astr.CcrConfig(margin=self.xi, loss_weight=lam)

    def mix_config(self):
        return cdm.MixConfig(crop_area_ratio=self.crop_ratio)

    def saliency_config(self):
        return SaliencyConfig(threshold=self.threshold)


def _finite_or_abort(value, phase):
    if not np.isfinite(value):
        raise NumericError(f"{phase}: training diverged (non-finite loss)")


def evaluate_accuracy(nets, samples, batch_size=64, label="y", domain_map=None):
    """Top-1 accuracy in percent of the raw-feature classifier on samples."""
    correct = 0
    head = nets.class_head if label == "y" else nets.domain_head
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([s.image for s in chunk])
            if label == "y":
                targets = np.array([s.y for s in chunk])
            else:
                targets = np.array([domain_map[s.d] for s in chunk])
            logits = head.classify(nets.encoder.encode(images))
            correct += int((logits.data.argmax(axis=1) == targets).sum())
    return 100.0 * correct / max(1, len(samples))


def phase0_pretrain(bundle, cfg, seed, source_domains):
    """Shared encoder + class head + domain head on original source data."""
    cfg.validate()
    if len(source_domains) < 2:
        raise ConfigError("phase 0 needs at least two source domains for the "
                          "domain head")
    domain_map = {d: i for i, d in enumerate(sorted(source_domains))}
    nets = ModelBundle(bundle.spec.num_classes, len(source_domains),
                       feature_dim=cfg.feature_dim, seed=seed * 7919 + 11)
    params = {**nets.encoder.params, **{f"c_{k}": v for k, v in
                                        nets.class_head.params.items()},
              **{f"d_{k}": v for k, v in nets.domain_head.params.items()}}
    opt = Sgd(params.values(), lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    for epoch in range(cfg.phase0_epochs):
        for images, ys, ds, _ in synthdata.batches(
                bundle, cfg.batch_size, seed=seed, epoch=epoch,
                domains=source_domains, split="train"):
            feats = nets.encoder.encode(images)
            loss = T.cross_entropy(nets.class_head.classify(feats), ys) \
                + T.cross_entropy(nets.domain_head.classify(feats),
                                  np.array([domain_map[d] for d in ds]))
            _finite_or_abort(loss.item(), "phase0")
            T.backward(loss)
            opt.step()
    return nets


def phase1_mix(bundle, nets, cfg, source_domains):
    """Dataset augmentation honoring the mask ablation flags."""
    if cfg.flags.no_cdm:
        return bundle
    if cfg.flags.no_mc and cfg.flags.no_md:
        raise ConfigError("no_mc and no_md cannot both be set")
    mask_mode = "default"
    if cfg.flags.no_mc:
        mask_mode = "no_mc"
    elif cfg.flags.no_md:
        mask_mode = "no_md"
    elif cfg.flags.invert_md:
        mask_mode = "invert_md"
    return cdm.augment_dataset(
        bundle, nets, cfg=cfg.mix_config(), sal_cfg=cfg.saliency_config(),
        source_domains=source_domains, mask_mode=mask_mode,
        blur=not cfg.flags.no_blur)


def _train_cls_only(nets, bundle, cfg, seed, source_domains, epochs, opt,
                    epoch_offset=0):
    """Plain cross-entropy loop shared by phase 2 and the DeepAll
    continuation; returns (per-epoch mean losses, per-epoch val accuracy)."""
    val_samples = bundle.all_samples(source_domains, split="val")
    losses, val_curve, states = [], [], []
    for epoch in range(epochs):
        epoch_losses = []
        for images, ys, _, _ in synthdata.batches(
                bundle, cfg.batch_size, seed=seed, epoch=epoch_offset + epoch,
                domains=source_domains, split="train"):
            feats = nets.encoder.encode(images)
            loss = T.cross_entropy(nets.class_head.classify(feats), ys)
            _finite_or_abort(loss.item(), "cls training")
            epoch_losses.append(loss.item())
            T.backward(loss)
            opt.step()
        losses.append(float(np.mean(epoch_losses)))
        val_curve.append(evaluate_accuracy(nets, val_samples))
        states.append(nets.state_arrays())
    return losses, val_curve, states


def phase2_deepall(bundle, cfg, seed, source_domains):
    """Fresh encoder + class head on originals plus mixed; initial anchors."""
    cfg.validate()
    nets = ModelBundle(bundle.spec.num_classes, len(source_domains),
                       feature_dim=cfg.feature_dim, seed=seed * 7919 + 211)
    opt = Sgd(list(nets.encoder.params.values())
              + list(nets.class_head.params.values()),
              lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    losses, val_curve, states = _train_cls_only(
        nets, bundle, cfg, seed + 1, source_domains, cfg.phase2_epochs, opt)
    best_epoch = int(np.argmax(val_curve))
    topologies = astr.init_topology(bundle, nets, source_domains)
    return {"nets": nets, "topologies": topologies, "train_cls": losses,
            "val_curve": val_curve, "best_epoch": best_epoch,
            "best_state": states[best_epoch]}


def deepall_continuation(nets, bundle, cfg, seed, source_domains, epochs):
    """Reference continuation of phase 2 (cross-entropy only), used to check
    that the fully ablated phase 3 reduces to the baseline."""
    opt = Sgd(list(nets.encoder.params.values())
              + list(nets.class_head.params.values()),
              lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    losses, val_curve, states = _train_cls_only(
        nets, bundle, cfg, seed + 2, source_domains, epochs, opt)
    return {"train_cls": losses, "val_curve": val_curve, "states": states}


def phase3_mire(bundle, nets, topologies, cfg, seed, source_domains,
                step_callback=None):
    """Aggregation + anchor refresh + consistency loss, warm-started from the
    phase-2 weights. Returns per-epoch losses, val curve, and the best state."""
    cfg.validate()
    flags = cfg.flags
    agg_cfg = cfg.agg_config()
    ema_cfg = cfg.ema_config()
    ccr_cfg = cfg.ccr_config()
    use_astr = not flags.no_astr
    use_bgcn = use_astr and not flags.no_graph_structure and ccr_cfg.loss_weight > 0
    params = list(nets.encoder.params.values()) \
        + list(nets.class_head.params.values())
    if use_bgcn:
        params += list(nets.bgcn.params.values())
    opt = Sgd(params, lr=cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    val_samples = bundle.all_samples(source_domains, split="val")
    cls_losses, ccr_losses, val_curve = [], [], []
    best_state, best_acc, best_epoch = None, -1.0, -1
    step = 0
    for epoch in range(cfg.phase3_epochs):
        e_cls, e_ccr = [], []
        for images, ys, ds, _ in synthdata.batches(
                bundle, cfg.batch_size, seed=seed + 2, epoch=epoch,
                domains=source_domains, split="train"):
            feats = nets.encoder.encode(images)
            if use_astr and agg_cfg.phi < 1.0:
                fprime = astr.aggregate_batch(
                    feats, ys, ds, topologies, agg_cfg,
                    use_adjacency=not flags.no_graph_structure)
            else:
                fprime = feats
            cls_loss = T.cross_entropy(nets.class_head.classify(fprime), ys)
            if use_astr:
                composed = {}
                for d in sorted(topologies):
                    idx = np.flatnonzero(ds == d)
                    rows = T.gather_rows(fprime, idx) if len(idx) else None
                    composed[d] = astr.composed_current_anchors(
                        topologies[d], rows, ys[idx] if len(idx) else [],
                        ema_cfg.phi) if rows is not None \
                        else Tensor(topologies[d].anchors.copy())
                    astr.update_anchors(
                        topologies[d], fprime.data[idx], ys[idx], ema_cfg,
                        ds=ds[idx])
                ccr = astr.astr_loss(
                    topologies, composed, nets.bgcn, ccr_cfg,
                    cross_model=not flags.no_cross_model,
                    cross_domain=not flags.no_cross_domain,
                    graph_structure=not flags.no_graph_structure)
            else:
                ccr = Tensor(0.0)
            total = cls_loss + ccr if use_astr and ccr_cfg.loss_weight > 0 \
                else cls_loss
            _finite_or_abort(total.item(), "phase3")
            e_cls.append(cls_loss.item())
            e_ccr.append(ccr.item())
            T.backward(total)
            opt.step()
            step += 1
            if step_callback is not None:
                step_callback(step, topologies,
                              {"feats": feats.data.copy(), "ys": ys, "ds": ds,
                               "cls_loss": e_cls[-1], "ccr_loss": e_ccr[-1]})
        cls_losses.append(float(np.mean(e_cls)))
        ccr_losses.append(float(np.mean(e_ccr)))
        acc = evaluate_accuracy(nets, val_samples)
        val_curve.append(acc)
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, nets.state_arrays()
    return {"train_cls": cls_losses, "train_ccr": ccr_losses,
            "val_curve": val_curve, "best_epoch": best_epoch,
            "best_state": best_state, "topologies": topologies}


def run_fold(spec, cfg, target_domain, seed, run_dir=None):
    """Phases 0-3 on the N-1 source domains, then test on the held-out one."""
    cfg.validate()
    if not 0 <= target_domain < spec.num_domains:
        raise ConfigError(f"target domain {target_domain} out of range for "
                          f"{spec.num_domains} domains")
    bundle = synthdata.generate(spec, heldout_domain=target_domain)
    sources = [d for d in range(spec.num_domains) if d != target_domain]
    test_samples = bundle.domain_samples(target_domain)

    nets0 = phase0_pretrain(bundle, cfg, seed, sources)
    augmented = phase1_mix(bundle, nets0, cfg, sources)
    p2 = phase2_deepall(augmented, cfg, seed, sources)

    deepall_nets = ModelBundle(spec.num_classes, len(sources),
                               feature_dim=cfg.feature_dim)
    deepall_nets.load_state_arrays(p2["best_state"])
    deepall_acc = evaluate_accuracy(deepall_nets, test_samples)

    p3 = phase3_mire(augmented, p2["nets"], p2["topologies"], cfg, seed, sources)
    final_nets = ModelBundle(spec.num_classes, len(sources),
                             feature_dim=cfg.feature_dim)
    final_nets.load_state_arrays(p3["best_state"])
    mire_acc = evaluate_accuracy(final_nets, test_samples)

    result = {
        "target_domain": target_domain,
        "seed": seed,
        "deepall_val_curve": p2["val_curve"],
        "deepall_best_epoch": p2["best_epoch"],
        "deepall_test_accuracy": deepall_acc,
        "val_curve": p3["val_curve"],
        "best_epoch": p3["best_epoch"],
        "test_accuracy": mire_acc,
        "train_cls": p2["train_cls"] + p3["train_cls"],
        "train_ccr": p3["train_ccr"],
    }
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        save_checkpoint(os.path.join(run_dir, "phase0", "checkpoint"), nets0)
        save_checkpoint(os.path.join(run_dir, "phase2", "checkpoint"),
                        deepall_nets)
        save_checkpoint(os.path.join(run_dir, "phase3", "checkpoint"),
                        final_nets,
                        extra={"best_epoch": p3["best_epoch"]})
        save_topologies(os.path.join(run_dir, "phase3", "topology"),
                        p3["topologies"])
        with open(os.path.join(run_dir, "fold.json"), "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    return result


def save_topologies(path, topologies):
    os.makedirs(path, exist_ok=True)
    header = {}
    with open(os.path.join(path, "topology.bin"), "wb") as fh:
        for d in sorted(topologies):
            topo = topologies[d]
            header[str(d)] = {"offset": fh.tell(), "iteration": topo.iteration,
                              "sigma2": topo.sigma2}
            T.write_array(fh, topo.anchors)
            T.write_array(fh, topo.prev_anchors)
            T.write_array(fh, topo.adjacency)
    with open(os.path.join(path, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


@dataclass
class MetricsReport:
    spec: dict
    config: dict
    rows: list                    # per (target, seed) result dicts
    summary: dict                 # per target: mean/std for deepall and mire

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["target_domain", "seed", "deepall_acc", "mire_acc",
                         "best_epoch"])
        for r in self.rows:
            writer.writerow([r["target_domain"], r["seed"],
                             f"{r['deepall_test_accuracy']:.6f}",
                             f"{r['test_accuracy']:.6f}", r["best_epoch"]])
        for target, s in sorted(self.summary.items(), key=lambda kv: str(kv[0])):
            writer.writerow([target, "mean±std",
                             f"{s['deepall_mean']:.6f}±{s['deepall_std']:.6f}",
                             f"{s['mire_mean']:.6f}±{s['mire_std']:.6f}", ""])
        return buf.getvalue()


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def evaluate_lodo(spec, cfg, run_dir=None, targets=None):
    """Leave-one-domain-out sweep over targets and seeds."""
    spec.validate()
    cfg.validate()
    targets = list(range(spec.num_domains)) if targets is None else list(targets)
    rows = []
    for target in targets:
        for seed in cfg.seeds:
            fold_dir = os.path.join(run_dir, f"target{target}_seed{seed}") \
                if run_dir else None
            rows.append(run_fold(spec, cfg, target, seed, run_dir=fold_dir))
    summary = {}
    for target in targets:
        sub = [r for r in rows if r["target_domain"] == target]
        dm, dstd = _mean_std([r["deepall_test_accuracy"] for r in sub])
        mm, mstd = _mean_std([r["test_accuracy"] for r in sub])
        summary[target] = {"deepall_mean": dm, "deepall_std": dstd,
                           "mire_mean": mm, "mire_std": mstd}
    all_d, _ = _mean_std([r["deepall_test_accuracy"] for r in rows])
    all_m, _ = _mean_std([r["test_accuracy"] for r in rows])
    summary["average"] = {"deepall_mean": all_d, "deepall_std": 0.0,
                          "mire_mean": all_m, "mire_std": 0.0}
    report = MetricsReport(spec=asdict(spec), config=_config_dict(cfg),
                           rows=rows, summary=summary)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as fh:
            json.dump(report.config, fh, indent=2, sort_keys=True)
        with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(run_dir, "report.json"), "w") as fh:
            json.dump({"spec": report.spec, "rows": report.rows,
                       "summary": {str(k): v for k, v in report.summary.items()}},
                      fh, indent=2, sort_keys=True)
    return report


def _config_dict(cfg):
    d = asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    return d


ABLATION_TABLE = [
    ("DeepAll", {"no_cdm": True, "no_astr": True}),
    ("MiRe w/o CDM", {"no_cdm": True}),
    ("CDM w/o M_c", {"no_mc": True}),
    ("CDM w/o M_d", {"no_md": True}),
    ("CDM w/o Gaussian Blur", {"no_blur": True}),
    ("CDM w/ (1-M_d)", {"invert_md": True}),
    ("MiRe w/o ASTR", {"no_astr": True}),
    ("ASTR w/o Cross-Domain Invariance", {"no_cross_domain": True}),
    ("ASTR w/o Cross-Model Invariance", {"no_cross_model": True}),
    ("ASTR w/o Graph Structure", {"no_graph_structure": True}),
    ("ASTR w/o Feature Aggregation", {"no_feature_aggregation": True}),
    ("MiRe", {}),
]


def ablate(spec, cfg, run_dir=None, targets=None, methods=None):
    """One LODO evaluation per ablation row; returns {method: report}."""
    results = {}
    table = ABLATION_TABLE if methods is None else \
        [(m, f) for m, f in ABLATION_TABLE if m in methods]
    for name, flag_overrides in table:
        sub_cfg = copy.deepcopy(cfg)
        for k, v in flag_overrides.items():
            setattr(sub_cfg.flags, k, v)
        sub_dir = os.path.join(run_dir, name.replace(" ", "_").replace("/", "-")) \
            if run_dir else None
        results[name] = evaluate_lodo(spec, sub_cfg, run_dir=sub_dir,
                                      targets=targets)
    if run_dir:
        table_rows = [{"method": name,
                       "mire_mean": rep.summary["average"]["mire_mean"],
                       "deepall_mean": rep.summary["average"]["deepall_mean"]}
                      for name, rep in results.items()]
        with open(os.path.join(run_dir, "ablation.json"), "w") as fh:
            json.dump(table_rows, fh, indent=2, sort_keys=True)
    return results
