import copy
import json
import os

import numpy as np
import pytest

from mire import astr, cdm, pipeline, synthdata
from mire.errors import ConfigError
from mire.nets import ModelBundle
from mire.pipeline import (ABLATION_TABLE, AblationFlags, TrainConfig,
                           deepall_continuation, evaluate_accuracy,
                           evaluate_lodo, phase0_pretrain, phase1_mix,
                           phase2_deepall, phase3_mire, run_fold)


def states_equal(a, b):
    return a.keys() == b.keys() and \
        all(a[k].tobytes() == b[k].tobytes() for k in a)


# -- configuration ------------------------------------------------------------

def test_epoch_split():
    cfg = TrainConfig(epochs=30)
    assert cfg.phase2_epochs == 15 and cfg.phase3_epochs == 15
    odd = TrainConfig(epochs=7)
    assert odd.phase2_epochs == 3 and odd.phase3_epochs == 4
    assert odd.phase2_epochs + odd.phase3_epochs == 7


def test_paper_scale_defaults():
    cfg = TrainConfig.paper_scale()
    assert cfg.epochs == 100
    assert len(cfg.seeds) == 10
    assert cfg.batch_size == 16 and cfg.phi == 0.5 and cfg.lam == 0.1
    assert cfg.xi == 2.0 and cfg.threshold == 0.2 and cfg.crop_ratio == 1 / 8
    assert cfg.momentum == 0.9 and cfg.weight_decay == 5e-4


def test_flag_reroutes():
    cfg = TrainConfig(flags=AblationFlags(no_feature_aggregation=True))
    assert cfg.agg_config().phi == 1.0
    assert cfg.ema_config().phi == 0.5
    cfg = TrainConfig(flags=AblationFlags(no_astr=True))
    assert cfg.ccr_config().loss_weight == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


# -- phase 0 ------------------------------------------------------------------

def test_phase0_beats_chance(tiny_bundle, tiny_cfg, tiny_nets):
    spec = tiny_bundle.spec
    train = tiny_bundle.all_samples([0, 1], split="train")
    cls_acc = evaluate_accuracy(tiny_nets, train)
    dom_acc = evaluate_accuracy(tiny_nets, train, label="d",
                                domain_map={0: 0, 1: 1})
    assert cls_acc > 100.0 / spec.num_classes
    assert dom_acc > 100.0 / 2


def test_phase0_deterministic(tiny_bundle, tiny_cfg, tiny_nets):
    again = phase0_pretrain(tiny_bundle, tiny_cfg, 0, [0, 1])
    assert states_equal(tiny_nets.state_arrays(), again.state_arrays())


def test_phase0_single_domain_rejected(tiny_bundle, tiny_cfg):
    with pytest.raises(ConfigError):
        phase0_pretrain(tiny_bundle, tiny_cfg, 0, [0])


# -- phase 1 ------------------------------------------------------------------

def test_phase1_no_cdm_identity(tiny_bundle, tiny_cfg, tiny_nets):
    cfg = copy.deepcopy(tiny_cfg)
    cfg.flags.no_cdm = True
    out = phase1_mix(tiny_bundle, tiny_nets, cfg, [0, 1])
    assert out is tiny_bundle


def test_phase1_count_and_flags(tiny_bundle, tiny_cfg, tiny_nets):
    out = phase1_mix(tiny_bundle, tiny_nets, tiny_cfg, [0, 1])
    per_domain = tiny_bundle.spec.samples_per_domain
    assert cdm.count_mixed(out) == (2 - 1) * 2 * per_domain

    cfg = copy.deepcopy(tiny_cfg)
    cfg.flags.invert_md = True
    flipped = phase1_mix(tiny_bundle, tiny_nets, cfg, [0, 1])
    pairs = zip([s for s in out.all_samples() if s.provenance],
                [s for s in flipped.all_samples() if s.provenance])
    assert any(a.image.tobytes() != b.image.tobytes() for a, b in pairs)


def test_phase1_conflicting_flags(tiny_bundle, tiny_cfg, tiny_nets):
    cfg = copy.deepcopy(tiny_cfg)
    cfg.flags.no_mc = cfg.flags.no_md = True
    with pytest.raises(ConfigError):
        phase1_mix(tiny_bundle, tiny_nets, cfg, [0, 1])


# -- phases 2 and 3 -----------------------------------------------------------

@pytest.fixture(scope="module")
def p2(tiny_bundle, tiny_cfg):
    return phase2_deepall(tiny_bundle, tiny_cfg, 0, [0, 1])


def test_phase2_outputs(tiny_bundle, tiny_cfg, p2):
    spec = tiny_bundle.spec
    assert sorted(p2["topologies"]) == [0, 1]
    for topo in p2["topologies"].values():
        assert topo.anchors.shape == (spec.num_classes, tiny_cfg.feature_dim)
        assert topo.iteration == 0
    assert p2["best_epoch"] == int(np.argmax(p2["val_curve"]))
    assert len(p2["val_curve"]) == tiny_cfg.phase2_epochs


def test_phase2_deterministic(tiny_bundle, tiny_cfg, p2):
    again = phase2_deepall(tiny_bundle, tiny_cfg, 0, [0, 1])
    assert states_equal(p2["best_state"], again["best_state"])
    for d in p2["topologies"]:
        assert p2["topologies"][d].anchors.tobytes() == \
            again["topologies"][d].anchors.tobytes()


def test_phase3_fully_ablated_matches_continuation(tiny_bundle, tiny_cfg, p2):
    cfg = copy.deepcopy(tiny_cfg)
    cfg.lam = 0.0
    cfg.phi = 1.0
    reference = phase2_deepall(tiny_bundle, cfg, 0, [0, 1])
    cont = deepall_continuation(reference["nets"], tiny_bundle, cfg, 0, [0, 1],
                                cfg.phase3_epochs)

    replay = phase2_deepall(tiny_bundle, cfg, 0, [0, 1])
    p3 = phase3_mire(tiny_bundle, replay["nets"], replay["topologies"], cfg,
                     0, [0, 1])
    assert p3["train_cls"] == cont["train_cls"]
    assert p3["val_curve"] == cont["val_curve"]
    assert states_equal(replay["nets"].state_arrays(),
                        reference["nets"].state_arrays())


def test_phase3_invariants(tiny_bundle, tiny_cfg, p2):
    cfg = copy.deepcopy(tiny_cfg)
    spec = tiny_bundle.spec
    feature_cap = []
    records = []

    def callback(step, topologies, info):
        records.append(info["ccr_loss"])
        feature_cap.append(np.linalg.norm(info["feats"], axis=1).max())
        for topo in topologies.values():
            assert topo.iteration == step
            adj = topo.adjacency
            assert np.array_equal(adj, adj.T)
            assert np.allclose(np.diag(adj), 1.0, atol=0)
            recomputed = astr.adjacency_from_anchors(topo.anchors, topo.sigma2)
            assert np.abs(adj - recomputed).max() < 1e-12

    replay = phase2_deepall(tiny_bundle, cfg, 0, [0, 1])
    anchors_before = {d: t.anchors.copy()
                      for d, t in replay["topologies"].items()}
    p3 = phase3_mire(tiny_bundle, replay["nets"], replay["topologies"], cfg,
                     0, [0, 1], step_callback=callback)
    assert len(records) > 0
    assert all(np.isfinite(v) and v >= 0.0 for v in records)
    assert len(p3["val_curve"]) == cfg.phase3_epochs
    # single-update anchor step is bounded by the EMA algebra
    for d, topo in p3["topologies"].items():
        step_norm = np.linalg.norm(topo.anchors - topo.prev_anchors, axis=1)
        bound = cfg.phi * 2.0 * max(feature_cap)
        assert step_norm.max() <= bound + 1e-9
        assert topo.anchors.tobytes() != anchors_before[d].tobytes()


def test_phase3_ablation_flags_change_losses(tiny_bundle, tiny_cfg, p2):
    def first_losses(**flag_kw):
        cfg = copy.deepcopy(tiny_cfg)
        for k, v in flag_kw.items():
            setattr(cfg.flags, k, v)
        replay = phase2_deepall(tiny_bundle, cfg, 0, [0, 1])
        seen = []

        def callback(step, topologies, info):
            seen.append((info["cls_loss"], info["ccr_loss"]))

        phase3_mire(tiny_bundle, replay["nets"], replay["topologies"], cfg,
                    0, [0, 1], step_callback=callback)
        return seen

    base = first_losses()
    for flag in ("no_astr", "no_cross_domain", "no_cross_model",
                 "no_graph_structure", "no_feature_aggregation"):
        assert first_losses(**{flag: True}) != base, flag


# -- fold orchestration -------------------------------------------------------

def test_run_fold_artifacts(tmp_path):
    spec = synthdata.DatasetSpec(num_classes=2, num_domains=3,
                                 samples_per_domain=10, seed=9)
    cfg = TrainConfig(epochs=2, phase0_epochs=1, seeds=(0,))
    run_dir = os.path.join(tmp_path, "run")
    result = run_fold(spec, cfg, 2, 0, run_dir=run_dir)
    assert 0.0 <= result["test_accuracy"] <= 100.0
    assert 0.0 <= result["deepall_test_accuracy"] <= 100.0
    for sub in ("phase0/checkpoint", "phase2/checkpoint",
                "phase3/checkpoint", "phase3/topology"):
        assert os.path.isdir(os.path.join(run_dir, sub)), sub
    with open(os.path.join(run_dir, "fold.json")) as fh:
        stored = json.load(fh)
    assert stored["test_accuracy"] == result["test_accuracy"]


def test_evaluate_lodo_structure(tmp_path):
    spec = synthdata.DatasetSpec(num_classes=2, num_domains=3,
                                 samples_per_domain=10, seed=13)
    cfg = TrainConfig(epochs=2, phase0_epochs=1, seeds=(0, 1))
    rep = evaluate_lodo(spec, cfg, run_dir=os.path.join(tmp_path, "lodo"),
                        targets=[0, 1])
    assert len(rep.rows) == 2 * 2               # targets x seeds
    assert set(rep.summary) == {0, 1, "average"}
    sub = [r["test_accuracy"] for r in rep.rows if r["target_domain"] == 0]
    assert abs(rep.summary[0]["mire_mean"] - np.mean(sub)) < 1e-12
    assert abs(rep.summary[0]["mire_std"] - np.std(sub, ddof=1)) < 1e-12
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == \
        "target_domain,seed,deepall_acc,mire_acc,best_epoch"
    assert sum("mean±std" in line for line in csv_text.splitlines()) == 3
    assert os.path.exists(os.path.join(tmp_path, "lodo", "metrics.csv"))
    assert os.path.exists(os.path.join(tmp_path, "lodo", "report.json"))


def test_ablation_table_rows():
    names = [name for name, _ in ABLATION_TABLE]
    assert len(names) == 12
    assert names[0] == "DeepAll" and names[-1] == "MiRe"
    flags = AblationFlags.names()
    for _, overrides in ABLATION_TABLE:
        assert all(k in flags for k in overrides)
    # every single-flag ablation appears in the table
    covered = {k for _, ov in ABLATION_TABLE for k in ov}
    assert covered == set(flags)
