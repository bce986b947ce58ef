"""Acceptance gate: every criterion at its stated tolerance, one printed
pass line each. The end-to-end criteria share one seeded session (master
seed 42, stock defaults) trained through the same code path the CLI uses.
"""
import math
import time

import numpy as np
import pytest

from openworldseg import pipeline
from openworldseg import tensor as T
from openworldseg.anomaly import MixtureConfig, eds_map, eds_sum, mix_maps, mmsp_map
from openworldseg.incremental import pseudo_label_generate
from openworldseg.losses import LossConfig, dce_loss, hybrid_loss, variance_loss
from openworldseg.metrics import aupr, auroc, fpr_at_95_tpr, harmonic_miou
from openworldseg.model import save_checkpoint
from openworldseg.prototypes import class_probabilities, closeset_map, make_prototypes, squared_distances
from openworldseg.runconfig import RunConfig
from openworldseg.tensor import Tensor

from test_losses import fd_grad, loss_reference
from test_metrics import aupr_threshold_enum, auroc_pairwise, fpr95_threshold_enum, random_scored_lists


def _ok(name):
    print(f"ACCEPTANCE PASS: {name}")


# --- criterion: gradient fidelity -----------------------------------------

def test_gradient_fidelity():
    start = time.monotonic()
    rng = np.random.default_rng(1234)
    cfg = LossConfig(lambda_vl=0.01)
    losses = [
        ("dce", dce_loss, lambda *a: loss_reference(*a)[0]),
        ("vl", variance_loss, lambda *a: loss_reference(*a)[1]),
        ("hybrid", hybrid_loss, lambda *a: loss_reference(*a)[2]),
    ]
    for trial in range(100):
        name, fn, ref = losses[trial % 3]
        n = int(rng.choice([2, 3, 5]))
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 5))
        if h * w > 16:
            continue
        protos = make_prototypes(n, 3.0)
        fdata = rng.normal(scale=2.0, size=(n, h, w))
        labels = rng.integers(0, n, size=(h, w)).astype(np.uint8)

        f = Tensor(fdata, requires_grad=True)
        T.backward(fn(f, labels, protos, cfg))
        fd = fd_grad(lambda x: ref(x, labels, protos, cfg.lambda_vl), fdata, h=1e-3)
        scale = max(float(np.max(np.abs(fd))), 1e-6)
        err = float(np.max(np.abs(f.grad - fd))) / scale
        assert err < 1e-3, f"{name} trial {trial}: relative error {err:.2e}"
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"gradient fidelity took {elapsed:.1f}s"
    _ok(f"gradient fidelity (100 instances, <1e-3 rel, {elapsed:.1f}s)")


# --- criterion: probability/close-set consistency ---------------------------

def test_probability_closeset_consistency():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        protos = make_prototypes(n, float(rng.integers(1, 7)))
        feats = rng.normal(scale=3.0, size=(n, 4, 4))
        p = class_probabilities(feats, protos)
        assert np.all(np.abs(p.sum(axis=0) - 1.0) < 1e-6)
        seg = closeset_map(feats, protos)
        d = squared_distances(feats, protos)
        assert np.array_equal(seg, np.argmin(d, axis=0))
    _ok("close-set map == argmin of squared distances; probabilities sum to 1 (1000 maps)")


# --- criterion: distance-sum geometry ---------------------------------------

def test_distance_sum_geometry():
    for n in range(2, 11):
        for t in range(1, 7):
            protos = make_prototypes(n, float(t))
            center = np.full((n, 1, 1), t / n)
            at_proto = np.asarray(protos.base[0]).reshape(n, 1, 1)
            s_center = eds_sum(center, protos)[0, 0]
            s_proto = eds_sum(at_proto, protos)[0, 0]
            assert abs(s_center - s_proto / 2.0) < 1e-6
    rng = np.random.default_rng(5)
    s = rng.uniform(1.0, 90.0, size=(16, 16))
    p = eds_map(s)
    flat_argmax = np.argmax(s)
    assert p.reshape(-1)[flat_argmax] == 0.0
    _ok("S(center) = S(prototype)/2 for N in 2..10, T in 1..6; max-S pixel maps to exactly 0")


# --- criterion: mixture anchors ---------------------------------------------

def test_mixture_anchors():
    cfg = MixtureConfig(beta=20.0, gamma=0.8)
    p_mmsp = np.array([[0.31]])
    p_eds = np.array([[0.8]])
    out = mix_maps(p_eds, p_mmsp, cfg)
    assert out[0, 0] == 0.5 * (0.8 + 0.31)  # alpha exactly one half
    out_top = mix_maps(np.array([[1.0]]), np.array([[0.0]]), cfg)
    alpha = 1.0 / (1.0 + math.exp(-4.0))
    assert abs(out_top[0, 0] - alpha) < 1e-6
    _ok("mixture anchors: alpha(gamma)=0.5 exact; alpha(1.0) = 1/(1+e^-4) within 1e-6")


# --- criterion: ranking-metric oracles ---------------------------------------

def test_metric_oracles():
    start = time.monotonic()
    for scores, labels in random_scored_lists(4242, n_lists=100, max_len=200):
        assert abs(auroc(scores, labels) - auroc_pairwise(scores, labels)) < 1e-9
        assert abs(aupr(scores, labels) - aupr_threshold_enum(scores, labels)) < 1e-9
        assert abs(fpr_at_95_tpr(scores, labels) - fpr95_threshold_enum(scores, labels)) < 1e-9
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"metric oracles took {elapsed:.1f}s"
    _ok(f"AUROC/AUPR/FPR95 match brute-force oracles within 1e-9 (100 lists, {elapsed:.1f}s)")


# --- criterion: harmonic identity --------------------------------------------

def test_harmonic_identity():
    assert abs(harmonic_miou(63.7, 75.7) - 69.2) <= 0.05
    assert abs(harmonic_miou(60.1, 64.5) - 62.2) <= 0.05
    _ok("harmonic identity: (63.7, 75.7) -> 69.2 and (60.1, 64.5) -> 62.2 within 0.05")


# --- criterion: pseudo-label structural identity ------------------------------

def test_pseudo_label_structural_identity():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(0, 4))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        m_in = rng.integers(0, n, size=(h, w)).astype(np.uint8)
        maps = [rng.integers(0, 2, size=(h, w)).astype(np.uint8) for _ in range(k)]
        ann = rng.integers(0, 2, size=(h, w)).astype(np.uint8)
        live = m_in.copy()
        for t, bm in enumerate(maps, start=1):
            live[bm == 1] = n + t - 1
        live[ann == 1] = n + k
        assert np.array_equal(pseudo_label_generate(m_in, maps, ann, n), live)
    hand = pseudo_label_generate(np.array([[0, 1], [2, 0]], dtype=np.uint8),
                                 [np.array([[1, 0], [1, 0]], dtype=np.uint8)],
                                 np.array([[0, 0], [1, 1]], dtype=np.uint8), 3)
    assert np.array_equal(hand, np.array([[3, 1], [4, 4]], dtype=np.uint8))
    _ok("pseudo-label generation == live composition + annotation overwrites (100 stacks + hand trace)")


# --- seeded end-to-end session ------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = RunConfig(dataset_dir=str(root / "data"), checkpoint_dir=str(root / "ckpt"),
                    results_dir=str(root / "results"))
    start = time.monotonic()
    dataset = pipeline.prepare_dataset(cfg)
    model = pipeline.train_base_model(cfg, dataset)
    save_checkpoint(model, cfg.checkpoint_dir)
    protos = make_prototypes(model.n_base, model.t_value)
    closed = pipeline.evaluate_closed(model, protos, dataset.scenes("val"), dataset.in_dist_ids)
    anomaly = pipeline.evaluate_anomaly(model, protos, dataset.scenes("test_ood"),
                                        dataset.ood_ids, cfg)
    elapsed = time.monotonic() - start
    return {"root": root, "cfg": cfg, "dataset": dataset, "model": model,
            "protos": protos, "closed": closed, "anomaly": anomaly, "elapsed": elapsed}


def test_e2e_calibration(e2e):
    miou = e2e["closed"]["miou"]
    eds = e2e["anomaly"]["eds"]["auroc"]
    mmsp = e2e["anomaly"]["mmsp"]["auroc"]
    med = e2e["anomaly"]["median_distance_sum"]
    assert miou >= 0.60, f"val mIoU {miou:.3f} < 0.60"
    assert eds >= 0.85, f"EDS AUROC {eds:.3f} < 0.85"
    assert eds >= mmsp, f"EDS {eds:.3f} below MMSP {mmsp:.3f}"
    assert med["ood"] < med["correct_in_dist"], "distance sums do not separate"
    assert e2e["elapsed"] < 600.0, f"end-to-end took {e2e['elapsed']:.0f}s"
    _ok(f"end-to-end seed 42: val mIoU {miou:.3f} >= 0.60, EDS {eds:.3f} >= 0.85, "
        f"EDS >= MMSP ({mmsp:.3f}), median S ood {med['ood']:.1f} < in-dist "
        f"{med['correct_in_dist']:.1f}, {e2e['elapsed']:.0f}s < 600s")


@pytest.fixture(scope="module")
def incremental_runs(e2e):
    start = time.monotonic()
    cfg_npm = RunConfig(**{**e2e["cfg"].as_dict(), "mode": "npm"})
    npm_model, npm_protos, npm_records, npm_report = pipeline.incremental_step(
        e2e["model"], e2e["dataset"], cfg_npm)
    cfg_plm = RunConfig(**{**e2e["cfg"].as_dict(), "mode": "plm"})
    plm_model, _, plm_records, plm_report = pipeline.incremental_step(
        e2e["model"], e2e["dataset"], cfg_plm)
    elapsed = time.monotonic() - start
    return {"npm_report": npm_report, "plm_report": plm_report, "plm_model": plm_model,
            "npm_protos": npm_protos, "elapsed": elapsed}


def test_incremental_calibration(e2e, incremental_runs):
    npm = incremental_runs["npm_report"]
    plm = incremental_runs["plm_report"]
    assert npm["novel_iou"] is not None and npm["novel_iou"] > 0.30, \
        f"NPM novel IoU {npm['novel_iou']} <= 0.30"
    assert npm["old_miou_drift"] <= 0.030 + 1e-9, \
        f"NPM old-class drift {100 * npm['old_miou_drift']:.1f} points > 3.0"
    assert plm["novel_iou"] is not None and plm["novel_iou"] > 0.30, \
        f"PLM novel IoU {plm['novel_iou']} <= 0.30"
    assert incremental_runs["elapsed"] < 180.0
    _ok(f"incremental seed 42: NPM novel IoU {npm['novel_iou']:.3f} > 0.30 with "
        f"{100 * npm['old_miou_drift']:.2f}-point drift <= 3.0; PLM novel IoU "
        f"{plm['novel_iou']:.3f} > 0.30; {incremental_runs['elapsed']:.0f}s < 180s")


def test_no_forgetting_by_construction(e2e, incremental_runs, tmp_path):
    # NPM: registering prototypes leaves the checkpoint byte-identical
    save_checkpoint(e2e["model"], tmp_path / "before")
    protos = make_prototypes(e2e["model"].n_base, e2e["model"].t_value)
    protos.add_novel(np.full(e2e["model"].n_base, 0.5))
    save_checkpoint(e2e["model"], tmp_path / "after")
    names_before = sorted(p.name for p in (tmp_path / "before").iterdir())
    names_after = sorted(p.name for p in (tmp_path / "after").iterdir())
    assert names_before == names_after
    for name in names_before:
        assert (tmp_path / "before" / name).read_bytes() == (tmp_path / "after" / name).read_bytes()

    # PLM: backbone and prior-head tensors checksum-identical
    base_sums = e2e["model"].tensor_checksums()
    plm_sums = incremental_runs["plm_model"].tensor_checksums()
    for name, digest in base_sums.items():
        assert plm_sums[name] == digest, f"{name} mutated by PLM"
    assert len(plm_sums) == len(base_sums) + 2  # exactly one new head (w, b)
    _ok("no forgetting: NPM checkpoint bytes identical; PLM leaves every prior tensor untouched")
