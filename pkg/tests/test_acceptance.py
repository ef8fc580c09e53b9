"""Acceptance suite: one group of tests per criterion, summarized at the end of the run."""
import json
import math
import time

import numpy as np
import pytest
import torch

from accident_anticipation.cli import main
from accident_anticipation.data_model import (
    NEGATIVE,
    POSITIVE,
    DatasetManifest,
    VideoSample,
    mix_augment,
    read_bundle,
    write_bundle,
)
from accident_anticipation.evaluation import AnticipationResult, evaluate
from accident_anticipation.geometry import centers, edge_weights, pairwise_distance3d
from accident_anticipation.network import (
    HEAD_KINDS,
    DilatedBlock,
    ModelConfig,
    accident_probs,
    build_model,
    desk_config,
    effective_adjacency,
    gcn_layer,
    prepare_inputs,
)
from accident_anticipation.synthetic import ScenarioParams, gen_dataset
from accident_anticipation.training import (
    TrainConfig,
    batch_loss,
    desk_train_config,
    frame_weights,
    load_checkpoint,
    new_state,
    save_checkpoint,
    train,
)

from conftest import make_manifest, random_bundle
from test_evaluation import brute_force, random_results

D64 = torch.float64
criterion = pytest.mark.criterion

CRITERIA = {
    1: "DAD-shaped bundles (T=100, 19 slots, F=512) run through train and eval",
    2: "synthetic 200/60, F=32, 15 epochs: AP >= 0.90, mTTA >= 0.5 s, <= 15 min on one core",
    3: "float64 finite differences vs autograd, max group-relative error <= 1e-4",
    4: "prefix consistency for every temporal head at t in {1, 3, 7, T}",
    5: "impulse response of the default dilated block spans exactly 8 frames",
    6: "evaluate matches exhaustive threshold enumeration within 1e-9 on 50 random sets",
    7: "formula-level unit checks",
    8: "ablation switches keep output shapes; full AP >= each ablation AP - 0.02",
    9: "augmentation counts follow the floor rule and the test split is untouched",
    10: "bundles and checkpoints round-trip bit-exactly; seeded training is byte-reproducible",
}


# -- 1: full-scale path on DAD-shaped data -----------------------------------


@criterion(1)
def test_full_scale_path(tmp_path, record_property):
    samples, train_ids, test_ids = [], [], []
    for i in range(12):
        label = POSITIVE if i % 2 == 0 else NEGATIVE
        s = VideoSample(f"dad{i:03d}", label, 90 if label == POSITIVE else -1, 20, 100, f"b/dad{i:03d}.accf")
        (tmp_path / "b").mkdir(exist_ok=True)
        write_bundle(random_bundle(T=100, N=19, F=512, seed=i), tmp_path / s.bundle_path)
        samples.append(s)
        (test_ids if i >= 10 else train_ids).append(s.id)
    DatasetManifest("dad-mock", tuple(samples), {"train": tuple(train_ids), "test": tuple(test_ids)}).save(
        tmp_path / "manifest.json"
    )
    cfg = {"data": {"manifest": "manifest.json"}, "train": {"epochs": 1}, "output": {"dir": "run"}}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    assert main(["train", str(tmp_path / "run.json")]) == 0
    ckpt = tmp_path / "run" / "checkpoints" / "best.ckpt"
    assert load_checkpoint(ckpt).model.config.feature_dim == 512
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "manifest.json"),
                 "--out", str(tmp_path / "eval")]) == 0
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
    assert 0.0 <= metrics["ap"] <= 1.0 and math.isfinite(metrics["mtta_s"])
    record_property("ap", round(metrics["ap"], 4))


# -- 2 and 8: synthetic benchmark ---------------------------------------------

N_TRAIN, N_TEST = 200, 60
DESK_TRAIN = {"lr": 2e-3, "l1_coeff": 0.0, "l2_coeff": 0.0, "epochs": 15}


def _test_ap(manifest, model):
    test = manifest.split("test")
    probs = accident_probs(model, [manifest.load_bundle(s) for s in test])
    return evaluate([AnticipationResult(s.id, p, s.label, s.toa, s.fps) for s, p in zip(test, probs)])


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """gen-synth, train and eval through the CLI, timed end to end."""
    root = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    half = (N_TRAIN + N_TEST) // 2
    assert main(["gen-synth", "--n-pos", str(half), "--n-neg", str(half), "--seed", "0",
                 "--test-fraction", str(N_TEST / (N_TRAIN + N_TEST)), "--out", str(root / "data")]) == 0
    cfg = {
        "data": {"manifest": str(root / "data" / "manifest.json")},
        "model": {"feature_dim": 32, "hidden_dim": 32},
        "train": DESK_TRAIN,
        "output": {"dir": str(root / "run")},
    }
    (root / "run.json").write_text(json.dumps(cfg))
    assert main(["train", str(root / "run.json")]) == 0
    ckpt = root / "run" / "checkpoints" / f"epoch_{DESK_TRAIN['epochs']:03d}.ckpt"
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(root / "data" / "manifest.json"),
                 "--out", str(root / "eval")]) == 0
    elapsed = time.perf_counter() - t0
    return {
        "manifest": DatasetManifest.load(root / "data" / "manifest.json"),
        "metrics": json.loads((root / "eval" / "metrics.json").read_text()),
        "elapsed": elapsed,
    }


@criterion(2)
@pytest.mark.slow
def test_synthetic_end_to_end(benchmark, record_property):
    m = benchmark["manifest"]
    assert (len(m.splits["train"]), len(m.splits["test"])) == (N_TRAIN, N_TEST)
    ap, mtta = benchmark["metrics"]["ap"], benchmark["metrics"]["mtta_s"]
    record_property("ap", round(ap, 4))
    record_property("mtta_s", round(mtta, 3))
    record_property("seconds", round(benchmark["elapsed"], 1))
    assert benchmark["elapsed"] <= 15 * 60
    assert mtta >= 0.5
    assert ap >= 0.90


ABLATIONS = {"no_gru": {"use_gru_head": False}, "no_dilated": {"use_dilated": False},
             "no_dgcn": {"use_dgcn": False}, "no_adaptive_adj": {"use_adaptive_adj": False}}


@criterion(8)
@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_shapes(name):
    cfg = desk_config(feature_dim=8, hidden_dim=8, **ABLATIONS[name])
    out = build_model(cfg)(prepare_inputs([random_bundle(T=9, F=8), random_bundle(T=7, F=8, seed=1)], cfg))
    assert out.shape == (2, 9, 2) and torch.all(torch.isfinite(out))


@criterion(8)
@pytest.mark.slow
def test_ablation_ordering(benchmark, record_property):
    m = benchmark["manifest"]
    full = benchmark["metrics"]["ap"]
    record_property("full", round(full, 4))
    tc = desk_train_config(epochs=DESK_TRAIN["epochs"])
    worse = []
    for name, switch in ABLATIONS.items():
        ap = _test_ap(m, train(m, desk_config(**switch), tc).model).ap
        record_property(name, round(ap, 4))
        if full < ap - 0.02:
            worse.append(name)
    assert not worse, f"full model trails {worse} by more than 0.02"


# -- 3: gradient check ----------------------------------------------------------


@criterion(3)
def test_gradient_check(record_property):
    cfg = ModelConfig(feature_dim=8, num_slots=4, seed=5)
    model = build_model(cfg, D64)
    bundles = [random_bundle(T=10, N=4, F=8, seed=s, present=(3, 4)) for s in (21, 22)]
    samples = [VideoSample("p", POSITIVE, 7, 20, 10, ""), VideoSample("n", NEGATIVE, -1, 20, 10, "")]
    batch = prepare_inputs(bundles, cfg, D64)

    def loss():
        return batch_loss(model(batch), samples, [10, 10])

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    eps, worst = 1e-6, {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            idx = range(flat.numel()) if flat.numel() <= 64 else rng.choice(flat.numel(), 64, replace=False)
            errs, scale = [], grad.abs().max().item()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                errs.append(abs(fd - grad[i].item()))
                scale = max(scale, abs(fd))
            worst[name] = max(errs) / max(scale, 1e-12)
    assert {"a_raw", "adj_v1", "adj_v2"} <= set(worst)
    top = max(worst, key=worst.get)
    record_property("max_rel_err", f"{worst[top]:.2e} ({top})")
    assert worst[top] <= 1e-4


# -- 4: causality ---------------------------------------------------------------


@criterion(4)
@pytest.mark.parametrize("head", HEAD_KINDS)
def test_prefix_consistency(head):
    cfg = desk_config(feature_dim=8, hidden_dim=8, temporal_head=head, seed=2)
    model = build_model(cfg)
    T = 15
    bundle = random_bundle(T=T, F=8, seed=9)
    full = model(prepare_inputs([bundle], cfg))
    for t in (1, 3, 7, T):
        assert torch.equal(model(prepare_inputs([bundle.prefix(t)], cfg))[0], full[0, :t]), t


# -- 5: receptive field ---------------------------------------------------------


@criterion(5)
def test_impulse_response_support():
    block = build_model(desk_config(), D64).temporal
    assert isinstance(block, DilatedBlock)
    T, C = 24, 32
    g = torch.Generator().manual_seed(0)
    for s in (0, 5, 11):
        reached = np.zeros(T, dtype=bool)
        for _ in range(4):
            x = torch.randn(1, T, C, generator=g, dtype=D64)
            bumped = x.clone()
            bumped[0, s] += torch.randn(C, generator=g, dtype=D64)
            with torch.no_grad():
                reached |= (block(bumped) != block(x))[0].any(-1).numpy()
        assert np.flatnonzero(reached).tolist() == list(range(s, s + 8))


# -- 6: AP oracle ---------------------------------------------------------------


@criterion(6)
def test_ap_oracle_equivalence():
    for seed in range(50):
        results = random_results(np.random.default_rng(1000 + seed), quantize=4 if seed % 2 else None)
        assert len(results) <= 20 and all(len(r.probs) <= 20 for r in results)
        report = evaluate(results)
        ap, mtta, _ = brute_force(results)
        assert abs(report.ap - ap) <= 1e-9 and abs(report.mtta - mtta) <= 1e-9, seed


# -- 7: formula-level checks ----------------------------------------------------


@criterion(7)
def test_midpoint():
    assert centers(np.array([100.0, 100.0, 200.0, 200.0])).tolist() == [150.0, 150.0]


@criterion(7)
def test_distance_345():
    ctrs = np.array([[0.0, 0.0], [3.0, 0.0]])
    depth = np.array([0.0, 4.0])
    d = pairwise_distance3d(ctrs, depth, 1.0, depth_scale=1.0)
    assert d[0, 1] == pytest.approx(5.0, abs=1e-12)
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


@criterion(7)
def test_edge_weight_half():
    assert float(edge_weights(np.array(0.0), np.array(0.0), 1.0)) == pytest.approx(0.5, abs=1e-12)


@criterion(7)
def test_gcn_identity():
    h = torch.randn(1, 5, 3, dtype=D64)
    W = torch.randn(3, 4, dtype=D64)
    adj = effective_adjacency(torch.full((5, 5), 0.2, dtype=D64), torch.ones(1, 5, 5, dtype=D64),
                              torch.zeros(1, 5, 5, dtype=torch.bool))
    assert torch.allclose(gcn_layer(h, adj, W), torch.relu(h @ W), atol=1e-14)


@criterion(7)
def test_zero_conv_layernorm():
    block = DilatedBlock(6).double()
    with torch.no_grad():
        for w in block.conv.weights:
            w.zero_()
    x = torch.randn(2, 9, 6, dtype=D64)
    assert torch.allclose(block(x), torch.nn.functional.layer_norm(x, (6,)), atol=1e-12)


@criterion(7)
def test_weight_factor_two():
    assert frame_weights(40, POSITIVE, 25, 20)[24] == pytest.approx(2.0, abs=1e-12)


# -- 9: augmentation arithmetic -------------------------------------------------


def _pool(n):
    return [VideoSample(f"gen{i:04d}", NEGATIVE, -1, 20, 50, f"gen{i}.accf") for i in range(n)]


@criterion(9)
def test_augmentation_rows():
    base = make_manifest(480, 800, n_test_pos=30, n_test_neg=30)
    assert len(base.splits["train"]) == 1280
    pool = _pool(400)
    for ratio, size in ((0.1, 1360), (0.2, 1440), (0.3, 1520), (0.4, 1600)):
        mixed = mix_augment(base, pool, ratio, seed=0)
        assert len(mixed.splits["train"]) == size
        assert mixed.splits["test"] == base.splits["test"]
    swapped = mix_augment(base, pool, 0.4, seed=0, mode="replace")
    assert len(swapped.splits["train"]) == 1280
    assert sum(s.id.startswith("gen") for s in swapped.split("train")) == 320
    assert swapped.splits["test"] == base.splits["test"]


@criterion(9)
def test_augmentation_floor_rule():
    base = make_manifest(455, 829, n_test_pos=5, n_test_neg=5)
    for ratio, added in ((0.1, 82), (0.2, 165), (0.3, 248), (0.4, 331)):
        mixed = mix_augment(base, _pool(400), ratio, seed=1)
        assert len(mixed.splits["train"]) - 1284 == added
        assert mixed.splits["test"] == base.splits["test"]


# -- 10: round trips and reproducibility ----------------------------------------


@criterion(10)
def test_bundle_round_trip(tmp_path):
    b = random_bundle(T=7, F=16, seed=3)
    write_bundle(b, tmp_path / "b.accf")
    back = read_bundle(tmp_path / "b.accf")
    for field in ("frame_feat", "obj_feat", "boxes", "scores", "obj_depth"):
        assert np.asarray(getattr(b, field), np.float32).tobytes() == getattr(back, field).tobytes()


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return gen_dataset(6, 6, ScenarioParams(seed=4, num_frames=12, feature_dim=8, min_toa=4), root)


@criterion(10)
def test_checkpoint_and_training_reproducible(tmp_path, tiny):
    cfg = desk_config(feature_dim=8, hidden_dim=8)
    for run in ("a", "b"):
        train(tiny, cfg, TrainConfig(epochs=2, lr=1e-3, checkpoint_dir=str(tmp_path / run)))
    for name in ("epoch_001.ckpt", "epoch_002.ckpt", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    state = load_checkpoint(tmp_path / "a" / "epoch_002.ckpt")
    save_checkpoint(state, tmp_path / "again.ckpt", {"val_loss": state.history[-1]["val_loss"]})
    back = load_checkpoint(tmp_path / "again.ckpt")
    for (n, p), (_, q) in zip(state.model.named_parameters(), back.model.named_parameters()):
        assert p.detach().numpy().tobytes() == q.detach().numpy().tobytes(), n
    fresh = new_state(cfg, TrainConfig())
    save_checkpoint(fresh, tmp_path / "fresh.ckpt")
    assert load_checkpoint(tmp_path / "fresh.ckpt").model.adj_v1.detach().numpy().tobytes() == \
        fresh.model.adj_v1.detach().numpy().tobytes()
