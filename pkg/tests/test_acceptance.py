"""Acceptance suite: one test per criterion, each printing a PASS line.

The heavy directional reproductions (criteria 5-7) train the synthetic
cross-partition fixture at desk scale; expect the full module to take
roughly 10-15 minutes.
"""

import time

import numpy as np

from tabvfl.autodiff import Tensor, sparsemax, tsum
from tabvfl.data import (
    prepared_from_arrays,
    split_indices,
    stratified_sample_indices,
    synthetic_cross_partition,
    vertical_partition,
)
from tabvfl.errors import DataError
from tabvfl.evaluation import (
    ExperimentSpec,
    binary_roc_auc,
    child_seed,
    macro_f1,
    run_design,
)
from tabvfl.nn_core import (
    Adam,
    BatchNorm,
    FeatureTransformer,
    Linear,
    attentive_mask_step,
    cross_entropy,
    grad_check,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    sparsity_loss,
)
from tabvfl.protocol import (
    FailureSchedule,
    decode_message,
    encode_message,
    wire_federation,
)
from tabvfl.tabnet import MonolithicTabNet, TabNetConfig, build_model_parts

from test_nn_core import sparsemax_oracle_row
from test_protocol import (
    build_tabvfl_setup,
    make_batches,
    messages_equal,
    random_message,
    snapshot,
)
from test_evaluation import auc_oracle, f1_oracle


def report(criterion: int, detail: str):
    print(f"\nACCEPTANCE criterion {criterion}: PASS ({detail})")


class RecordingAdam(Adam):
    """Adam that snapshots the gradients consumed at each step."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.recorded: list[dict[str, np.ndarray]] = []

    def step(self):
        self.recorded.append({p.name: p.grad.copy() for p in self.params
                              if p.grad is not None})
        super().step()


def test_criterion_01_split_equivalence_oracle():
    """TabVFL vs monolithic: outputs, losses, gradients within 1e-8."""
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    x = rng.normal(size=(500, 12))
    y = (x[:, 0] > 0).astype(np.int64)
    config = TabNetConfig(latent_dim=6, n_steps=2, n_classes=2)
    widths = [4, 4, 4]
    batches = make_batches(500, 100)

    parts_fed = build_model_parts(config, widths, seed=77)
    guest_feats = [np.ascontiguousarray(x[:, a:b])
                   for a, b in parts_fed.feature_slices]
    fed = wire_federation("tabvfl", parts_fed, guest_feats, y, batches)
    fed.host_optimizer = RecordingAdam(fed.host_optimizer.params,
                                       lr=config.learning_rate)
    for rt in fed.guest_runtimes:
        rt.optimizer = RecordingAdam(rt.optimizer.params,
                                     lr=config.learning_rate)

    mono = MonolithicTabNet(build_model_parts(config, widths, seed=77))
    mono.optimizer = RecordingAdam(mono.optimizer.params,
                                   lr=config.learning_rate)

    summary = fed.run_pretrain_epoch(0)  # 5 consecutive training steps
    mono_losses = [mono.pretrain_step(x[lo:hi]) for lo, hi in batches]

    assert len(batches) == 5
    assert np.allclose(summary.batch_losses, mono_losses, rtol=1e-8)

    for step in range(5):
        fed_grads = dict(fed.host_optimizer.recorded[step])
        for rt in fed.guest_runtimes:
            fed_grads.update(rt.optimizer.recorded[step])
        mono_grads = mono.optimizer.recorded[step]
        assert set(fed_grads) == set(mono_grads)
        for name, g in mono_grads.items():
            denom = np.maximum(np.maximum(np.abs(g), np.abs(fed_grads[name])),
                               1e-8)
            assert np.max(np.abs(g - fed_grads[name]) / denom) <= 1e-8

    fed_state = snapshot(parts_fed)
    mono_state = dict(mono.named_state())
    for name, mat in mono_state.items():
        denom = np.maximum(np.maximum(np.abs(mat), np.abs(fed_state[name])), 1e-8)
        assert np.max(np.abs(mat - fed_state[name]) / denom) <= 1e-8

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report(1, f"5 steps, losses+grads+weights within 1e-8, {elapsed:.1f}s")


def test_criterion_02_gradient_suite():
    """Finite-difference agreement <= 1e-4 for every differentiable op."""
    start = time.perf_counter()
    worst = {}

    def check(tag, err):
        worst[tag] = max(worst.get(tag, 0.0), err)
        assert err <= 1e-4, f"{tag}: {err}"

    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        reducer = rng.normal(size=(3, 4))

        fc = Linear(4, 4, rng, "fc")
        check("fc", grad_check(
            lambda t: tsum(fc(t) * Tensor(reducer)), rng.normal(size=(3, 4))))

        bn = BatchNorm(4, "bn")
        check("batchnorm", grad_check(
            lambda t: tsum(bn(t) * Tensor(reducer)), rng.normal(size=(3, 4))))

        ft = FeatureTransformer(4, 2, [Linear(4, 4, rng, "s0")], 1, rng, "ft")
        red2 = rng.normal(size=(3, 2))
        check("glu_transformer", grad_check(
            lambda t: tsum(ft(t) * Tensor(red2)), rng.normal(size=(3, 4))))

        # sparsemax away from support changes
        while True:
            z = rng.normal(size=(1, 5))
            out = sparsemax_oracle_row(z[0])
            support = out > 0
            tau = (z[0][support] - out[support]).max()
            off = (tau - z[0][~support]).min() if np.any(~support) else np.inf
            if min(out[support].min(), off) > 1e-3:
                break
        red3 = rng.normal(size=(1, 5))
        check("sparsemax", grad_check(
            lambda t: tsum(sparsemax(t) * Tensor(red3)), z, eps=1e-7))

        att_fc = Linear(2, 3, rng, "att.fc")
        att_bn = BatchNorm(3, "att.bn")
        prior = np.ones((4, 3))
        red4 = rng.normal(size=(4, 3))
        red5 = rng.normal(size=(4, 3))

        def att_loss(t):
            mask, prior_next = attentive_mask_step(t, prior, att_fc, att_bn, 1.3)
            return tsum(mask * Tensor(red4)) + tsum(prior_next * Tensor(red5))

        a_in = rng.normal(size=(4, 2))
        mask_now, _ = attentive_mask_step(a_in, prior, att_fc, att_bn, 1.3)
        if np.all((mask_now.data > 1e-3) | (mask_now.data == 0.0)):
            check("attentive_step", grad_check(att_loss, a_in, eps=1e-7))

        xt = rng.normal(size=(4, 3))
        s = (rng.random((4, 3)) < 0.5).astype(np.float64)
        check("reconstruction_loss", grad_check(
            lambda t: reconstruction_loss(xt, t, s), rng.normal(size=(4, 3))))

        masks = [np.abs(rng.normal(size=(4, 3))) + 0.1]
        check("sparsity_loss", grad_check(
            lambda t: sparsity_loss([t], 1e-15), masks[0]))

        labels = rng.integers(0, 3, size=4)
        check("softmax_ce", grad_check(
            lambda t: cross_entropy(t, labels), rng.normal(size=(4, 3))))

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items()))
    report(2, f"20 seeds, max rel err per op: {detail}; {elapsed:.1f}s")


def test_criterion_03_sparsemax_oracle_agreement():
    """10,000 random rows against the sort-and-threshold oracle."""
    rng = np.random.default_rng(7)
    worst_gap = 0.0
    worst_sum = 0.0
    for _ in range(10_000):
        d = int(rng.integers(1, 17))
        z = rng.normal(scale=float(rng.uniform(0.05, 10.0)), size=(1, d))
        got = sparsemax(z).data[0]
        want = sparsemax_oracle_row(z[0])
        worst_gap = max(worst_gap, float(np.max(np.abs(got - want))))
        worst_sum = max(worst_sum, abs(float(got.sum()) - 1.0))
        assert np.all(got >= 0.0)
    assert worst_gap <= 1e-10
    assert worst_sum <= 1e-12
    report(3, f"10,000 rows, max oracle gap {worst_gap:.2e}, "
              f"max simplex defect {worst_sum:.2e}")


def test_criterion_04_failure_handling_exactness():
    """cache == none bitwise at p=0; offline guests bitwise frozen."""
    fed_none, parts_none, *_ = build_tabvfl_setup(seed=42, n_rows=60,
                                                  widths=(3, 3),
                                                  batch_size=20,
                                                  strategy="none")
    fed_cache, parts_cache, *_ = build_tabvfl_setup(seed=42, n_rows=60,
                                                    widths=(3, 3),
                                                    batch_size=20,
                                                    strategy="cache")
    for epoch in range(20):
        fed_none.run_pretrain_epoch(epoch)
        fed_cache.run_pretrain_epoch(epoch)
    a, b = snapshot(parts_none), snapshot(parts_cache)
    for name in a:
        assert np.array_equal(a[name], b[name]), name

    schedule = FailureSchedule(p_fail=0.6, n_guests=2, seed=5)
    assert schedule.offline_for(0) == frozenset()
    fed, parts, *_ = build_tabvfl_setup(seed=43, n_rows=60, widths=(3, 3),
                                        batch_size=20, strategy="cache",
                                        schedule=schedule)
    offline_seen = 0
    for epoch in range(10):
        before = {g: [p.data.copy()
                      for p in parts.bottoms[g - 2].parameters()]
                  for g in (2, 3)}
        summary = fed.run_pretrain_epoch(epoch)
        if epoch == 0:
            assert not summary.offline
        for g in summary.offline:
            offline_seen += 1
            for x, z in zip(before[g],
                            [p.data for p in parts.bottoms[g - 2].parameters()]):
                assert np.array_equal(x, z)
    assert offline_seen > 0  # the schedule actually exercised failures
    report(4, f"20 epochs bitwise cache==none; {offline_seen} offline "
              "guest-epochs bitwise frozen; epoch 0 online")


FIXTURE = None


def fixture_prepared():
    global FIXTURE
    if FIXTURE is None:
        x, y = synthetic_cross_partition(4000, 20, seed=0)
        FIXTURE = prepared_from_arrays(x, y)
    return FIXTURE


def fixture_spec(latent=8, strategy="none", pretrain=40, finetune=40):
    return ExperimentSpec(
        dataset=fixture_prepared(), dataset_name="fixture",
        tabnet=TabNetConfig(latent_dim=latent, n_steps=2), n_guests=2,
        pretrain_epochs=pretrain, finetune_epochs=finetune, batch_size=128,
        seeds=[1], strategy=strategy)


def mean_f1(rows):
    return [r.f1 for r in rows if r.probe == "mean"][0]


def test_criterion_05_cache_vs_zeros_directional():
    """At p=0.5 the cache strategy must beat zeros, with a smaller drop."""
    start = time.perf_counter()
    seeds = [11, 12, 13, 14, 15]
    baseline, cache, zeros = [], [], []
    for seed in seeds:
        rows, _ = run_design(fixture_spec(), "TabVFL", seed)
        baseline.append(mean_f1(rows))
        schedule = FailureSchedule(0.5, 2, child_seed(seed, "acc5"))
        rows, _ = run_design(fixture_spec(strategy="cache"), "TabVFL", seed,
                             schedule)
        cache.append(mean_f1(rows))
        rows, _ = run_design(fixture_spec(strategy="zeros"), "TabVFL", seed,
                             schedule)
        zeros.append(mean_f1(rows))
    elapsed = time.perf_counter() - start
    base_m, cache_m, zeros_m = map(np.mean, (baseline, cache, zeros))
    assert cache_m >= zeros_m
    assert (base_m - zeros_m) > (base_m - cache_m)
    assert elapsed < 900.0
    report(5, f"baseline {base_m:.3f}, cache {cache_m:.3f}, zeros "
              f"{zeros_m:.3f} over {len(seeds)} seeds; {elapsed:.0f}s")


def test_criterion_06_tabvfl_vs_lt_directional():
    """Joint latent learning must beat local pretraining on the fixture."""
    start = time.perf_counter()
    seeds = [21, 22, 23, 24, 25]
    tabvfl, lt = [], []
    for seed in seeds:
        rows, _ = run_design(fixture_spec(), "TabVFL", seed)
        tabvfl.append(mean_f1(rows))
        rows, _ = run_design(fixture_spec(), "LT", seed)
        lt.append(mean_f1(rows))
    elapsed = time.perf_counter() - start
    gap = float(np.mean(tabvfl) - np.mean(lt))
    assert np.mean(tabvfl) >= np.mean(lt)
    assert gap > 0.0
    assert elapsed < 900.0
    report(6, f"TabVFL {np.mean(tabvfl):.3f} vs LT {np.mean(lt):.3f}, "
              f"gap +{gap:.3f} over {len(seeds)} seeds; {elapsed:.0f}s")


def test_criterion_07_latent_dimension_stability():
    """TabVFL's f1 spread across latent dims must not exceed LT's."""
    start = time.perf_counter()
    seeds = [31, 32, 33]
    spreads = {}
    means_by_design = {}
    for design in ("TabVFL", "LT"):
        means = {}
        for dim in (8, 16, 32):
            vals = [mean_f1(run_design(fixture_spec(latent=dim), design, s)[0])
                    for s in seeds]
            means[dim] = float(np.mean(vals))
        spreads[design] = max(means.values()) - min(means.values())
        means_by_design[design] = means
    elapsed = time.perf_counter() - start
    assert spreads["TabVFL"] <= spreads["LT"], means_by_design
    report(7, f"spread TabVFL {spreads['TabVFL']:.4f} <= LT "
              f"{spreads['LT']:.4f} over dims (8,16,32) x {len(seeds)} "
              f"seeds; {elapsed:.0f}s")


def test_criterion_08_protocol_and_formats(tmp_path):
    """Wire round-trips, transport equivalence, checkpoint round-trip."""
    rng = np.random.default_rng(99)
    for _ in range(10_000):
        msg = random_message(rng)
        assert messages_equal(decode_message(encode_message(msg)), msg)

    # socket vs in-process trajectories after 5 epochs (3 pretrain + 2
    # finetune), small step size so float32 wire rounding dominates
    cfg_a = TabNetConfig(latent_dim=4, n_steps=2, n_classes=2,
                         learning_rate=0.002)
    cfg_b = TabNetConfig(latent_dim=4, n_steps=2, n_classes=2,
                         learning_rate=0.002)
    fed_a, parts_a, *_ = build_tabvfl_setup(seed=5, n_rows=120, batch_size=60,
                                            config=cfg_a)
    fed_b, parts_b, *_ = build_tabvfl_setup(seed=5, n_rows=120, batch_size=60,
                                            config=cfg_b, transport="socket")
    for epoch in range(3):
        fed_a.run_pretrain_epoch(epoch)
        fed_b.run_pretrain_epoch(epoch)
    for epoch in range(2):
        fed_a.run_finetune_epoch(epoch)
        fed_b.run_finetune_epoch(epoch)
    fed_b.shutdown()
    a, b = snapshot(parts_a), snapshot(parts_b)
    num = sum(float(((a[n] - b[n]) ** 2).sum()) for n in a)
    den = sum(float((a[n] ** 2).sum()) for n in a)
    drift = float(np.sqrt(num / den))
    assert drift <= 1e-6

    entries = [(f"p{i}", np.random.default_rng(i).normal(size=(3, 5)))
               for i in range(4)]
    path = tmp_path / "round.ckpt"
    save_checkpoint(path, entries)
    loaded = load_checkpoint(path)
    for name, mat in entries:
        assert np.array_equal(loaded[name], mat)
    save_checkpoint(tmp_path / "again.ckpt",
                    [(n, loaded[n]) for n, _ in entries])
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    report(8, f"10,000 wire round-trips; socket-vs-in-process weight drift "
              f"{drift:.2e} <= 1e-6 after 5 epochs; checkpoints bitwise")


def test_criterion_09_metrics_oracle():
    """Macro-F1 and ROC-AUC vs brute force on 1,000 random sets."""
    rng = np.random.default_rng(123)
    worst_f1 = worst_auc = 0.0
    import warnings as _w
    for _ in range(1000):
        n_classes = int(rng.integers(2, 5))
        n = int(rng.integers(4, 40))
        y_true = rng.integers(0, n_classes, size=n)
        while len(np.unique(y_true)) < 2:
            y_true = rng.integers(0, n_classes, size=n)
        y_pred = rng.integers(0, n_classes, size=n)
        with _w.catch_warnings():
            _w.simplefilter("ignore")
            got = macro_f1(y_true, y_pred, n_classes)
        worst_f1 = max(worst_f1, abs(got - f1_oracle(y_true, y_pred, n_classes)))
        scores = np.round(rng.random(n), 1)  # heavy ties
        is_pos = y_true == 0
        if is_pos.any() and not is_pos.all():
            auc = binary_roc_auc(scores, is_pos)
            worst_auc = max(worst_auc, abs(auc - auc_oracle(scores, is_pos)))
    assert worst_f1 <= 1e-10
    assert worst_auc <= 1e-10
    report(9, f"1,000 sets, max |f1 - oracle| {worst_f1:.1e}, "
              f"max |auc - oracle| {worst_auc:.1e}")


def test_criterion_10_pipeline_properties():
    """Partitions, stratified sampling, and split arithmetic."""
    rng = np.random.default_rng(17)
    for _ in range(300):
        k = int(rng.integers(1, 12))
        n = int(rng.integers(k, 80))
        ranges = vertical_partition(n, k)
        widths = [b - a for a, b in ranges]
        assert sum(widths) == n
        assert max(widths) - min(widths) <= 1
        for (a1, b1), (a2, b2) in zip(ranges, ranges[1:]):
            assert b1 == a2
        assert ranges[0][0] == 0 and ranges[-1][1] == n

    for _ in range(100):
        n = int(rng.integers(50, 400))
        n_classes = int(rng.integers(2, 5))
        labels = rng.integers(0, n_classes, size=n)
        target = int(rng.integers(n_classes * 3, n))
        try:
            keep = stratified_sample_indices(labels, target, rng)
        except DataError:
            continue  # tiny class rounded to zero: rejected by contract
        assert len(keep) == target
        for c in range(n_classes):
            want = target * np.sum(labels == c) / n
            got = np.sum(labels[keep] == c)
            assert abs(got - want) <= 1.0

    tr, va, te = split_indices(1000, (0.7, 0.15, 0.15),
                               np.random.default_rng(3))
    assert (len(tr), len(va), len(te)) == (700, 150, 150)
    tr, te = split_indices(1003, (0.7, 0.3), np.random.default_rng(4))
    assert (len(tr), len(te)) == (702, 301)  # floor(0.7*1003)=702, rest
    report(10, "partitions disjoint+exhaustive; stratified proportions "
               "within one sample; split arithmetic exact")
