"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete. Budgets are asserted alongside the numerical checks.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import torch

import comae
from comae import CodeDatabase, ComaeHasher, TrainConfig
from comae.estimator import ComaeNetwork, LOSS_COLUMNS, write_loss_trace
from conftest import autograd_gradients, finite_difference_gradients, max_relative_error
from test_evaluation import oracle_auc, oracle_map


@contextmanager
def criterion(number, name, budget_seconds):
    start = time.time()
    try:
        yield
    except BaseException:
        print(f"[criterion {number}] {name}: FAIL ({time.time() - start:.1f}s)")
        raise
    elapsed = time.time() - start
    assert elapsed < budget_seconds, f"criterion {number} exceeded {budget_seconds}s budget"
    print(f"[criterion {number}] {name}: PASS ({elapsed:.1f}s)")


# -- 1: loss-value oracles ---------------------------------------------------

def test_criterion_1_loss_value_oracles():
    with criterion(1, "loss-value oracles", budget_seconds=1.0):
        tol = 1e-6

        # pointwise: squared norm, then mean over samples
        single = comae.pointwise_loss(
            torch.tensor([[1.0, 2.0]], dtype=torch.float64),
            torch.zeros(1, 2, dtype=torch.float64),
        )
        assert abs(float(single) - 5.0) < tol
        mean = comae.pointwise_loss(
            torch.tensor([[1.0, 2.0], [1.0, 0.0]], dtype=torch.float64),
            torch.zeros(2, 2, dtype=torch.float64),
        )
        assert abs(float(mean) - 3.0) < tol

        # pairwise: one anchor, positive product 1, negative product -1
        pos = np.zeros((1, 3, 3), dtype=bool)
        neg = np.zeros_like(pos)
        pos[0, 0, 1] = True
        neg[0, 0, 2] = True
        sets = comae.PairSets(pos, neg, epsilon=0.1, neg_count=1, seed=0)
        preds = torch.tensor([[1.0], [1.0], [-1.0]], dtype=torch.float64)
        value = float(comae.pairwise_loss(preds, sets, tau=1.0))
        assert abs(value - math.log(1.0 + math.exp(-2.0))) < tol

        # classwise: logits [2, 0], true class 0
        value = float(comae.classwise_loss(
            torch.tensor([[2.0, 0.0]], dtype=torch.float64), torch.tensor([0])
        ))
        assert abs(value - (-math.log(math.exp(2.0) / (math.exp(2.0) + 1.0)))) < tol

        # hypersphere: aligned own center, orthogonal rival, m=0 s=1
        value = float(comae.hypersphere_loss(
            torch.tensor([[1.0, 0.0]], dtype=torch.float64),
            torch.tensor([0]),
            torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64),
            margin=0.0, scale=1.0,
        ))
        assert abs(value - (-math.log(math.e / (math.e + 1.0)))) < tol

        # hypersphere: identical centers at zero margin
        center = torch.tensor([0.6, 0.8], dtype=torch.float64)
        value = float(comae.hypersphere_loss(
            torch.tensor([[0.3, -0.9]], dtype=torch.float64),
            torch.tensor([0]),
            torch.stack([center, center]),
            margin=0.0, scale=1.0,
        ))
        assert abs(value - math.log(2.0)) < tol

        # total: weighted sum
        losses = [torch.tensor(v, dtype=torch.float64) for v in (0.1, 0.2, 0.3, 0.4)]
        assert abs(float(comae.total_loss(losses, (10.0, 1.0, 10.0, 1.0))) - 4.6) < tol


# -- 2: gradient suite ---------------------------------------------------------

def _end_to_end_network():
    torch.manual_seed(0)
    cfg = TrainConfig(
        bits=4, backbone="conv", backbone_channels=4, backbone_hidden=3,
        epsilon=0.3, tau=0.8, neg_count=2, seed=0,
    )
    net = ComaeNetwork(cfg, in_channels=2, num_attributes=3, num_seen=2,
                       height=3, width=3)
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.standard_normal((6, 3, 3, 2)))
    class_attrs = rng.random((2, 3))
    labels = np.array([0, 1, 0, 1, 0, 1])
    true_attrs = torch.tensor(class_attrs[labels])
    targets = torch.tensor(labels)
    seen_attrs = torch.tensor(class_attrs)
    sets = comae.build_pair_sets(class_attrs[labels], cfg.epsilon, cfg.neg_count, 0)
    return net, (x, true_attrs, targets, seen_attrs), sets


def test_criterion_2_gradient_suite():
    with criterion(2, "gradient suite", budget_seconds=30.0):
        # pointwise through prototypes and feature map
        torch.manual_seed(3)
        fmap = torch.randn(2, 2, 3, dtype=torch.float64, requires_grad=True)
        bank = comae.PrototypeBank(4, 3).double()
        target = torch.rand(1, 4, dtype=torch.float64)

        def pointwise_fn():
            return comae.pointwise_loss(target, bank.predict_attributes(fmap).unsqueeze(0))

        params = [bank.prototypes, fmap]
        err = max_relative_error(
            autograd_gradients(pointwise_fn(), params),
            finite_difference_gradients(pointwise_fn, params),
        )
        assert err < 1e-4, f"pointwise gradient error {err}"

        # pairwise on a 3-sample, two-dimension instance
        pos = np.zeros((2, 3, 3), dtype=bool)
        neg = np.zeros_like(pos)
        pos[0, 0, 1] = pos[0, 1, 0] = pos[1, 0, 2] = True
        neg[0, 0, 2] = neg[1, 0, 1] = neg[1, 2, 0] = True
        sets = comae.PairSets(pos, neg, epsilon=0.2, neg_count=1, seed=0)
        preds = torch.tensor([[0.3, -0.2], [0.8, 0.5], [-0.4, 0.1]],
                             dtype=torch.float64, requires_grad=True)

        def pairwise_fn():
            return comae.pairwise_loss(preds, sets, tau=0.7)

        err = max_relative_error(
            autograd_gradients(pairwise_fn(), [preds]),
            finite_difference_gradients(pairwise_fn, [preds]),
        )
        assert err < 1e-4, f"pairwise gradient error {err}"

        # classwise through the compatibility head
        torch.manual_seed(4)
        head = comae.CompatibilityHead(3, 2).double()
        pooled = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        attrs = torch.rand(3, 2, dtype=torch.float64)
        targets = torch.tensor([0, 2, 1, 0])

        def classwise_fn():
            return comae.classwise_loss(head.class_logits(pooled, attrs), targets)

        params = [head.projection, pooled]
        err = max_relative_error(
            autograd_gradients(classwise_fn(), params),
            finite_difference_gradients(classwise_fn, params),
        )
        assert err < 1e-4, f"classwise gradient error {err}"

        # hypersphere w.r.t. codes and centers
        torch.manual_seed(5)
        codes = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        centers = torch.randn(2, 4, dtype=torch.float64)
        centers = (centers / centers.norm(dim=1, keepdim=True)).requires_grad_(True)
        hs_targets = torch.tensor([0, 1, 0])

        def hypersphere_fn():
            return comae.hypersphere_loss(codes, hs_targets, centers, margin=0.35, scale=10.0)

        err = max_relative_error(
            autograd_gradients(hypersphere_fn(), [codes, centers]),
            finite_difference_gradients(hypersphere_fn, [codes, centers]),
        )
        assert err < 1e-4, f"hypersphere gradient error {err}"

        # composed joint objective through backbone -> prototypes -> heads
        net, batch, sets = _end_to_end_network()

        def joint_fn():
            return net.joint_loss(*batch, pair_sets=sets)

        params = list(net.parameters())
        err = max_relative_error(
            autograd_gradients(joint_fn(), params),
            finite_difference_gradients(joint_fn, params),
        )
        assert err < 1e-3, f"end-to-end gradient error {err}"


# -- 3: mAP / AUC oracle equivalence ------------------------------------------

def test_criterion_3_metric_oracle_equivalence():
    with criterion(3, "mAP/AUC oracle equivalence", budget_seconds=30.0):
        rng = np.random.default_rng(2024)
        instances = 0
        while instances < 100:
            gallery_n = int(rng.integers(5, 101))
            query_n = int(rng.integers(2, 12))
            bits = int(rng.integers(4, 25))
            classes = int(rng.integers(2, 6))
            gallery = CodeDatabase.from_codes(
                rng.choice([-1, 1], size=(gallery_n, bits)).astype(np.int8),
                rng.integers(0, classes, size=gallery_n),
            )
            queries = CodeDatabase.from_codes(
                rng.choice([-1, 1], size=(query_n, bits)).astype(np.int8),
                rng.integers(0, classes, size=query_n),
            )
            cutoff = None if instances % 3 == 0 else int(rng.integers(1, gallery_n + 1))
            ours = comae.mean_average_precision(queries, gallery, cutoff=cutoff)
            reference = oracle_map(queries, gallery, cutoff=cutoff)
            assert ours == reference, f"mAP mismatch: {ours!r} vs {reference!r}"
            if instances % 5 == 0:
                auc = comae.curves(queries, gallery).auc
                assert abs(auc - oracle_auc(queries, gallery)) <= 1e-12
            instances += 1


# -- 4: zero-shot transfer smoke -------------------------------------------------

def test_criterion_4_zero_shot_transfer():
    with criterion(4, "zero-shot transfer vs permutation baseline", budget_seconds=300.0):
        ds = comae.make_synthetic(8, 8, 20, 0.05, seed=0)
        ds = ds.with_split(comae.make_split(ds, 0.25, seed=0))
        est = ComaeHasher(bits=16, epochs=10, learning_rate=1e-4, epsilon=0.9,
                          lambda_pointwise=10.0, lambda_pairwise=1.0,
                          lambda_classwise=10.0, lambda_hash=1.0, seed=0)
        est.fit(ds)
        unseen_idx = ds.indices_of(ds.split.unseen)
        db = est.encode_database(ds, unseen_idx)
        observed = comae.zero_shot_map(db, ds.split.unseen)

        codes = db.codes()
        perm_rng = np.random.default_rng(0)
        null_maps = []
        for _ in range(100):
            shuffled = CodeDatabase.from_codes(codes, perm_rng.permutation(db.labels))
            null_maps.append(comae.zero_shot_map(shuffled, ds.split.unseen))
        threshold = float(np.percentile(null_maps, 95))
        print(f"    observed mAP={observed:.4f}, permutation 95th pct={threshold:.4f}")
        assert observed > threshold


# -- 5: separability direction ----------------------------------------------------

def _separability_run(dataset, train_seed, lambda_classwise):
    est = ComaeHasher(
        bits=16, epochs=60, learning_rate=3e-3, batch_size=64,
        backbone="conv", backbone_channels=8, backbone_hidden=4,
        epsilon=0.3, lambda_classwise=lambda_classwise, seed=train_seed,
    )
    est.fit(dataset)
    db = est.encode_database(dataset, dataset.indices_of(dataset.split.unseen))
    return comae.separability(db).separability


def test_criterion_5_separability_direction():
    with criterion(5, "classwise loss widens code separability", budget_seconds=600.0):
        ds = comae.make_synthetic(10, 8, 20, 0.1, seed=4)
        ds = ds.with_split(comae.make_split(ds, 0.4, seed=4))
        wins = 0
        for train_seed in range(5):
            enabled = _separability_run(ds, train_seed, 10.0)
            disabled = _separability_run(ds, train_seed, 0.0)
            wins += enabled > disabled
            print(f"    seed {train_seed}: with classwise {enabled:.3f},"
                  f" without {disabled:.3f}")
        assert wins >= 4, f"classwise improved separability on only {wins}/5 seeds"


# -- 6: ablation wiring --------------------------------------------------------------

def test_criterion_6_ablation_wiring():
    with criterion(6, "ablation switches zero exactly their column", budget_seconds=60.0):
        ds = comae.make_synthetic(8, 8, 10, 0.05, seed=1)
        ds = ds.with_split(comae.make_split(ds, 0.25, seed=1))
        common = dict(bits=8, epochs=1, seed=2, epsilon=0.25, neg_count=10)
        baseline = ComaeHasher(**common).fit(ds).loss_trace_[0]
        assert all(baseline[1:5] != 0.0), "baseline components must be non-zero"

        variants = {
            "pointwise": ComaeHasher(**common, disable_pointwise=True),
            "pairwise": ComaeHasher(**common, disable_pairwise=True),
            "classwise": ComaeHasher(**common, disable_classwise=True),
        }
        for name, est in variants.items():
            row = est.fit(ds).loss_trace_[0]
            col = LOSS_COLUMNS.index(name) + 1
            assert row[col] == 0.0, f"{name} column not zeroed"
            for other in ("pointwise", "pairwise", "classwise", "hash"):
                if other == name:
                    continue
                other_col = LOSS_COLUMNS.index(other) + 1
                assert row[other_col] == baseline[other_col], (
                    f"disabling {name} changed the {other} column at epoch 0"
                )


# -- 7: determinism and formats --------------------------------------------------------

def test_criterion_7_determinism_and_formats(tmp_path):
    with criterion(7, "determinism and byte-exact formats", budget_seconds=120.0):
        ds = comae.make_synthetic(8, 8, 10, 0.05, seed=5)
        ds = ds.with_split(comae.make_split(ds, 0.25, seed=5))

        first = ComaeHasher(bits=8, epochs=3, seed=7).fit(ds)
        second = ComaeHasher(bits=8, epochs=3, seed=7).fit(ds)
        write_loss_trace(first.loss_trace_, tmp_path / "a.csv")
        write_loss_trace(second.loss_trace_, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

        rng = np.random.default_rng(9)
        codes = rng.choice([-1, 1], size=(13, 21)).astype(np.int8)
        np.testing.assert_array_equal(comae.unpack_codes(comae.pack_codes(codes)), codes)

        comae.save_dataset(ds, tmp_path / "ds")
        again = comae.load_dataset(tmp_path / "ds")
        assert again == ds
        assert again.samples.tobytes() == ds.samples.tobytes()
        assert again.class_attributes.tobytes() == ds.class_attributes.tobytes()


# -- 8: unseen-ratio protocol ------------------------------------------------------------

def test_criterion_8_unseen_ratio_protocol():
    with criterion(8, "mAP non-increasing in unseen ratio", budget_seconds=900.0):
        monotone = 0
        for seed in range(5):
            base = comae.make_synthetic(20, 8, 10, 0.3, seed=seed)
            maps = []
            for ratio in (0.2, 0.4, 0.6):
                ds = base.with_split(comae.make_split(base, ratio, seed=seed))
                est = ComaeHasher(bits=16, epochs=5, seed=seed).fit(ds)
                db = est.encode_database(ds, ds.indices_of(ds.split.unseen))
                maps.append(comae.zero_shot_map(db, ds.split.unseen))
            is_monotone = maps[0] >= maps[1] >= maps[2]
            monotone += is_monotone
            print(f"    seed {seed}: mAP@all over ratios 0.2/0.4/0.6 = "
                  + "/".join(f"{m:.4f}" for m in maps)
                  + ("  (monotone)" if is_monotone else "  (violation)"))
        assert monotone >= 4, f"monotone decline on only {monotone}/5 seeds"
