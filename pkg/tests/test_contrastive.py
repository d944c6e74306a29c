import math

import numpy as np
import pytest

from prcl.contrastive import (
    ContrastBatch,
    SchedulerConfig,
    infonce_l2_loss,
    lambda_c,
    lambda_u,
    prcl_loss,
    softmax_contrast_term,
    total_loss,
)
from prcl.prob_embed import DistPrototype, PointPrototype, ProbRep

from helpers import assert_grad_close, mls_reference, random_rep_arrays


def rep(mu, sigma2):
    return ProbRep(np.asarray(mu, dtype=float), np.asarray(sigma2, dtype=float))


def proto(mu, sigma2, cls):
    return DistPrototype(np.asarray(mu, dtype=float), np.asarray(sigma2, dtype=float), 1, cls)


def random_batch(rng, dim=4, n_classes=3, anchors_per_class=1, negs_per_anchor=4, tau=0.5):
    """Random anchors for each class, prototypes, and negatives drawn from other classes."""
    prototypes = {
        c: proto(*random_rep_arrays(rng, dim), c) for c in range(n_classes)
    }
    anchors = []
    negatives = {}
    for c in range(n_classes):
        for _ in range(anchors_per_class):
            anchors.append((rep(*random_rep_arrays(rng, dim)), c))
    for idx, (_, cls) in enumerate(anchors):
        negs = []
        for _ in range(negs_per_anchor):
            other = int(rng.choice([c for c in range(n_classes) if c != cls]))
            negs.append((rep(*random_rep_arrays(rng, dim)), other))
        negatives[idx] = negs
    return ContrastBatch(anchors, prototypes, negatives, temperature=tau)


def brute_force_prcl(batch: ContrastBatch) -> float:
    """Term-by-term scalar evaluation of the contrastive objective."""
    classes = sorted({cls for _, cls in batch.anchors})
    tau = batch.temperature
    total = 0.0
    for cls in classes:
        members = [i for i, (_, c) in enumerate(batch.anchors) if c == cls]
        class_sum = 0.0
        for i in members:
            z, _ = batch.anchors[i]
            p = batch.prototypes[cls]
            pos = mls_reference(list(z.mu), list(z.sigma2), list(p.mu_hat), list(p.sigma2_hat))
            num = math.exp(pos / tau)
            den = num
            for nz, _ in batch.negatives.get(i, []):
                den += math.exp(
                    mls_reference(list(z.mu), list(z.sigma2), list(nz.mu), list(nz.sigma2)) / tau
                )
            class_sum += -math.log(num / den)
        total += class_sum / len(members)
    return total / len(classes)


def fd_prcl_grads(batch: ContrastBatch, step=1e-5):
    """Finite differences of the loss against every anchor and negative input."""

    def rebuild(anchors, negatives):
        return ContrastBatch(anchors, batch.prototypes, negatives, batch.temperature)

    def loss_with(anchor_overrides, neg_overrides):
        anchors = list(batch.anchors)
        for i, new_rep in anchor_overrides.items():
            anchors[i] = (new_rep, batch.anchors[i][1])
        negatives = {i: list(v) for i, v in batch.negatives.items()}
        for (i, j), new_rep in neg_overrides.items():
            negatives[i][j] = (new_rep, negatives[i][j][1])
        return prcl_loss(rebuild(anchors, negatives))[0]

    fd_anchor_mu, fd_anchor_s2 = [], []
    for i, (z, _) in enumerate(batch.anchors):
        g_mu = np.zeros(z.dim)
        g_s2 = np.zeros(z.dim)
        for d in range(z.dim):
            for arr, out in ((z.mu, g_mu), (z.sigma2, g_s2)):
                hi, lo = arr.copy(), arr.copy()
                hi[d] += step
                lo[d] -= step
                if arr is z.mu:
                    up = loss_with({i: rep(hi, z.sigma2)}, {})
                    down = loss_with({i: rep(lo, z.sigma2)}, {})
                else:
                    up = loss_with({i: rep(z.mu, hi)}, {})
                    down = loss_with({i: rep(z.mu, lo)}, {})
                out[d] = (up - down) / (2 * step)
        fd_anchor_mu.append(g_mu)
        fd_anchor_s2.append(g_s2)

    fd_neg_mu, fd_neg_s2 = {}, {}
    for i, negs in batch.negatives.items():
        fd_neg_mu[i], fd_neg_s2[i] = [], []
        for j, (z, _) in enumerate(negs):
            g_mu = np.zeros(z.dim)
            g_s2 = np.zeros(z.dim)
            for d in range(z.dim):
                hi, lo = z.mu.copy(), z.mu.copy()
                hi[d] += step
                lo[d] -= step
                g_mu[d] = (
                    loss_with({}, {(i, j): rep(hi, z.sigma2)})
                    - loss_with({}, {(i, j): rep(lo, z.sigma2)})
                ) / (2 * step)
                hi, lo = z.sigma2.copy(), z.sigma2.copy()
                hi[d] += step
                lo[d] -= step
                g_s2[d] = (
                    loss_with({}, {(i, j): rep(z.mu, hi)})
                    - loss_with({}, {(i, j): rep(z.mu, lo)})
                ) / (2 * step)
            fd_neg_mu[i].append(g_mu)
            fd_neg_s2[i].append(g_s2)
    return fd_anchor_mu, fd_anchor_s2, fd_neg_mu, fd_neg_s2


class TestPrclLoss:
    def test_single_anchor_no_negatives_is_zero(self):
        batch = ContrastBatch(
            anchors=[(rep([0.0, 1.0], [0.5, 0.5]), 0)],
            prototypes={0: proto([0.2, 0.8], [0.4, 0.6], 0)},
        )
        loss, grads = prcl_loss(batch)
        assert loss == 0.0
        assert np.all(grads.anchor_mu[0] == 0.0)
        assert np.all(grads.anchor_sigma2[0] == 0.0)

    def test_equidistant_two_way_softmax_is_log_two(self):
        anchor = rep([0.0, 0.0], [1.0, 1.0])
        batch = ContrastBatch(
            anchors=[(anchor, 0)],
            prototypes={0: proto([1.0, 0.0], [1.0, 1.0], 0)},
            negatives={0: [(rep([-1.0, 0.0], [1.0, 1.0]), 1)]},
        )
        loss, _ = prcl_loss(batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_empty_anchor_set(self):
        loss, grads = prcl_loss(ContrastBatch(anchors=[], prototypes={}))
        assert loss == 0.0
        assert grads.anchor_mu == [] and grads.neg_mu == {}

    def test_missing_prototype_rejected(self):
        with pytest.raises(ValueError):
            ContrastBatch(anchors=[(rep([0.0], [1.0]), 0)], prototypes={})

    def test_same_class_negative_rejected(self):
        with pytest.raises(ValueError):
            ContrastBatch(
                anchors=[(rep([0.0], [1.0]), 0)],
                prototypes={0: proto([0.0], [1.0], 0)},
                negatives={0: [(rep([1.0], [1.0]), 0)]},
            )

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(101)
        for _ in range(20):
            batch = random_batch(rng, anchors_per_class=1, negs_per_anchor=4, n_classes=3)
            loss, _ = prcl_loss(batch)
            want = brute_force_prcl(batch)
            assert abs(loss - want) <= 1e-9 * max(1.0, abs(want))

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(202)
        batch = random_batch(rng, dim=3, n_classes=3, anchors_per_class=1, negs_per_anchor=4)
        _, grads = prcl_loss(batch)
        fd_a_mu, fd_a_s2, fd_n_mu, fd_n_s2 = fd_prcl_grads(batch)
        for i in range(len(batch.anchors)):
            assert_grad_close(grads.anchor_mu[i], fd_a_mu[i], 1e-5, f"anchor {i} mu")
            assert_grad_close(grads.anchor_sigma2[i], fd_a_s2[i], 1e-5, f"anchor {i} sigma2")
        for i in batch.negatives:
            for j in range(len(batch.negatives[i])):
                assert_grad_close(grads.neg_mu[i][j], fd_n_mu[i][j], 1e-5, f"neg {i},{j} mu")
                assert_grad_close(grads.neg_sigma2[i][j], fd_n_s2[i][j], 1e-5, f"neg {i},{j} sigma2")

    def test_nonnegative(self):
        rng = np.random.default_rng(303)
        for _ in range(25):
            loss, _ = prcl_loss(random_batch(rng, anchors_per_class=2))
            assert loss >= 0.0

    def test_perfect_separation_limit(self):
        tau = 0.5
        anchor = rep([0.0, 0.0], [0.01, 0.01])
        prototype = proto([0.0, 0.0], [0.01, 0.01], 0)
        negative = rep([12.0, 0.0], [0.01, 0.01])
        batch = ContrastBatch(
            anchors=[(anchor, 0)],
            prototypes={0: prototype},
            negatives={0: [(negative, 1)]},
            temperature=tau,
        )
        from prcl.prob_embed import mls

        gap = mls(anchor, prototype) - mls(anchor, negative)
        assert gap >= 50.0 * tau
        loss, _ = prcl_loss(batch)
        assert loss < 1e-6

    def test_uniform_variance_reduces_to_l2_baseline(self):
        rng = np.random.default_rng(404)
        tau, c = 0.7, 0.8
        for _ in range(25):
            dim = 4
            anchors, p_anchors = [], []
            prototypes, p_prototypes = {}, {}
            negatives, p_negatives = {}, {}
            for cls in range(3):
                mu = rng.normal(size=dim)
                prototypes[cls] = proto(mu, np.full(dim, c), cls)
                p_prototypes[cls] = PointPrototype(mu, cls)
                amu = rng.normal(size=dim)
                anchors.append((rep(amu, np.full(dim, c)), cls))
                p_anchors.append((amu, cls))
            for idx, (_, cls) in enumerate(anchors):
                negatives[idx], p_negatives[idx] = [], []
                for _ in range(3):
                    other = int(rng.choice([k for k in range(3) if k != cls]))
                    nmu = rng.normal(size=dim)
                    negatives[idx].append((rep(nmu, np.full(dim, c)), other))
                    p_negatives[idx].append((nmu, other))
            prob_loss, _ = prcl_loss(ContrastBatch(anchors, prototypes, negatives, tau))
            det_loss, _ = infonce_l2_loss(p_anchors, p_prototypes, p_negatives, 4.0 * c * tau)
            assert abs(prob_loss - det_loss) <= 1e-9 * max(1.0, abs(det_loss))


class TestInfonceL2:
    def test_single_anchor_no_negatives_is_zero(self):
        loss, _ = infonce_l2_loss(
            [(np.array([1.0, 2.0]), 0)], {0: PointPrototype(np.array([0.0, 0.0]), 0)}, {}, 0.5
        )
        assert loss == 0.0

    def test_equidistant_is_log_two(self):
        loss, _ = infonce_l2_loss(
            [(np.array([0.0, 0.0]), 0)],
            {0: PointPrototype(np.array([1.0, 0.0]), 0)},
            {0: [(np.array([0.0, 1.0]), 1)]},
            0.5,
        )
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(505)
        dim, tau, step = 3, 0.6, 1e-5
        anchors = [(rng.normal(size=dim), c) for c in range(2)]
        prototypes = {c: PointPrototype(rng.normal(size=dim), c) for c in range(2)}
        negatives = {
            i: [(rng.normal(size=dim), 1 - cls) for _ in range(3)] for i, (_, cls) in enumerate(anchors)
        }

        def loss_fn(anchor_overrides, neg_overrides):
            a = [(anchor_overrides.get(i, v), c) for i, (v, c) in enumerate(anchors)]
            n = {
                i: [(neg_overrides.get((i, j), v), c) for j, (v, c) in enumerate(lst)]
                for i, lst in negatives.items()
            }
            return infonce_l2_loss(a, prototypes, n, tau)[0]

        _, grads = infonce_l2_loss(anchors, prototypes, negatives, tau)
        for i, (vec, _) in enumerate(anchors):
            fd = np.zeros(dim)
            for d in range(dim):
                hi, lo = vec.copy(), vec.copy()
                hi[d] += step
                lo[d] -= step
                fd[d] = (loss_fn({i: hi}, {}) - loss_fn({i: lo}, {})) / (2 * step)
            assert_grad_close(grads.anchor_mu[i], fd, 1e-5, f"anchor {i}")
        for i, lst in negatives.items():
            for j, (vec, _) in enumerate(lst):
                fd = np.zeros(dim)
                for d in range(dim):
                    hi, lo = vec.copy(), vec.copy()
                    hi[d] += step
                    lo[d] -= step
                    fd[d] = (loss_fn({}, {(i, j): hi}) - loss_fn({}, {(i, j): lo})) / (2 * step)
                assert_grad_close(grads.neg_mu[i][j], fd, 1e-5, f"neg {i},{j}")

    def test_missing_prototype_rejected(self):
        with pytest.raises(ValueError):
            infonce_l2_loss([(np.array([0.0]), 0)], {}, {}, 0.5)

    def test_bad_temperature_rejected(self):
        with pytest.raises(ValueError):
            infonce_l2_loss([], {}, {}, 0.0)


class TestSoftmaxContrastTerm:
    def test_shift_invariance(self):
        rng = np.random.default_rng(606)
        for _ in range(50):
            pos = float(rng.normal())
            negs = rng.normal(size=5)
            tau = float(rng.uniform(0.1, 2.0))
            base, _, _ = softmax_contrast_term(pos, negs, tau)
            shift = float(rng.normal(0.0, 10.0))
            shifted, _, _ = softmax_contrast_term(pos + shift, negs + shift, tau)
            assert abs(base - shifted) <= 1e-9 * max(1.0, abs(base))

    def test_extreme_scores_stay_finite(self):
        term, d_pos, d_negs = softmax_contrast_term(-1e5, np.array([-1e5 + 1.0]), 0.5)
        assert math.isfinite(term) and math.isfinite(d_pos) and np.all(np.isfinite(d_negs))


class TestScheduler:
    def test_initial_value_exact(self):
        cfg = SchedulerConfig(lambda_c0=0.37, alpha=-1.5, total_epochs=10)
        assert lambda_c(0, cfg) == 0.37

    def test_halfway_hand_value(self):
        cfg = SchedulerConfig(lambda_c0=1.0, alpha=-2.0, total_epochs=10)
        assert lambda_c(5, cfg) == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert lambda_c(5, cfg) == pytest.approx(0.6065, abs=1e-4)

    def test_terminal_value(self):
        cfg = SchedulerConfig(lambda_c0=0.8, alpha=-2.5, total_epochs=7)
        assert lambda_c(7, cfg) == pytest.approx(0.8 * math.exp(-2.5), abs=1e-12)

    def test_non_increasing(self):
        cfg = SchedulerConfig(lambda_c0=1.3, alpha=-0.9, total_epochs=25)
        values = [lambda_c(t, cfg) for t in range(26)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range_rejected(self):
        cfg = SchedulerConfig(total_epochs=5)
        with pytest.raises(ValueError):
            lambda_c(-1, cfg)
        with pytest.raises(ValueError):
            lambda_c(6, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SchedulerConfig(alpha=0.0)
        with pytest.raises(ValueError):
            SchedulerConfig(lambda_c0=-0.1)
        with pytest.raises(ValueError):
            SchedulerConfig(total_epochs=0)


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(1.0, 1.0, 1.0, 0.5, 0.5) == pytest.approx(2.0, abs=1e-12)

    def test_supervised_only(self):
        assert total_loss(0.9, 123.0, 456.0, 0.0, 0.0) == 0.9

    def test_hand_value(self):
        got = total_loss(0.7, 0.4, 1.2, 0.25, 0.6065)
        assert got == pytest.approx(0.7 + 0.25 * 0.4 + 0.6065 * 1.2, abs=1e-12)
        assert got == pytest.approx(1.5278, abs=1e-4)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            total_loss(math.nan, 0.0, 0.0, 0.5, 0.5)
        with pytest.raises(ValueError):
            total_loss(0.0, math.inf, 0.0, 0.5, 0.5)

    def test_weight_ranges(self):
        with pytest.raises(ValueError):
            total_loss(0.0, 0.0, 0.0, 1.5, 0.5)
        with pytest.raises(ValueError):
            total_loss(0.0, 0.0, 0.0, 0.5, -0.1)


class TestLambdaU:
    def test_half_exceed(self):
        assert lambda_u([0.99, 0.5, 0.98, 0.2], 0.95) == 0.5

    def test_all_below(self):
        assert lambda_u([0.1, 0.2, 0.3], 0.95) == 0.0

    def test_all_above(self):
        assert lambda_u([0.96, 0.99], 0.95) == 1.0

    def test_empty(self):
        assert lambda_u([], 0.5) == 0.0

    def test_strict_inequality(self):
        assert lambda_u([0.95], 0.95) == 0.0

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            lambda_u([0.5], 1.5)
