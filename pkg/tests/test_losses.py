import math

import numpy as np
import pytest
import torch
from scipy import stats

from advdetect.boxes import BoundingBox, GroundTruthObject, Proposal
from advdetect.losses import (
    LossReport,
    LossWeights,
    RandomTargetFeatures,
    assign_adversarial_labels,
    attention_feature_loss,
    dag_class_loss,
    gan_discriminator_loss,
    gan_generator_loss,
    l2_similarity,
    select_attack_proposals,
    total_loss,
)


def finite_diff_check(fn, inputs, eps=1e-6, rtol=1e-4):
    """Central finite differences vs autograd at float64."""
    inputs = [t.detach().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    for t, g in zip(inputs, grads):
        if g is None:
            continue
        flat = t.detach().flatten()
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(*[x.detach() for x in inputs]).item()
            flat[i] = orig - eps
            lo = fn(*[x.detach() for x in inputs]).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        ana = g.flatten()
        denom = torch.maximum(ana.abs(), num.abs()).clamp(min=1e-6)
        rel = ((ana - num).abs() / denom).max().item()
        assert rel < rtol, f"finite-difference mismatch: rel err {rel}"


class TestGanLosses:
    def test_perfect_discriminator_limit(self):
        v = gan_discriminator_loss(torch.tensor([0.999999]), torch.tensor([1e-6]))
        assert float(v) < 1e-4

    def test_uninformative_discriminator(self):
        v = gan_discriminator_loss(torch.tensor([0.5]), torch.tensor([0.5]))
        assert float(v) == pytest.approx(2 * math.log(2), rel=1e-6)

    def test_monotone_in_d_real(self):
        fake = torch.tensor([0.3])
        losses = [
            float(gan_discriminator_loss(torch.tensor([r]), fake))
            for r in (0.2, 0.5, 0.8)
        ]
        assert losses[0] > losses[1] > losses[2]

    def test_generator_fooled_limit(self):
        assert float(gan_generator_loss(torch.tensor([0.999999]))) < 1e-4

    def test_generator_half(self):
        v = gan_generator_loss(torch.tensor([0.5]))
        assert float(v) == pytest.approx(math.log(2), rel=1e-6)

    def test_generator_strictly_decreasing(self):
        losses = [float(gan_generator_loss(torch.tensor([p]))) for p in (0.2, 0.5, 0.9)]
        assert losses[0] > losses[1] > losses[2]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            gan_generator_loss(torch.tensor([1.2]))
        with pytest.raises(ValueError):
            gan_discriminator_loss(torch.tensor([-0.1]), torch.tensor([0.5]))

    def test_gradients(self):
        rng = torch.Generator().manual_seed(0)
        d_real = torch.rand(8, generator=rng) * 0.8 + 0.1
        d_fake = torch.rand(8, generator=rng) * 0.8 + 0.1
        finite_diff_check(gan_discriminator_loss, [d_real, d_fake])
        finite_diff_check(gan_generator_loss, [d_fake])


class TestL2Similarity:
    def test_identity(self):
        x = torch.rand(3, 8, 8)
        assert float(l2_similarity(x, x)) == 0.0

    def test_constant_difference(self):
        clean = torch.zeros(3, 4, 4)
        adv = torch.full((3, 4, 4), 0.1)
        assert float(l2_similarity(clean, adv)) == pytest.approx(0.1 * math.sqrt(48), rel=1e-6)

    def test_homogeneity(self):
        clean = torch.zeros(3, 4, 4)
        d = torch.rand(3, 4, 4)
        assert float(l2_similarity(clean, 2 * d)) == pytest.approx(
            2 * float(l2_similarity(clean, d)), rel=1e-6
        )

    def test_symmetry_and_triangle(self):
        rng = torch.Generator().manual_seed(1)
        for _ in range(20):
            a, b, c = (torch.rand(3, 6, 6, generator=rng) for _ in range(3))
            assert float(l2_similarity(a, b)) == pytest.approx(float(l2_similarity(b, a)))
            assert float(l2_similarity(a, c)) <= (
                float(l2_similarity(a, b)) + float(l2_similarity(b, c)) + 1e-9
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l2_similarity(torch.zeros(3, 4, 4), torch.zeros(3, 5, 5))

    def test_gradient(self):
        rng = torch.Generator().manual_seed(2)
        clean = torch.rand(3, 4, 4, generator=rng)
        adv = torch.rand(3, 4, 4, generator=rng)
        finite_diff_check(lambda a: l2_similarity(clean.double(), a), [adv])


def make_proposals(scores):
    return [Proposal(BoundingBox(0, 0, 5, 5), s) for s in scores]


class TestProposalSelection:
    def test_all_below_threshold(self):
        assert select_attack_proposals(make_proposals([0.1, 0.69])) == []

    def test_boundary_inclusive(self):
        out = select_attack_proposals(make_proposals([0.71, 0.70, 0.69]))
        assert [p.score for p in out] == [0.71, 0.70]

    def test_matches_filter_oracle(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=50).round(3)
        props = make_proposals(scores)
        out = select_attack_proposals(props)
        assert out == [p for p in props if p.score >= 0.7]


class TestAdversarialLabels:
    def test_two_classes_forced(self):
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 0)]
        props = make_proposals([0.9])
        out = assign_adversarial_labels(props, gts, 2, rng=0)
        assert out[0].true_label == 0 and out[0].adv_label == 1

    def test_never_equal(self):
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 2)]
        rng = np.random.default_rng(3)
        for _ in range(200):
            out = assign_adversarial_labels(make_proposals([0.9] * 50), gts, 5, rng=rng)
            assert all(p.adv_label != p.true_label for p in out)

    def test_uniform_over_wrong_classes(self):
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 2)]
        rng = np.random.default_rng(4)
        counts = {c: 0 for c in (0, 1, 3, 4)}
        for _ in range(200):
            out = assign_adversarial_labels(make_proposals([0.9] * 50), gts, 5, rng=rng)
            for p in out:
                counts[p.adv_label] += 1
        total = sum(counts.values())
        assert total == 10000
        chi = stats.chisquare(list(counts.values()))
        assert chi.pvalue > 1e-4

    def test_background_for_unmatched(self):
        props = [Proposal(BoundingBox(50, 50, 55, 55), 0.9)]
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 0)]
        out = assign_adversarial_labels(props, gts, 4, rng=0)
        assert out[0].true_label == 3  # background = last index

    def test_exclude_background_flag(self):
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 0)]
        rng = np.random.default_rng(5)
        for _ in range(100):
            out = assign_adversarial_labels(
                make_proposals([0.9]), gts, 4, rng=rng, include_background=False
            )
            assert out[0].adv_label != 3

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            assign_adversarial_labels([], [], 1, rng=0)

    def test_deterministic_given_seed(self):
        gts = [GroundTruthObject(BoundingBox(0, 0, 5, 5), 1)]
        a = assign_adversarial_labels(make_proposals([0.9] * 20), gts, 6, rng=42)
        b = assign_adversarial_labels(make_proposals([0.9] * 20), gts, 6, rng=42)
        assert a == b


class TestDagClassLoss:
    def test_symmetric_logits_zero(self):
        logits = torch.tensor([[1.0, 1.0], [2.5, 2.5]])
        assert float(dag_class_loss(logits, [0, 0], [1, 1])) == 0.0

    def test_direct_substitution(self):
        logits = torch.tensor([[2.0, 1.0]])
        assert float(dag_class_loss(logits, [0], [1])) == pytest.approx(1.0)

    def test_sum_linearity(self):
        logits = torch.tensor([[2.0, 1.0]])
        more = torch.tensor([[2.0, 1.0], [3.0, 0.5]])
        base = float(dag_class_loss(logits, [0], [1]))
        extended = float(dag_class_loss(more, [0, 0], [1, 1]))
        assert extended == pytest.approx(base + 2.5)

    def test_empty_returns_zero(self):
        assert float(dag_class_loss(torch.zeros(0, 3), [], [])) == 0.0

    def test_permutation_invariant(self):
        rng = torch.Generator().manual_seed(6)
        logits = torch.rand(10, 5, generator=rng)
        t = [int(i) % 5 for i in range(10)]
        a = [(int(i) + 1) % 5 for i in range(10)]
        perm = torch.randperm(10, generator=rng)
        v1 = float(dag_class_loss(logits, t, a))
        v2 = float(
            dag_class_loss(logits[perm], [t[i] for i in perm], [a[i] for i in perm])
        )
        assert v1 == pytest.approx(v2)

    def test_gradient(self):
        rng = torch.Generator().manual_seed(7)
        logits = torch.rand(6, 4, generator=rng)
        finite_diff_check(lambda s: dag_class_loss(s, [0, 1, 2, 3, 0, 1], [1, 2, 3, 0, 2, 3]), [logits])


class TestAttentionFeatureLoss:
    def test_zero_attention(self):
        x = torch.rand(2, 4, 4)
        r = torch.rand(2, 4, 4)
        a = torch.zeros(4, 4)
        assert float(attention_feature_loss([x], [r], [a])) < 1e-5

    def test_target_reached(self):
        x = torch.rand(2, 4, 4)
        a = torch.ones(4, 4)
        assert float(attention_feature_loss([x], [x.clone()], [a])) < 1e-5

    def test_hand_computed(self):
        x_minus_r = torch.tensor([[[3.0, 9.0], [9.0, 4.0]]])
        a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        v = attention_feature_loss([x_minus_r], [torch.zeros(1, 2, 2)], [a])
        assert float(v) == pytest.approx(5.0, rel=1e-5)

    def test_layer_permutation_invariant(self):
        rng = torch.Generator().manual_seed(8)
        xs = [torch.rand(2, 4, 4, generator=rng).double() for _ in range(3)]
        rs = [torch.rand(2, 4, 4, generator=rng).double() for _ in range(3)]
        ats = [torch.rand(4, 4, generator=rng).double() for _ in range(3)]
        v1 = float(attention_feature_loss(xs, rs, ats))
        v2 = float(attention_feature_loss(xs[::-1], rs[::-1], ats[::-1]))
        assert v1 == pytest.approx(v2, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            attention_feature_loss(
                [torch.zeros(2, 4, 4)], [torch.zeros(2, 3, 3)], [torch.zeros(4, 4)]
            )

    def test_gradient(self):
        rng = torch.Generator().manual_seed(9)
        x = torch.rand(3, 4, 4, generator=rng)
        r = torch.rand(3, 4, 4, generator=rng)
        a = torch.rand(4, 4, generator=rng)
        finite_diff_check(
            lambda t: attention_feature_loss([t], [r.double()], [a.double()]), [x]
        )


class TestTotalLoss:
    def test_all_zero(self):
        total, report = total_loss(
            torch.zeros(()), torch.zeros(()), torch.zeros(()),
            [torch.zeros(()), torch.zeros(())], LossWeights(),
        )
        assert float(total) == 0.0 and report.total == 0.0

    def test_weighted_arithmetic(self):
        total, report = total_loss(
            torch.tensor(1.0),
            torch.tensor(2.0),
            torch.tensor(3.0),
            [torch.tensor(4.0), torch.tensor(5.0)],
            LossWeights(alpha=0.05, beta=1.0, epsilons=(1e-4, 2e-4)),
        )
        assert report.total == pytest.approx(4.1014, rel=1e-9)
        assert float(total) == pytest.approx(4.1014, rel=1e-6)

    def test_beta_linearity(self):
        args = (torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), [])
        t1, _ = total_loss(*args, LossWeights(beta=1.0, epsilons=()))
        t2, _ = total_loss(*args, LossWeights(beta=2.0, epsilons=()))
        assert float(t2) - float(t1) == pytest.approx(3.0)

    def test_report_identity(self):
        rng = torch.Generator().manual_seed(10)
        vals = torch.rand(5, generator=rng)
        w = LossWeights(alpha=0.3, beta=0.7, epsilons=(0.01, 0.02))
        total, report = total_loss(vals[0], vals[1], vals[2], [vals[3], vals[4]], w)
        recon = (
            report.gan_g
            + w.alpha * report.l2
            + w.beta * report.dag_class
            + sum(e * f for e, f in zip(w.epsilons, report.feature))
        )
        assert report.total == pytest.approx(recon, rel=1e-9)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)


class TestRandomTargetFeatures:
    def test_reproducible_from_seed(self):
        shapes = [(8, 4, 4), (16, 2, 2)]
        a = RandomTargetFeatures.create(shapes, seed=5)
        b = RandomTargetFeatures.create(shapes, seed=5)
        for x, y in zip(a.targets, b.targets):
            assert torch.equal(x, y)

    def test_state_dict_round_trip(self):
        a = RandomTargetFeatures.create([(4, 3, 3)], seed=9)
        b = RandomTargetFeatures.from_state_dict(a.state_dict())
        assert b.seed == a.seed
        assert torch.equal(a.targets[0], b.targets[0])
