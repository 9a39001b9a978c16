"""Visibility classifiers, focal loss, and the retrieval distance."""

import math

import pytest
import torch

from oracles import assert_grad_close, central_difference, loop_pair_distance
from profd.visibility import (
    PersonEmbedding,
    VisibilityHead,
    focal_loss,
    pairwise_distance,
    predict_visibility,
    visibility_targets,
)


def rand(shape, seed, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=dtype)


class TestPredictVisibility:
    def test_zero_parameters_give_half(self):
        head = VisibilityHead(3, 8)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        v = predict_visibility(torch.randn(3, 8), head)
        assert torch.allclose(v, torch.full((3,), 0.5))

    def test_open_interval_for_finite_inputs(self):
        head = VisibilityHead(4, 8)
        v = predict_visibility(torch.randn(10, 4, 8) * 50, head)
        assert bool((v > 0).all()) and bool((v < 1).all())

    def test_five_parts_give_five_scores(self):
        head = VisibilityHead(5, 16)
        assert predict_visibility(torch.randn(5, 16), head).shape == (5,)

    def test_each_classifier_reads_only_its_own_row(self):
        head = VisibilityHead(3, 8).double()
        f = rand((3, 8), 0)
        base = predict_visibility(f, head)
        bumped = f.clone()
        bumped[1] += 10.0
        after = predict_visibility(bumped, head)
        assert torch.equal(base[0], after[0])
        assert torch.equal(base[2], after[2])
        assert not torch.equal(base[1], after[1])

    def test_shape_mismatch_rejected(self):
        head = VisibilityHead(3, 8)
        with pytest.raises(ValueError):
            head(torch.randn(4, 8))


class TestVisibilityTargets:
    def test_all_zero_channel_invisible(self):
        mask = torch.zeros(8, 4, 2)
        assert not visibility_targets(mask).any()

    def test_single_pixel_visible(self):
        mask = torch.zeros(8, 4, 2)
        mask[3, 1, 1] = 1.0
        targets = visibility_targets(mask)
        assert targets.tolist() == [False, True]

    def test_subthreshold_constant_invisible(self):
        mask = torch.full((8, 4, 1), 0.4)
        assert not visibility_targets(mask, threshold=0.5).any()

    def test_batched(self):
        mask = torch.zeros(2, 8, 4, 1)
        mask[1, 0, 0, 0] = 1.0
        assert visibility_targets(mask).tolist() == [[False], [True]]


class TestFocalLoss:
    def test_perfect_positive_vanishes(self):
        v = torch.tensor([1.0 - 1e-9], dtype=torch.float64)
        t = torch.tensor([True])
        assert float(focal_loss(v, t)) < 1e-6

    def test_reference_value(self):
        v = torch.tensor([0.5], dtype=torch.float64)
        t = torch.tensor([True])
        got = float(focal_loss(v, t, alpha=0.65, gamma=2.0))
        assert got == pytest.approx(0.65 * 0.25 * math.log(2), abs=1e-9)
        assert got == pytest.approx(0.112636, abs=1e-6)

    def test_gamma_zero_reduces_to_weighted_bce(self):
        gen = torch.Generator().manual_seed(0)
        v = torch.rand(6, generator=gen, dtype=torch.float64) * 0.8 + 0.1
        t = torch.tensor([True, False, True, True, False, False])
        got = float(focal_loss(v, t, alpha=0.5, gamma=0.0))
        bce = torch.nn.functional.binary_cross_entropy(v, t.double())
        assert got == pytest.approx(0.5 * float(bce), abs=1e-9)

    def test_clamps_exact_zero_and_one(self):
        v = torch.tensor([0.0, 1.0], dtype=torch.float64)
        t = torch.tensor([True, False])
        assert math.isfinite(float(focal_loss(v, t)))

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(1)
        for _ in range(100):
            v = torch.rand(5, generator=gen)
            t = torch.rand(5, generator=gen) > 0.5
            assert float(focal_loss(v, t)) >= 0.0

    def test_invalid_hyperparameters_rejected(self):
        v, t = torch.tensor([0.5]), torch.tensor([True])
        with pytest.raises(ValueError):
            focal_loss(v, t, alpha=1.5)
        with pytest.raises(ValueError):
            focal_loss(v, t, gamma=-1.0)

    def test_gradient_matches_finite_differences(self):
        v = torch.tensor([0.3, 0.7, 0.55], dtype=torch.float64, requires_grad=True)
        t = torch.tensor([True, False, True])
        loss = focal_loss(v, t)
        loss.backward()
        with torch.no_grad():
            numeric = central_difference(lambda: focal_loss(v, t), v.data, eps=1e-4)
        assert_grad_close(v.grad, numeric, rel=1e-3)


def embedding(seed, n=3, d=6, vis=None):
    g = rand((d,), seed)
    p = rand((n, d), seed + 100)
    v = torch.tensor(vis, dtype=torch.float64) if vis is not None else torch.full((n,), 1.0, dtype=torch.float64)
    return PersonEmbedding(g, p, v)


class TestPairwiseDistance:
    def test_all_parts_invisible_reduces_to_global(self):
        q = embedding(0, vis=[0.0, 0.0, 0.0])
        g = embedding(1)
        d = pairwise_distance(q, g)
        d_g = 1 - torch.nn.functional.cosine_similarity(q.global_vec, g.global_vec, dim=0)
        assert float(d) == pytest.approx(float(d_g), abs=1e-9)

    def test_constant_distances_pass_through(self):
        vec = rand((6,), 2)
        q = PersonEmbedding(vec, vec.expand(3, 6).contiguous(), torch.ones(3, dtype=torch.float64))
        g = PersonEmbedding(-vec, -vec.expand(3, 6).contiguous(), torch.ones(3, dtype=torch.float64))
        assert float(pairwise_distance(q, g)) == pytest.approx(2.0, abs=1e-9)

    def test_worked_example(self):
        # N=2, query vis (1,0), gallery vis (1,1), d_1=0.4, d_2=0.9, d_g=0.2
        def vec_at_angle(cos_target, seed):
            a = torch.tensor([1.0, 0.0], dtype=torch.float64)
            b = torch.tensor([cos_target, math.sqrt(1 - cos_target**2)], dtype=torch.float64)
            return a, b

        qg, gg = vec_at_angle(0.8, 0)  # d_g = 0.2
        q1, g1 = vec_at_angle(0.6, 1)  # d_1 = 0.4
        q2, g2 = vec_at_angle(0.1, 2)  # d_2 = 0.9
        q = PersonEmbedding(qg, torch.stack([q1, q2]), torch.tensor([1.0, 0.0], dtype=torch.float64))
        g = PersonEmbedding(gg, torch.stack([g1, g2]), torch.tensor([1.0, 1.0], dtype=torch.float64))
        assert float(pairwise_distance(q, g)) == pytest.approx(0.3, abs=1e-9)

    def test_symmetry(self):
        for seed in range(20):
            q = embedding(seed, vis=[1.0, 0.8, 0.1])
            g = embedding(seed + 50, vis=[0.9, 0.2, 1.0])
            assert float(pairwise_distance(q, g)) == pytest.approx(
                float(pairwise_distance(g, q)), abs=1e-12
            )

    def test_weighted_mean_bounds(self):
        for seed in range(50):
            q = embedding(seed)
            g = embedding(seed + 1000)
            d = float(pairwise_distance(q, g))
            d_parts = 1 - torch.nn.functional.cosine_similarity(q.parts, g.parts, dim=-1)
            d_g = 1 - torch.nn.functional.cosine_similarity(q.global_vec, g.global_vec, dim=0)
            used = torch.cat([d_parts, d_g.reshape(1)])
            assert float(used.min()) - 1e-9 <= d <= float(used.max()) + 1e-9

    def test_masked_part_has_no_influence(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(1000):
            q = PersonEmbedding(
                torch.randn(4, generator=gen, dtype=torch.float64),
                torch.randn(2, 4, generator=gen, dtype=torch.float64),
                torch.tensor([1.0, 0.0], dtype=torch.float64),
            )
            g = PersonEmbedding(
                torch.randn(4, generator=gen, dtype=torch.float64),
                torch.randn(2, 4, generator=gen, dtype=torch.float64),
                torch.tensor([1.0, 1.0], dtype=torch.float64),
            )
            base = float(pairwise_distance(q, g))
            perturbed_parts = g.parts.clone()
            perturbed_parts[1] = torch.randn(4, generator=gen, dtype=torch.float64)
            g2 = PersonEmbedding(g.global_vec, perturbed_parts, g.visibility)
            assert float(pairwise_distance(q, g2)) == pytest.approx(base, abs=1e-12)

    def test_matches_loop_oracle(self):
        for seed in range(100):
            q = embedding(seed, vis=[1.0, 0.3, 0.8])
            g = embedding(seed + 7, vis=[0.6, 0.9, 0.2])
            fast = float(pairwise_distance(q, g))
            slow = loop_pair_distance(
                q.global_vec.numpy(), q.parts.numpy(), q.visibility.numpy(),
                g.global_vec.numpy(), g.parts.numpy(), g.visibility.numpy(),
            )
            assert fast == pytest.approx(slow, abs=1e-9)

    def test_raw_visibility_mode(self):
        q = embedding(0, vis=[0.6, 0.4, 0.8])
        g = embedding(1, vis=[0.7, 0.9, 0.3])
        hard = float(pairwise_distance(q, g, binarize=True))
        soft = float(pairwise_distance(q, g, binarize=False))
        assert hard != pytest.approx(soft, abs=1e-6)
        slow = loop_pair_distance(
            q.global_vec.numpy(), q.parts.numpy(), q.visibility.numpy(),
            g.global_vec.numpy(), g.parts.numpy(), g.visibility.numpy(), binarize=False,
        )
        assert soft == pytest.approx(slow, abs=1e-9)
