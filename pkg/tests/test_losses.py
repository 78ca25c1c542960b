"""Distillation objectives: hand-computed distance and KL oracles, pair
enumeration contracts, accumulation-order equivalence, nullity on identical
networks, residual-chain term counts, and gradient checks."""

from __future__ import annotations

import math

import pytest
import torch

from reviewkd.core import (
    STUDENT,
    TEACHER,
    ConfigError,
    DistillConfig,
    FeatureMap,
    ShapeMismatchError,
    StageOutputs,
)
from reviewkd.fusion import HCL
from reviewkd.losses import (
    DistillModules,
    LossBreakdown,
    build_residual_fusers,
    build_transforms,
    distance,
    kd_baseline_loss,
    kd_logit_loss,
    mkd_loss,
    mkd_review_naive_loss,
    mkd_review_reordered_loss,
    mkd_review_residual_loss,
    pair_loss,
    review_pairs,
    same_stage_pairs,
    skd_loss,
    skd_review_loss,
    total_loss,
)
from reviewkd.nets import StudentTransform, build_net, make_identity_net

from conftest import fd_input_gradient_check, make_outputs, random_stage_shapes


def _mse_loop(a: torch.Tensor, b: torch.Tensor) -> float:
    total, count = 0.0, 0
    for x, y in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        total += (x - y) ** 2
        count += 1
    return total / count


def _softmax(row: list[float]) -> list[float]:
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    z = sum(exps)
    return [e / z for e in exps]


def _kl_oracle(student_logits, teacher_logits, temperature: float) -> float:
    """Softened KL(teacher || student), averaged over the batch, times T^2."""
    total = 0.0
    rows = 0
    for s_row, t_row in zip(student_logits.tolist(), teacher_logits.tolist()):
        ps = _softmax([v / temperature for v in s_row])
        pt = _softmax([v / temperature for v in t_row])
        total += sum(p * (math.log(p) - math.log(q)) for p, q in zip(pt, ps))
        rows += 1
    return total / rows * temperature**2


def _random_transforms(student_shapes, teacher_shapes, pairs, seed=0):
    """A TransformSet over fabricated shapes with randomized conv weights,
    frozen in eval mode so repeated calls see identical normalization."""
    g = torch.Generator().manual_seed(seed)
    transforms = {}
    for i, j in pairs:
        c_in = student_shapes[i - 1][0]
        c_out, h, w = teacher_shapes[j - 1]
        t = StudentTransform(c_in, c_out, (h, w))
        with torch.no_grad():
            t.conv.weight.copy_(torch.randn(t.conv.weight.shape, generator=g) * 0.4)
            t.conv.bias.copy_(torch.randn(t.conv.bias.shape, generator=g) * 0.1)
        transforms[(i, j)] = t
    from reviewkd.losses import TransformSet

    ts = TransformSet(transforms).eval()
    ts.requires_grad_(False)  # value-comparison tests read floats from the result
    return ts


class TestDistance:
    def test_constant_offset_oracle(self):
        a = torch.zeros(2, 3, 4, 4)
        b = torch.full((2, 3, 4, 4), 2.0)
        assert float(distance(a, b)) == pytest.approx(4.0, abs=1e-7)

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(20):
            shape = tuple(int(torch.randint(1, 5, (1,), generator=g)) for _ in range(4))
            a = torch.randn(shape, generator=g)
            b = torch.randn(shape, generator=g)
            assert float(distance(a, b)) == pytest.approx(_mse_loop(a, b), rel=1e-5)

    def test_accepts_feature_maps_and_tensors(self):
        data = torch.randn(2, 3, 4, 4)
        fm = FeatureMap(data=data, stage=1, source=STUDENT)
        assert float(distance(fm, data)) == 0.0
        assert float(distance(data, fm)) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            distance(torch.zeros(2, 3, 4, 4), torch.zeros(2, 3, 4, 5))


class TestPairEnumeration:
    def test_same_stage_pairs(self):
        assert same_stage_pairs(3) == [(1, 1), (2, 2), (3, 3)]
        assert same_stage_pairs(1) == [(1, 1)]

    def test_review_pairs_student_major(self):
        assert review_pairs(3) == [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]

    @pytest.mark.parametrize("n", range(1, 7))
    def test_review_pair_count(self, n):
        assert len(review_pairs(n)) == n * (n + 1) // 2
        assert len(same_stage_pairs(n)) == n

    @pytest.mark.parametrize("n", range(1, 5))
    def test_loss_term_counts_match_enumeration(self, n):
        g = torch.Generator().manual_seed(10 + n)
        s_shapes = random_stage_shapes(n, g)
        t_shapes = random_stage_shapes(n, g)
        student = make_outputs(s_shapes, source=STUDENT, seed=20 + n)
        teacher = make_outputs(t_shapes, source=TEACHER, seed=30 + n)
        transforms = _random_transforms(s_shapes, t_shapes, review_pairs(n), seed=n)
        naive = mkd_review_naive_loss(student, teacher, transforms)
        assert len(naive.per_pair) == n * (n + 1) // 2
        assert list(naive.per_pair) == review_pairs(n)
        same = mkd_loss(student, teacher, transforms)
        assert len(same.per_pair) == n
        assert list(same.per_pair) == same_stage_pairs(n)


class TestAccumulationOrder:
    """The reviewed pair set summed student-major and teacher-major is the
    same multiset of terms, so totals agree up to float association."""

    @pytest.mark.parametrize("n", range(1, 5))
    def test_naive_equals_reordered(self, n):
        for trial in range(5):
            g = torch.Generator().manual_seed(100 * n + trial)
            s_shapes = random_stage_shapes(n, g)
            t_shapes = random_stage_shapes(n, g)
            student = make_outputs(s_shapes, source=STUDENT, seed=7 * n + trial)
            teacher = make_outputs(t_shapes, source=TEACHER, seed=9 * n + trial)
            transforms = _random_transforms(
                s_shapes, t_shapes, review_pairs(n), seed=trial
            )
            naive = mkd_review_naive_loss(student, teacher, transforms)
            reordered = mkd_review_reordered_loss(student, teacher, transforms)
            assert set(naive.per_pair) == set(reordered.per_pair)
            for key in naive.per_pair:
                assert float(naive.per_pair[key]) == float(reordered.per_pair[key])
            a, b = float(naive.total), float(reordered.total)
            assert abs(a - b) <= 1e-6 * max(abs(a), abs(b), 1.0)

    def test_reordered_insertion_is_teacher_major(self):
        n = 3
        g = torch.Generator().manual_seed(5)
        s_shapes = random_stage_shapes(n, g)
        t_shapes = random_stage_shapes(n, g)
        student = make_outputs(s_shapes, source=STUDENT, seed=1)
        teacher = make_outputs(t_shapes, source=TEACHER, seed=2)
        transforms = _random_transforms(s_shapes, t_shapes, review_pairs(n))
        reordered = mkd_review_reordered_loss(student, teacher, transforms)
        assert list(reordered.per_pair) == [
            (1, 1), (2, 1), (3, 1), (2, 2), (3, 2), (3, 3),
        ]

    def test_subset_sums(self):
        """mkd is the same-level slice of the reviewed set; skd_review(i) is
        the student-stage-i slice."""
        n = 4
        g = torch.Generator().manual_seed(6)
        s_shapes = random_stage_shapes(n, g)
        t_shapes = random_stage_shapes(n, g)
        student = make_outputs(s_shapes, source=STUDENT, seed=3)
        teacher = make_outputs(t_shapes, source=TEACHER, seed=4)
        transforms = _random_transforms(s_shapes, t_shapes, review_pairs(n))
        naive = mkd_review_naive_loss(student, teacher, transforms)
        same = mkd_loss(student, teacher, transforms)
        for i in range(1, n + 1):
            assert float(same.per_pair[(i, i)]) == float(naive.per_pair[(i, i)])
        row = skd_review_loss(student, teacher, 3, transforms)
        expected = sum(float(naive.per_pair[(3, j)]) for j in range(1, 4))
        assert float(row.total) == pytest.approx(expected, rel=1e-6)
        single = skd_loss(student, teacher, 2, transforms)
        assert float(single.total) == float(naive.per_pair[(2, 2)])

    def test_per_teacher_stage_grouping(self):
        n = 3
        g = torch.Generator().manual_seed(8)
        s_shapes = random_stage_shapes(n, g)
        t_shapes = random_stage_shapes(n, g)
        student = make_outputs(s_shapes, source=STUDENT, seed=5)
        teacher = make_outputs(t_shapes, source=TEACHER, seed=6)
        transforms = _random_transforms(s_shapes, t_shapes, review_pairs(n))
        breakdown = mkd_review_naive_loss(student, teacher, transforms)
        groups = breakdown.per_teacher_stage()
        for j in range(1, n + 1):
            expected = sum(
                float(v) for (i, jj), v in breakdown.per_pair.items() if jj == j
            )
            assert float(groups[j]) == pytest.approx(expected, rel=1e-6)


class TestNullity:
    """Structurally identical student and teacher with identity transforms
    must incur zero loss: there is nothing left to distill."""

    def _identity_setup(self, n=4, hw=8):
        net = make_identity_net(n, channels=3)
        x = torch.randn(2, 3, hw, hw, generator=torch.Generator().manual_seed(42))
        out = net.forward_with_stages(x)
        transforms = build_transforms(net, net, review_pairs(n), (hw, hw))
        transforms.init_identity().eval().requires_grad_(False)
        return out, transforms

    def test_skd_nullity(self):
        out, transforms = self._identity_setup()
        for i in range(1, 5):
            assert abs(float(skd_loss(out, out, i, transforms).total)) < 1e-9

    def test_mkd_nullity(self):
        out, transforms = self._identity_setup()
        assert abs(float(mkd_loss(out, out, transforms).total)) < 1e-9

    def test_skd_review_nullity(self):
        out, transforms = self._identity_setup()
        for i in range(1, 5):
            assert abs(float(skd_review_loss(out, out, i, transforms).total)) < 1e-9

    def test_mkd_review_naive_nullity(self):
        out, transforms = self._identity_setup()
        assert abs(float(mkd_review_naive_loss(out, out, transforms).total)) < 1e-9


class TestResidualChain:
    @pytest.mark.parametrize("n", range(1, 6))
    def test_exactly_n_terms(self, n):
        net = make_identity_net(n, channels=3)
        fusers = build_residual_fusers(net, net, (8, 8))
        out = net.forward_with_stages(torch.randn(2, 3, 8, 8))
        breakdown = mkd_review_residual_loss(out, out, fusers)
        assert len(breakdown.per_pair) == n
        assert list(breakdown.per_pair) == [(j, j) for j in range(n, 0, -1)]

    def test_real_pair_finite_and_positive(self):
        student = build_net("tiny-resnet-8", classes=5, seed=0)
        teacher = build_net("tiny-wrn-16-2", classes=5, seed=1)
        fusers = build_residual_fusers(student, teacher, (16, 16))
        x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            breakdown = mkd_review_residual_loss(
                student.forward_with_stages(x), teacher.forward_with_stages(x), fusers
            )
        assert torch.isfinite(breakdown.total)
        assert float(breakdown.total) > 0
        assert list(breakdown.per_pair) == [(4, 4), (3, 3), (2, 2), (1, 1)]

    def test_depth_mismatch_rejected(self):
        net3 = make_identity_net(3, channels=3)
        net4 = make_identity_net(4, channels=3)
        fusers = build_residual_fusers(net3, net3, (8, 8))
        out4 = net4.forward_with_stages(torch.randn(2, 3, 8, 8))
        with pytest.raises((ConfigError, ShapeMismatchError)):
            mkd_review_residual_loss(out4, out4, fusers)

    def test_single_level_pyramid_matches_plain_distance(self):
        net = make_identity_net(3, channels=3)
        fusers = build_residual_fusers(net, net, (8, 8))
        fusers.requires_grad_(False)
        student = net.forward_with_stages(torch.randn(2, 3, 8, 8))
        teacher = net.forward_with_stages(torch.randn(2, 3, 8, 8))
        plain = mkd_review_residual_loss(student, teacher, fusers, hcl=None)
        pyramid = mkd_review_residual_loss(student, teacher, fusers, hcl=HCL((8,)))
        assert float(plain.total) == pytest.approx(float(pyramid.total), abs=1e-7)

    def test_stage_count_property(self):
        net = make_identity_net(4, channels=3)
        fusers = build_residual_fusers(net, net, (8, 8))
        assert fusers.n_stages == 4
        assert len(fusers.fusers) == 3


class TestTotalLoss:
    def test_uniform_logits_cross_entropy(self):
        for k in (2, 5, 8):
            logits = torch.zeros(4, k)
            labels = torch.arange(4) % k
            breakdown = total_loss(logits, labels, torch.zeros(()), 0.0)
            assert float(breakdown.ce) == pytest.approx(math.log(k), rel=1e-6)

    def test_lambda_scaling(self):
        logits = torch.randn(4, 5, generator=torch.Generator().manual_seed(0))
        labels = torch.tensor([0, 1, 2, 3])
        distill = torch.tensor(1.75)
        breakdown = total_loss(logits, labels, distill, 2.5)
        expected = float(breakdown.ce) + 2.5 * 1.75
        assert float(breakdown.total) == pytest.approx(expected, rel=1e-6)
        assert float(breakdown.distill) == pytest.approx(1.75)

    def test_zero_lambda_total_is_exactly_ce(self):
        logits = torch.randn(4, 5, generator=torch.Generator().manual_seed(1))
        labels = torch.tensor([0, 1, 2, 3])
        breakdown = total_loss(logits, labels, torch.tensor(123.0), 0.0)
        assert breakdown.total is breakdown.ce

    def test_breakdown_per_pair_preserved(self):
        logits = torch.randn(2, 4)
        labels = torch.tensor([0, 1])
        inner = LossBreakdown(
            total=torch.tensor(3.0), per_pair={(1, 1): torch.tensor(3.0)}
        )
        breakdown = total_loss(logits, labels, inner, 1.0)
        assert set(breakdown.per_pair) == {(1, 1)}

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            total_loss(torch.zeros(2, 3), torch.tensor([0, 1]), torch.zeros(()), -1.0)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            total_loss(torch.zeros(2, 3), torch.tensor([0, 3]), torch.zeros(()), 0.0)
        with pytest.raises(ConfigError):
            total_loss(torch.zeros(2, 3), torch.tensor([-1, 0]), torch.zeros(()), 0.0)


class TestLogitDistillation:
    def test_identical_logits_zero(self):
        logits = torch.randn(3, 6, generator=torch.Generator().manual_seed(2))
        assert abs(float(kd_logit_loss(logits, logits.clone()))) < 1e-5

    def test_matches_softmax_oracle(self):
        g = torch.Generator().manual_seed(4)
        for temperature in (1.0, 2.0, 4.0):
            for _ in range(5):
                s = torch.randn(3, 4, generator=g)
                t = torch.randn(3, 4, generator=g)
                expected = _kl_oracle(s, t, temperature)
                assert float(kd_logit_loss(s, t, temperature)) == pytest.approx(
                    expected, rel=1e-5, abs=1e-7
                )

    def test_invalid_temperature_rejected(self):
        logits = torch.zeros(2, 3)
        for value in (0.0, -1.0):
            with pytest.raises(ConfigError):
                kd_logit_loss(logits, logits, temperature=value)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            kd_logit_loss(torch.zeros(2, 3), torch.zeros(2, 4))

    def test_baseline_mix_weights(self):
        g = torch.Generator().manual_seed(9)
        s = torch.randn(4, 5, generator=g)
        t = torch.randn(4, 5, generator=g)
        labels = torch.tensor([0, 1, 2, 3])
        breakdown = kd_baseline_loss(s, t, labels, temperature=2.0, soft_weight=0.9)
        expected = 0.1 * float(breakdown.ce) + 0.9 * float(
            kd_logit_loss(s, t, temperature=2.0)
        )
        assert float(breakdown.total) == pytest.approx(expected, rel=1e-6)

    def test_baseline_equal_logits_reduces_to_scaled_ce(self):
        logits = torch.randn(4, 5, generator=torch.Generator().manual_seed(11))
        labels = torch.tensor([0, 1, 2, 3])
        breakdown = kd_baseline_loss(logits, logits.clone(), labels, soft_weight=0.9)
        assert float(breakdown.total) == pytest.approx(
            0.1 * float(breakdown.ce), rel=1e-5, abs=1e-7
        )


class TestModuleDispatch:
    def _pair(self):
        student = build_net("tiny-resnet-8", classes=5, seed=0)
        teacher = build_net("tiny-wrn-16-2", classes=5, seed=1)
        return student, teacher

    def _outputs(self, student, teacher):
        x = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(3))
        return student.forward_with_stages(x), teacher.forward_with_stages(x)

    def test_same_level_mechanism(self):
        student, teacher = self._pair()
        modules = DistillModules.from_config(
            DistillConfig(mechanism="mkd"), student, teacher, (16, 16)
        )
        breakdown = modules.loss(*self._outputs(student, teacher))
        assert list(breakdown.per_pair) == same_stage_pairs(4)

    def test_review_naive_mechanism(self):
        student, teacher = self._pair()
        modules = DistillModules.from_config(
            DistillConfig(mechanism="mkd_review_naive"), student, teacher, (16, 16)
        )
        breakdown = modules.loss(*self._outputs(student, teacher))
        assert list(breakdown.per_pair) == review_pairs(4)

    def test_single_pair_mechanism(self):
        student, teacher = self._pair()
        modules = DistillModules.from_config(
            DistillConfig(mechanism="skd", stage_pair=(2, 1)),
            student,
            teacher,
            (16, 16),
        )
        breakdown = modules.loss(*self._outputs(student, teacher))
        assert list(breakdown.per_pair) == [(2, 1)]

    def test_single_stage_review_mechanism(self):
        student, teacher = self._pair()
        modules = DistillModules.from_config(
            DistillConfig(mechanism="skd_review", stage_pair=(3, 3)),
            student,
            teacher,
            (16, 16),
        )
        breakdown = modules.loss(*self._outputs(student, teacher))
        assert list(breakdown.per_pair) == [(3, 1), (3, 2), (3, 3)]

    def test_residual_mechanism_flags(self):
        student, teacher = self._pair()
        full = DistillModules.from_config(
            DistillConfig(mechanism="mkd_review_residual"), student, teacher, (16, 16)
        )
        assert full.fusers is not None
        assert full.hcl is not None
        assert all(f.attention for f in full.fusers.fusers)
        bare = DistillModules.from_config(
            DistillConfig(
                mechanism="mkd_review_residual", use_abf=False, use_hcl=False
            ),
            student,
            teacher,
            (16, 16),
        )
        assert bare.hcl is None
        assert not any(f.attention for f in bare.fusers.fusers)
        breakdown = full.loss(*self._outputs(student, teacher))
        assert len(breakdown.per_pair) == 4

    def test_unknown_mechanism_rejected(self):
        student, teacher = self._pair()
        with pytest.raises(ConfigError):
            DistillModules.from_config(
                DistillConfig(mechanism="banana"), student, teacher, (16, 16)
            )


class TestGradients:
    def test_transform_parameters_receive_gradient(self):
        n = 2
        g = torch.Generator().manual_seed(12)
        s_shapes = random_stage_shapes(n, g)
        t_shapes = random_stage_shapes(n, g)
        student = make_outputs(s_shapes, source=STUDENT, seed=13)
        teacher = make_outputs(t_shapes, source=TEACHER, seed=14)
        transforms = _random_transforms(s_shapes, t_shapes, review_pairs(n))
        transforms.train().requires_grad_(True)
        breakdown = mkd_review_naive_loss(student, teacher, transforms)
        breakdown.total.backward()
        for module in transforms.modules_by_pair.values():
            assert module.conv.weight.grad is not None
            assert torch.isfinite(module.conv.weight.grad).all()

    def test_student_transform_finite_difference(self):
        transform = StudentTransform(3, 4, (4, 4)).double()
        transform.train()
        x = torch.randn(2, 3, 6, 6, generator=torch.Generator().manual_seed(15))

        def fn(inp):
            return transform(inp).square().sum()

        fd_input_gradient_check(fn, [x], max_coords=12)

    def test_residual_loss_finite_difference(self):
        net = make_identity_net(2, channels=2)
        fusers = build_residual_fusers(net, net, (6, 6)).double()
        fusers.eval()
        g = torch.Generator().manual_seed(16)
        tensors = [torch.randn(2, 2, 6, 6, generator=g) for _ in range(4)]

        def fn(s1, s2, t1, t2):
            student = StageOutputs(
                features=[
                    FeatureMap(data=s1, stage=1, source=STUDENT),
                    FeatureMap(data=s2, stage=2, source=STUDENT),
                ],
                logits=torch.zeros(2, 2, dtype=torch.float64),
            )
            teacher = StageOutputs(
                features=[
                    FeatureMap(data=t1, stage=1, source=TEACHER),
                    FeatureMap(data=t2, stage=2, source=TEACHER),
                ],
                logits=torch.zeros(2, 2, dtype=torch.float64),
            )
            return mkd_review_residual_loss(student, teacher, fusers).total

        fd_input_gradient_check(fn, tensors, max_coords=8)
