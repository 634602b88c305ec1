"""Merging network: blocks, shot aggregation, pyramid decode, loss law."""

import numpy as np
import pytest

from mshnet.backbone import FeaturePyramid, MaskPyramid, PyramidBlock
from mshnet.errors import ConfigError, ShapeError, UsageError
from mshnet.gradcheck import grad_check, max_error
from mshnet.model import (
    ModelConfig, MultiSimilarityNet, SegLogits, block_conv, combine_losses,
    init_model_params, merge_conv, predict_mask, pyramid_merge, shot_conv,
    smb_forward, total_loss,
)
from mshnet.params import sgd_step
from mshnet.tensor import Tensor

from test_tensor_ops import channel_attention_oracle, conv2d_oracle


TINY = ModelConfig(block_ids=(2, 3), layer_dims=((3,), (3,)), hidden_channels=4,
                   attention_ratio=4, similarity_mode="both")


def tiny_params(seed=0, cfg=TINY):
    return init_model_params(cfg, seed=seed)


def random_pyramid(rng, dims=((3,), (3,)), sizes=((4, 4), (2, 2)), dtype=np.float32):
    blocks = []
    for i, (layer_dims, hw) in enumerate(zip(dims, sizes)):
        layers = [Tensor(rng.standard_normal((d, *hw)).astype(dtype)) for d in layer_dims]
        blocks.append(PyramidBlock(2 + i, layers))
    return FeaturePyramid(blocks)


def random_mask_pyramid(rng, sizes=((4, 4), (2, 2)), dtype=np.float32):
    masks = {}
    for i, hw in enumerate(sizes):
        m = (rng.uniform(size=(1, *hw)) > 0.4).astype(dtype)
        m.reshape(-1)[0] = 1.0  # keep at least one positive position
        masks[2 + i] = Tensor(m)
    return MaskPyramid(masks)


def make_episode(rng, k=1, dtype=np.float32):
    support = [(random_pyramid(rng, dtype=dtype), random_mask_pyramid(rng, dtype=dtype))
               for _ in range(k)]
    query = random_pyramid(rng, dtype=dtype)
    target = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)
    return support, query, target


class TestBlockConv:
    def test_zero_stack_propagates_zero(self):
        params = tiny_params()
        out = block_conv(Tensor(np.zeros((1, 4, 4), dtype=np.float32)), "gps", 2, params)
        assert np.all(out.data == 0.0)

    def test_spatial_size_preserved(self):
        params = tiny_params()
        out = block_conv(Tensor(np.random.default_rng(0).uniform(0, 1, (1, 5, 7)).astype(np.float32)),
                         "cos", 2, params)
        assert out.shape == (4, 5, 7)

    def test_matches_composed_oracle(self):
        params = tiny_params()
        rng = np.random.default_rng(1)
        stack = rng.uniform(0, 1, (1, 4, 4)).astype(np.float32)
        out = block_conv(Tensor(stack), "gps", 2, params)
        h = np.maximum(conv2d_oracle(stack, params["smb.b2.gps.block.conv1.w"].data,
                                     params["smb.b2.gps.block.conv1.b"].data), 0)
        expect = np.maximum(conv2d_oracle(h.astype(np.float32),
                                          params["smb.b2.gps.block.conv2.w"].data,
                                          params["smb.b2.gps.block.conv2.b"].data), 0)
        assert np.max(np.abs(out.data - expect)) < 1e-5

    def test_channel_mismatch_rejected(self):
        params = tiny_params()
        with pytest.raises(ShapeError):
            block_conv(Tensor(np.zeros((2, 4, 4), dtype=np.float32)), "gps", 2, params)


class TestShotConv:
    def test_zero_input_propagates_zero(self):
        params = tiny_params()
        zero = Tensor(np.zeros((4, 4, 4), dtype=np.float32))
        assert np.all(shot_conv(zero, "gps", 2, params).data == 0.0)
        assert np.all(shot_conv(zero, "cos", 2, params).data == 0.0)

    def test_gps_branch_matches_dilated_oracle_sum(self):
        params = tiny_params()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 5, 5)).astype(np.float32)
        out = shot_conv(Tensor(x), "gps", 2, params)
        acc = np.zeros((4, 5, 5))
        for r in (1, 2, 4):
            acc += conv2d_oracle(x, params[f"smb.b2.gps.shot.r{r}.w"].data,
                                 params[f"smb.b2.gps.shot.r{r}.b"].data, dilation=r)
        assert np.max(np.abs(out.data - np.maximum(acc, 0))) < 1e-5


class TestMergeConv:
    def test_zero_inputs_propagate_zero(self):
        params = tiny_params()
        zero = Tensor(np.zeros((4, 3, 3), dtype=np.float32))
        hyper = merge_conv([zero, zero], 2, params)
        assert np.all(hyper.channels.data == 0.0)

    def test_shape_contract(self):
        params = tiny_params()
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((4, 3, 5)).astype(np.float32))
        b = Tensor(rng.standard_normal((4, 3, 5)).astype(np.float32))
        hyper = merge_conv([a, b], 2, params)
        assert hyper.channels.shape == (4, 3, 5)

    def test_matches_composed_oracle(self):
        params = tiny_params()
        rng = np.random.default_rng(4)
        a = rng.standard_normal((4, 3, 3)).astype(np.float32)
        b = rng.standard_normal((4, 3, 3)).astype(np.float32)
        hyper = merge_conv([Tensor(a), Tensor(b)], 2, params)
        cat = np.concatenate([a, b], axis=0)
        h = np.maximum(conv2d_oracle(cat, params["smb.b2.merge.conv.w"].data,
                                     params["smb.b2.merge.conv.b"].data), 0).astype(np.float32)
        expect = channel_attention_oracle(h, params["smb.b2.merge.attn.fc1.w"].data,
                                          params["smb.b2.merge.attn.fc1.b"].data,
                                          params["smb.b2.merge.attn.fc2.w"].data,
                                          params["smb.b2.merge.attn.fc2.b"].data)
        assert np.max(np.abs(hyper.channels.data - expect)) < 1e-5


class TestEpisodeForward:
    def test_identical_shots_reproduce_single_shot(self):
        params = tiny_params(seed=5)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(6)
        spyr, smask = random_pyramid(rng), random_mask_pyramid(rng)
        query = random_pyramid(rng)
        one = net.forward_episode([(spyr, smask)], query, (8, 8))
        five = net.forward_episode([(spyr, smask)] * 5, query, (8, 8))
        assert np.array_equal(one.final.logits.data, five.final.logits.data)
        for a, b in zip(one.inner, five.inner):
            assert np.array_equal(a.logits.data, b.logits.data)

    def test_shot_permutation_invariance_bit_exact(self):
        params = tiny_params(seed=7)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(8)
        support = [(random_pyramid(rng), random_mask_pyramid(rng)) for _ in range(5)]
        query = random_pyramid(rng)
        base = net.forward_episode(support, query, (8, 8))
        for _ in range(3):
            order = rng.permutation(5)
            shuffled = net.forward_episode([support[i] for i in order], query, (8, 8))
            assert np.array_equal(base.final.logits.data, shuffled.final.logits.data)

    def test_intermediate_logits_at_query_size(self):
        params = tiny_params(seed=9)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(10)
        support, query, _ = make_episode(rng)
        out = net.forward_episode(support, query, (10, 12))
        assert out.final.logits.shape == (2, 10, 12)
        for s in out.inner:
            assert s.logits.shape == (2, 10, 12)
        assert len(out.inner) == len(TINY.block_ids)

    def test_inconsistent_shot_shapes_rejected(self):
        params = tiny_params(seed=11)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(12)
        good = (random_pyramid(rng), random_mask_pyramid(rng))
        bad_pyr = random_pyramid(rng, dims=((5,), (5,)))
        with pytest.raises(ShapeError):
            net.forward_episode([good, (bad_pyr, random_mask_pyramid(rng))],
                                random_pyramid(rng), (8, 8))

    def test_similarity_maps_collected_per_block(self):
        params = tiny_params(seed=13)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(14)
        support, query, _ = make_episode(rng, k=2)
        out = net.forward_episode(support, query, (8, 8))
        # 2 shots x 1 layer x 2 kinds per block
        assert sorted(out.block_maps) == [2, 3]
        assert all(len(v) == 4 for v in out.block_maps.values())


class TestAblationModes:
    @pytest.mark.parametrize("mode", ["gps", "cosine"])
    def test_single_branch_still_segments(self, mode):
        cfg = ModelConfig(block_ids=(2, 3), layer_dims=((3,), (3,)), hidden_channels=4,
                          similarity_mode=mode)
        net = MultiSimilarityNet(cfg, init_model_params(cfg, seed=15))
        rng = np.random.default_rng(16)
        support, query, _ = make_episode(rng)
        out = net.forward_episode(support, query, (8, 8))
        assert out.final.logits.shape == (2, 8, 8)

    def test_disabled_branch_has_no_parameters(self):
        both = init_model_params(TINY, seed=0)
        gps_only = init_model_params(
            ModelConfig(block_ids=(2, 3), layer_dims=((3,), (3,)), hidden_channels=4,
                        similarity_mode="gps"), seed=0)
        cos_only = init_model_params(
            ModelConfig(block_ids=(2, 3), layer_dims=((3,), (3,)), hidden_channels=4,
                        similarity_mode="cosine"), seed=0)
        assert not any("cos" in n for n in gps_only.names())
        assert not any(n.startswith("gps") or ".gps." in n for n in cos_only.names())
        assert both.element_count() > gps_only.element_count()
        assert both.element_count() > cos_only.element_count()

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(block_ids=(2,), layer_dims=((3,),), similarity_mode="neither")


class TestPyramidMerge:
    def test_single_block_skips_fusion(self):
        cfg = ModelConfig(block_ids=(2,), layer_dims=((3,),), hidden_channels=4)
        params = init_model_params(cfg, seed=17)
        net = MultiSimilarityNet(cfg, params)
        rng = np.random.default_rng(18)
        support = [(random_pyramid(rng, dims=((3,),), sizes=((4, 4),)),
                    random_mask_pyramid(rng, sizes=((4, 4),)))]
        query = random_pyramid(rng, dims=((3,),), sizes=((4, 4),))
        out = net.forward_episode(support, query, (8, 8))
        assert out.final.logits.shape == (2, 8, 8)

    def test_empty_input_rejected(self):
        with pytest.raises(UsageError):
            pyramid_merge([], tiny_params(), (8, 8))

    def test_argmax_tie_resolves_to_background(self):
        logits = SegLogits(Tensor(np.zeros((2, 3, 3), dtype=np.float32)))
        assert np.all(predict_mask(logits) == 0)
        fg = np.zeros((2, 2, 2), dtype=np.float32)
        fg[1] = 1.0
        assert np.all(predict_mask(SegLogits(Tensor(fg))) == 1)


class TestLoss:
    def test_eq_arithmetic(self):
        inner = [Tensor(np.array(v)) for v in (0.3, 0.6, 0.9)]
        outer = Tensor(np.array(0.5))
        report = combine_losses(inner, outer)
        assert report.total == pytest.approx(1.1, abs=1e-12)

    def test_zero_components(self):
        report = combine_losses([Tensor(np.array(0.0))], Tensor(np.array(0.0)))
        assert report.total == 0.0

    def test_single_inner(self):
        report = combine_losses([Tensor(np.array(0.25))], Tensor(np.array(0.125)))
        assert report.total == 0.375

    def test_law_total_equals_mean_inner_plus_outer(self):
        params = tiny_params(seed=19)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(20)
        for _ in range(20):
            support, query, target = make_episode(rng)
            out = net.forward_episode(support, query, (8, 8))
            report = total_loss(out.inner, out.final, target)
            acc = 0.0
            for v in report.inner:
                acc += v
            expect = acc / len(report.inner) + report.outer
            assert abs(report.total - expect) <= np.spacing(expect)
            assert report.total >= 0.0
            assert all(v >= 0.0 for v in report.inner) and report.outer >= 0.0

    def test_empty_inner_rejected(self):
        rng = np.random.default_rng(21)
        final = SegLogits(Tensor(rng.standard_normal((2, 4, 4)).astype(np.float32)))
        with pytest.raises(UsageError):
            total_loss([], final, np.zeros((4, 4)))


class TestTraining:
    def test_loss_halves_within_50_steps_on_fixed_episode(self):
        params = tiny_params(seed=22)
        net = MultiSimilarityNet(TINY, params)
        rng = np.random.default_rng(23)
        support, query, _ = make_episode(rng)
        target = np.zeros((8, 8))  # a target the coarse decoder can represent
        target[:, :4] = 1.0
        first = None
        last = None
        for _ in range(50):
            out = net.forward_episode(support, query, (8, 8))
            report = total_loss(out.inner, out.final, target)
            if first is None:
                first = report.total
            last = report.total
            report.total_node.backward()
            sgd_step(params, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert last <= 0.5 * first, f"loss {first:.4f} -> {last:.4f}"

    def test_end_to_end_gradients(self):
        cfg = ModelConfig(block_ids=(2, 3), layer_dims=((3,), (3,)), hidden_channels=4,
                          similarity_mode="both")
        params = init_model_params(cfg, seed=24)
        for _, t in params.items():
            t.data = t.data.astype(np.float64)
        net = MultiSimilarityNet(cfg, params)
        rng = np.random.default_rng(25)
        support, query, target = make_episode(rng, dtype=np.float64)

        def fn():
            out = net.forward_episode(support, query, (8, 8))
            return total_loss(out.inner, out.final, target).total_node

        reports = grad_check(fn, dict(params.items()), epsilon=1e-3,
                             rng=np.random.default_rng(26), max_probes=4,
                             skip_kink_probes=True)
        assert max_error(reports) < 1e-3
