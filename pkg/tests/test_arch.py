"""Composition oracles and structural invariants for the network family."""

import numpy as np
import pytest

from lcscnet.autodiff import (ConvKernel, Tensor, backward, concat_channels,
                              conv2d, gradient_error, identity_kernel_1x1,
                              nearest_upsample, relu, zeros_kernel)
from lcscnet.nets import (ConfigError, LCSCUnitParams, NearestStackHead,
                          NetworkConfig, SubPixelHead, build_network,
                          build_unit, e_lcsc_block_forward, feature_stack,
                          head_forward, lc_decomposition_check,
                          lcsc_block_forward, lcsc_unit_forward,
                          linear_chain_product_check, network_forward,
                          pfe_forward)


def random_unit(rng, width, rho):
    return build_unit(rng, width, rho)


class TestUnit:
    def test_pure_linear_identity(self):
        unit = LCSCUnitParams(identity_kernel_1x1(4), None)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 5, 5)))
        np.testing.assert_array_equal(lcsc_unit_forward(unit, x).data, x.data)

    def test_all_nonlinear_is_plain_feedforward(self):
        rng = np.random.default_rng(1)
        unit = random_unit(rng, 4, 1.0)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        got = lcsc_unit_forward(unit, x).data
        want = conv2d(relu(x), unit.k_nl, 1).data
        np.testing.assert_array_equal(got, want)

    def test_matches_hand_composition(self):
        rng = np.random.default_rng(2)
        unit = random_unit(rng, 6, 0.5)
        x = Tensor(rng.standard_normal((2, 6, 4, 4)))
        got = lcsc_unit_forward(unit, x).data
        want = concat_channels(conv2d(x, unit.k_l, 0),
                               conv2d(relu(x), unit.k_nl, 1)).data
        np.testing.assert_array_equal(got, want)
        assert got.shape == x.shape

    def test_linear_part_occupies_first_channels(self):
        rng = np.random.default_rng(3)
        unit = random_unit(rng, 6, 0.5)
        x = Tensor(rng.standard_normal((1, 6, 4, 4)))
        out = lcsc_unit_forward(unit, x).data
        np.testing.assert_array_equal(out[:, :unit.n1], conv2d(x, unit.k_l, 0).data)

    def test_width_mismatch_rejected(self):
        unit = random_unit(np.random.default_rng(4), 6, 0.5)
        with pytest.raises(Exception, match="channels"):
            lcsc_unit_forward(unit, Tensor(np.zeros((1, 5, 4, 4))))

    def test_inconsistent_split_rejected(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ConfigError):
            LCSCUnitParams(identity_kernel_1x1(4),
                           ConvKernel(rng.standard_normal((1, 4, 3, 3))))


class TestBlock:
    def test_single_unit_block_equals_unit(self):
        rng = np.random.default_rng(6)
        unit = random_unit(rng, 4, 0.5)
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        np.testing.assert_array_equal(lcsc_block_forward([unit], x).data,
                                      lcsc_unit_forward(unit, x).data)

    def test_identity_linear_units_give_identity_block(self):
        units = [LCSCUnitParams(identity_kernel_1x1(4), None) for _ in range(3)]
        x = Tensor(np.random.default_rng(7).standard_normal((1, 4, 4, 4)))
        np.testing.assert_array_equal(lcsc_block_forward(units, x).data, x.data)

    def test_three_unit_manual_composition(self):
        rng = np.random.default_rng(8)
        units = [random_unit(rng, 6, 0.5) for _ in range(3)]
        x = Tensor(rng.standard_normal((1, 6, 4, 4)))
        want = x
        for u in units:
            want = lcsc_unit_forward(u, want)
        np.testing.assert_array_equal(lcsc_block_forward(units, x).data, want.data)


class TestEnhancedBlock:
    @staticmethod
    def selection_bottleneck(n, keep_second):
        w = np.zeros((n, 2 * n, 1, 1))
        half = np.eye(n)
        w[:, n:, 0, 0] = half if keep_second else 0
        w[:, :n, 0, 0] = 0 if keep_second else half
        return ConvKernel(w)

    def test_selecting_block_half_reduces_to_plain_block(self):
        rng = np.random.default_rng(9)
        units = [random_unit(rng, 4, 0.5) for _ in range(2)]
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        out = e_lcsc_block_forward(units, self.selection_bottleneck(4, True), x)
        np.testing.assert_allclose(out.data, lcsc_block_forward(units, x).data)

    def test_selecting_input_half_ignores_units(self):
        rng = np.random.default_rng(10)
        units = [random_unit(rng, 4, 0.5) for _ in range(2)]
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        out = e_lcsc_block_forward(units, self.selection_bottleneck(4, False), x)
        np.testing.assert_allclose(out.data, x.data)

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(11)
        units = [random_unit(rng, 4, 0.5) for _ in range(2)]
        bottleneck = ConvKernel(rng.standard_normal((4, 8, 1, 1)))
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        want = conv2d(concat_channels(x, lcsc_block_forward(units, x)), bottleneck, 0)
        got = e_lcsc_block_forward(units, bottleneck, x)
        np.testing.assert_array_equal(got.data, want.data)

    def test_wrong_bottleneck_shape(self):
        rng = np.random.default_rng(12)
        units = [random_unit(rng, 4, 0.5)]
        with pytest.raises(Exception, match="bottleneck"):
            e_lcsc_block_forward(units, identity_kernel_1x1(4), Tensor(np.zeros((1, 4, 4, 4))))


class TestPfeAndHead:
    def test_pfe_delta_kernel_reproduces_input(self):
        w = np.zeros((4, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        x = Tensor(np.random.default_rng(13).standard_normal((1, 1, 5, 5)))
        out = pfe_forward(ConvKernel(w), x)
        np.testing.assert_array_equal(out.data[:, 0], x.data[:, 0])

    def test_pfe_zero_kernel(self):
        out = pfe_forward(zeros_kernel(1, 4, 3), Tensor(np.ones((1, 1, 5, 5))))
        assert np.all(out.data == 0)

    def test_nearest_stack_zero_final_kernel_gives_zero_hr(self):
        rng = np.random.default_rng(14)
        head = NearestStackHead(scale=2, convs=[
            ConvKernel(rng.standard_normal((4, 4, 3, 3))),
            ConvKernel(rng.standard_normal((4, 4, 3, 3))),
            zeros_kernel(4, 1, 3)])
        out = head_forward(head, Tensor(rng.standard_normal((1, 4, 6, 6))))
        assert out.shape == (1, 1, 12, 12)
        assert np.all(out.data == 0)

    @pytest.mark.parametrize("variant,scale", [("nearest_stack", 3), ("sub_pixel", 3),
                                               ("sub_pixel", 2), ("sub_pixel", 4),
                                               ("nearest_stack", 4)])
    def test_head_output_shape(self, variant, scale):
        config = NetworkConfig(blocks=1, units_per_block=1, width=4, rho=(0.5,),
                               scale=scale, head=variant, fusion=False)
        params = build_network(config)
        out = head_forward(params.head, Tensor(np.random.default_rng(15)
                                               .standard_normal((1, 4, 8, 8))))
        assert out.shape == (1, 1, 8 * scale, 8 * scale)

    def test_nearest_stack_matches_manual_composition(self):
        rng = np.random.default_rng(16)
        convs = [ConvKernel(rng.standard_normal((4, 4, 3, 3))) for _ in range(2)]
        convs.append(ConvKernel(rng.standard_normal((1, 4, 3, 3))))
        head = NearestStackHead(scale=2, convs=convs)
        x = Tensor(rng.standard_normal((1, 4, 5, 5)))
        want = conv2d(relu(conv2d(relu(conv2d(nearest_upsample(x, 2), convs[0], 1)),
                                  convs[1], 1)), convs[2], 1)
        np.testing.assert_array_equal(head_forward(head, x).data, want.data)


class TestNetworkForward:
    def test_single_block_no_fusion_returns_deepest(self):
        config = NetworkConfig(blocks=1, units_per_block=2, width=4, rho=(0.5,),
                               fusion=False, scale=2)
        params = build_network(config)
        x = Tensor(np.random.default_rng(17).standard_normal((1, 1, 6, 6)))
        intermediates, final = network_forward(params, config, x)
        assert len(intermediates) == 1
        assert final is intermediates[-1]

    def test_enhanced_degenerate_weights_collapse_outputs(self):
        config = NetworkConfig(blocks=3, units_per_block=2, width=4,
                               rho=(0.5, 0.5, 0.5), enhanced=True, fusion=False, scale=2)
        params = build_network(config)
        for units in params.blocks:
            for u in units:
                u.k_l.weight.data[...] = 0
                u.k_nl.weight.data[...] = 0
        for k in params.bottlenecks:
            k.weight.data[...] = 0
            k.bias.data[...] = 0
        x = Tensor(np.random.default_rng(18).standard_normal((1, 1, 6, 6)))
        intermediates, _ = network_forward(params, config, x)
        for y in intermediates[1:]:
            np.testing.assert_allclose(y.data, intermediates[0].data)

    def test_matches_layer_by_layer_composition(self):
        config = NetworkConfig(blocks=2, units_per_block=2, width=4, rho=(0.75, 0.5),
                               fusion=False, scale=2, seed=5)
        params = build_network(config)
        x = Tensor(np.random.default_rng(19).standard_normal((1, 1, 6, 6)))
        f = pfe_forward(params.pfe, x)
        outs = []
        for units in params.blocks:
            f = lcsc_block_forward(units, f)
            outs.append(head_forward(params.head, f))
        intermediates, final = network_forward(params, config, x)
        for got, want in zip(intermediates, outs):
            np.testing.assert_array_equal(got.data, want.data)
        np.testing.assert_array_equal(final.data, outs[-1].data)

    def test_channel_conservation_through_stack(self):
        config = NetworkConfig(blocks=2, units_per_block=3, width=8, rho=(0.75, 0.25),
                               fusion=False, scale=2)
        params = build_network(config)
        x = Tensor(np.random.default_rng(20).standard_normal((1, 1, 5, 5)))
        for f in feature_stack(params, config, x):
            assert f.shape[1] == config.width

    def test_head_parameters_are_shared(self):
        config = NetworkConfig(blocks=3, units_per_block=1, width=4, rho=(0.5,) * 3,
                               fusion=False, scale=2)
        params = build_network(config)
        head_tensors = {id(t) for name, t in params.named_parameters()
                        if name.startswith("head.")}
        assert len(head_tensors) == 6  # one shared set: three kernels x (weight, bias)

        x = Tensor(np.random.default_rng(21).standard_normal((1, 1, 6, 6)))
        before, _ = network_forward(params, config, x)
        params.head.convs[1].weight.data[0, 0, 1, 1] += 0.5
        after, _ = network_forward(params, config, x)
        for y0, y1 in zip(before, after):
            assert np.abs(y0.data - y1.data).max() > 0  # every depth shifted


class TestLinearPathIdentities:
    def test_decomposition_degenerate_splits(self):
        rng = np.random.default_rng(22)
        k = ConvKernel(rng.standard_normal((4, 4, 1, 1)), rng.standard_normal(4))
        y = rng.standard_normal((1, 4, 5, 5))
        assert lc_decomposition_check(k, y, 0)
        assert lc_decomposition_check(k, y, 4)

    def test_decomposition_random_split(self):
        rng = np.random.default_rng(23)
        k = ConvKernel(rng.standard_normal((6, 6, 1, 1)))
        y = rng.standard_normal((2, 6, 4, 4))
        assert lc_decomposition_check(k, y, 2)

    def test_chain_product_single_and_identity(self):
        rng = np.random.default_rng(24)
        one = [LCSCUnitParams(ConvKernel(rng.standard_normal((4, 4, 1, 1))), None)]
        y = rng.standard_normal((1, 4, 3, 3))
        assert linear_chain_product_check(one, y)
        eyes = [LCSCUnitParams(identity_kernel_1x1(4), None) for _ in range(3)]
        assert linear_chain_product_check(eyes, y)

    def test_chain_product_three_random(self):
        rng = np.random.default_rng(25)
        units = [LCSCUnitParams(ConvKernel(rng.standard_normal((4, 4, 1, 1))), None)
                 for _ in range(3)]
        assert linear_chain_product_check(units, rng.standard_normal((1, 4, 3, 3)))

    def test_all_linear_stack_superposition(self):
        config = NetworkConfig(blocks=2, units_per_block=3, width=6, rho=(0.0, 0.0),
                               fusion=False, scale=2, seed=9)
        params = build_network(config)
        rng = np.random.default_rng(26)
        x = rng.standard_normal((1, 1, 6, 6))
        y = rng.standard_normal((1, 1, 6, 6))
        a, b = 1.7, -0.4

        def stack(arr):
            return feature_stack(params, config, Tensor(arr))[-1].data

        np.testing.assert_allclose(stack(a * x + b * y), a * stack(x) + b * stack(y),
                                   rtol=1e-5, atol=1e-10)


class TestConfigValidation:
    def test_non_integral_rho_rejected(self):
        with pytest.raises(ConfigError, match="rho not integral"):
            NetworkConfig(blocks=1, units_per_block=1, width=10, rho=(0.33,))

    def test_rho_length_mismatch(self):
        with pytest.raises(ConfigError, match="rho"):
            NetworkConfig(blocks=2, units_per_block=1, width=8, rho=(0.5,))

    def test_unsupported_scale(self):
        with pytest.raises(ConfigError, match="scale"):
            NetworkConfig(blocks=1, units_per_block=1, width=8, rho=(0.5,), scale=5)

    def test_degenerate_rho_configs_build(self):
        for rho in (0.0, 1.0):
            config = NetworkConfig(blocks=2, units_per_block=2, width=8, rho=(rho, rho),
                                   fusion=True, scale=2)
            params = build_network(config)
            x = Tensor(np.random.default_rng(27).standard_normal((1, 1, 6, 6)))
            _, final = network_forward(params, config, x)
            assert np.all(np.isfinite(final.data))

    def test_roundtrip_dict(self):
        config = NetworkConfig(blocks=2, units_per_block=3, width=16, rho=(0.75, 0.5),
                               enhanced=True, scale=3, head="sub_pixel")
        assert NetworkConfig.from_dict(config.to_dict()) == config


def test_full_network_gradients_match_finite_differences():
    from lcscnet.verify import toy_network_gradient_error

    err = toy_network_gradient_error(seed=3, coords_per_tensor=3)
    assert err < 1e-5
