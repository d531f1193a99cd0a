"""Network assembly, parameter accounting, and receptive-field analysis."""

from fractions import Fraction

import numpy as np
import pytest

from cfpnet.blocks import ConvUnit
from cfpnet.network import (
    REFERENCE_PARAMS,
    LayerEntry,
    Network,
    VariantSpec,
    build_network,
    count_parameters,
    effective_receptive_field,
    empirical_receptive_field,
    factorization_savings,
    fp_channel_cost,
    inception_v2_cost,
    layer_table,
    receptive_field_bbox,
)
from cfpnet.tensor import ConvSpec, ShapeError, Tensor, conv2d, tensor_sum
from cfpnet.tensor import GradTape


class TestVariantSpec:
    def test_preset_rate_lists(self):
        assert VariantSpec.v1().cluster1_rates == (4,)
        assert VariantSpec.v1().cluster2_rates == (8, 16)
        assert VariantSpec.v2().cluster1_rates == (2,)
        assert VariantSpec.v2().cluster2_rates == (4, 8, 16)
        assert VariantSpec.v3().cluster1_rates == (2, 2)
        assert VariantSpec.v3().cluster2_rates == (4, 4, 8, 8, 16, 16)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            VariantSpec.preset("bogus")

    def test_class_count_bounds(self):
        with pytest.raises(ValueError):
            VariantSpec.v1(num_classes=0)
        with pytest.raises(ValueError):
            VariantSpec.v1(num_classes=255)

    def test_config_round_trip_preset(self):
        spec = VariantSpec.v2(num_classes=11)
        assert VariantSpec.from_config(spec.to_config()) == spec

    def test_config_round_trip_custom(self):
        spec = VariantSpec("custom", (2,), (4, 8), init_channels=8,
                           cluster_widths=(16, 32), num_classes=5)
        assert VariantSpec.from_config(spec.to_config()) == spec

    def test_config_comments_and_bad_lines(self):
        spec = VariantSpec.from_config("# comment\nvariant = v1\nclasses = 7\n")
        assert spec.name == "v1" and spec.num_classes == 7
        with pytest.raises(ValueError):
            VariantSpec.from_config("not a key value line\n")


class TestBuildNetwork:
    def test_v3_has_fifteen_numbered_rows(self):
        net = build_network(VariantSpec.v3())
        numbered = [e for e in net.entries if e.kind != "inject"]
        assert len(numbered) == 15  # 3 convs, 2 downsamples, 8 modules,
        # classifier, upsample
        assert sum(e.kind == "cfp" for e in net.entries) == 8
        assert sum(e.kind == "inject" for e in net.entries) == 3

    def test_v1_has_three_modules(self):
        net = build_network(VariantSpec.v1())
        assert sum(e.kind == "cfp" for e in net.entries) == 3

    def test_channel_bookkeeping(self):
        net = build_network(VariantSpec.v3())
        kinds_and_channels = [(e.kind, e.out_channels) for e in net.entries]
        assert kinds_and_channels[:6] == [
            ("conv", 32), ("conv", 32), ("conv", 32), ("inject", 35),
            ("downsample", 64), ("cfp", 64)]
        assert ("inject", 131) in kinds_and_channels
        assert kinds_and_channels[-2:] == [("classifier", 19), ("upsample", 19)]

    def test_empty_clusters_still_produces_class_maps(self):
        spec = VariantSpec("custom", (), (), init_channels=8,
                           cluster_widths=(16, 32), num_classes=4)
        net = build_network(spec, seed=1)
        y = net.forward(Tensor(np.random.default_rng(0)
                               .standard_normal((1, 3, 16, 16))
                               .astype(np.float32)))
        assert y.shape == (1, 4, 16, 16)

    def test_forward_shape_contract_small(self):
        net = build_network(VariantSpec.v1(), seed=0)
        x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 32, 40))
                   .astype(np.float32))
        assert net.forward(x).shape == (1, 19, 32, 40)

    def test_indivisible_extents_rejected_before_compute(self):
        net = build_network(VariantSpec.v1())
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 3, 30, 32), np.float32)))
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 4, 32, 32), np.float32)))

    def test_zero_image_zero_classifier_gives_constant_logits(self):
        net = build_network(VariantSpec.v1(num_classes=5), seed=2)
        classifier = next(e for e in net.entries if e.kind == "classifier")
        classifier.layer.weight.data[:] = 0.0
        classifier.layer.bias.data[:] = 0.0
        y = net.forward(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
        for c in range(5):
            plane = y.data[0, c]
            assert np.all(plane == plane[0, 0])

    def test_gradient_reaches_every_parameter(self):
        spec = VariantSpec("custom", (2,), (4,), init_channels=8,
                           cluster_widths=(16, 32), num_classes=3)
        net = build_network(spec, seed=3)
        x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 16, 16))
                   .astype(np.float32))
        tape = GradTape()
        loss = tensor_sum(net.forward(x, mode="train", tape=tape), tape)
        params = list(net.named_parameters())
        tape.backward(loss, parameters=[t for _, t in params])
        dead = [name for name, t in params if not np.any(t.grad)]
        assert not dead, f"parameters with identically zero gradient: {dead}"

    def test_repeated_forward_is_bitwise_deterministic(self):
        net = build_network(VariantSpec.v1(num_classes=4), seed=5)
        x = Tensor(np.random.default_rng(6).standard_normal((1, 3, 16, 16))
                   .astype(np.float32))
        assert np.array_equal(net.forward(x).data, net.forward(x).data)


class TestCountParameters:
    def test_single_conv_weight_count(self):
        unit = ConvUnit(ConvSpec(3, 3, 3, 32), np.random.default_rng(0),
                        bn=False, act=False)
        net = Network([LayerEntry("conv0", "conv", unit)])
        report = count_parameters(net)
        assert report.total_weights == 864
        assert report.total_trained == 864
        assert report.size_bytes == 4 * 864

    def test_variant_ordering_and_reference_gap(self):
        totals = {}
        for name in ("v1", "v2", "v3"):
            net = build_network(VariantSpec.preset(name))
            totals[name] = count_parameters(net).total_trained
        assert totals["v1"] < totals["v2"] < totals["v3"]
        for name, reference in REFERENCE_PARAMS.items():
            ratio = reference / totals[name]
            assert 0.5 <= ratio <= 2.0, (name, totals[name], reference)

    def test_count_independent_of_resolution(self):
        net = build_network(VariantSpec.v1(num_classes=4), seed=7)
        before = count_parameters(net).total_trained
        for hw in (16, 32):
            net.forward(Tensor(np.zeros((1, 3, hw, hw), np.float32)))
            assert count_parameters(net).total_trained == before

    def test_buffers_tracked_separately(self):
        net = build_network(VariantSpec.v1())
        report = count_parameters(net)
        assert report.total_buffers > 0
        assert report.size_bytes == 4 * report.total_trained


class TestReceptiveField:
    def test_formula_examples(self):
        assert effective_receptive_field(3, 1) == 3
        assert effective_receptive_field(3, 2) == 5
        assert effective_receptive_field(3, 16) == 33

    def test_formula_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            effective_receptive_field(0, 1)

    @pytest.mark.parametrize("rate", [1, 2, 4, 8, 16])
    def test_empirical_bbox_matches_formula(self, rate):
        rng = np.random.default_rng(8 + rate)
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        spec = ConvSpec.same(3, 3, 1, 1, dilation=rate)

        def layer(x, tape):
            return conv2d(x, w, None, spec, tape)

        side = effective_receptive_field(3, rate)
        bbox = receptive_field_bbox(layer, (1, 1, 48, 48), (0, 24, 24))
        assert bbox == (side, side)

    def test_two_stacked_rate1_convs_give_5x5(self):
        rng = np.random.default_rng(30)
        w1 = Tensor(rng.standard_normal((1, 1, 3, 3)))
        w2 = Tensor(rng.standard_normal((1, 1, 3, 3)))
        spec = ConvSpec.same(3, 3, 1, 1)

        def layer(x, tape):
            return conv2d(conv2d(x, w1, None, spec, tape), w2, None, spec, tape)

        assert receptive_field_bbox(layer, (1, 1, 16, 16), (0, 8, 8)) == (5, 5)

    def test_position_out_of_range_rejected(self):
        rng = np.random.default_rng(31)
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        spec = ConvSpec.same(3, 3, 1, 1)

        def layer(x, tape):
            return conv2d(x, w, None, spec, tape)

        with pytest.raises(IndexError):
            empirical_receptive_field(layer, (1, 1, 8, 8), (0, 8, 0))


class TestFactorizationSavings:
    def test_5x5_vs_two_3x3_saves_28_percent(self):
        assert factorization_savings(5, "stacked_3x3") == Fraction(28, 100)

    def test_7x7_vs_three_3x3_saves_about_45_percent(self):
        saving = factorization_savings(7, "stacked_3x3")
        assert saving == Fraction(22, 49)
        assert abs(float(saving) - 0.449) < 1e-3

    def test_asymmetric_pair_saves_one_third(self):
        assert factorization_savings(3, "asymmetric_pair") == Fraction(1, 3)

    def test_fp_channel_cost_components(self):
        assert fp_channel_cost(16) == 624
        assert inception_v2_cost(16) == 3600

    def test_fp_channel_saving_is_exact_fraction(self):
        saving = factorization_savings(3, "fp_channel")
        assert saving == 1 - Fraction(624, 3600)
        assert float(saving) > 0.67  # exceeds the two-thirds mark

    def test_unsupported_replacement_rejected(self):
        with pytest.raises(ValueError):
            factorization_savings(3, "winograd")
        with pytest.raises(ValueError):
            factorization_savings(4, "stacked_3x3")


class TestLayerTable:
    def test_v3_groups_equal_rate_modules(self):
        table = layer_table(build_network(VariantSpec.v3()))
        assert "5-6" in table
        assert "2 × CFP" in table
        assert "r_K = 2" in table

    def test_classifier_row(self):
        table = layer_table(build_network(VariantSpec.v3()))
        lines = [ln for ln in table.splitlines() if "1×1 Conv" in ln]
        assert len(lines) == 1
        assert "stride 1" in lines[0]
        assert lines[0].rstrip().endswith("19")

    def test_empty_network_is_header_only(self):
        table = layer_table(Network([]))
        assert table.splitlines() == [table]
        assert "Layer" in table
