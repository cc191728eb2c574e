"""Variant builders and the .nspec text format."""

import pytest

from edanet.netdef import (
    LayerSpec,
    NetspecError,
    NetworkSpec,
    VARIANTS,
    build_variant,
    layer_out_channels,
    parse_netspec,
    serialize_netspec,
    spatial_divisor,
)


class TestVariants:
    def test_edanet_final_features(self):
        net = build_variant("edanet", classes=19)
        last_module = [l for l in net.layers if l.kind == "eda"][-1]
        assert layer_out_channels(last_module, None) == 450

    def test_edanet_dilation_schedule(self):
        net = build_variant("edanet", classes=19)
        rates = [l.dilation for l in net.layers if l.kind == "eda"]
        assert rates == [1, 1, 1, 2, 2, 2, 2, 4, 4, 8, 8, 16, 16]

    def test_non_dense_block2_widths_and_dilations(self):
        net = build_variant("non_dense", classes=19)
        block2 = [l for l in net.layers if l.kind == "erf" and l.name.startswith("m2")]
        assert [l.width for l in block2] == [80] * 8
        assert [l.dilation for l in block2] == [2, 4, 8, 16, 2, 4, 8, 16]

    def test_non_dense_block1_width(self):
        net = build_variant("non_dense", classes=19)
        block1 = [l for l in net.layers if l.name.startswith("m1")]
        assert [l.width for l in block1] == [40] * 5

    def test_shallow_has_four_block2_modules(self):
        net = build_variant("shallow", classes=19)
        block2 = [l for l in net.layers if l.name.startswith("m2")]
        assert len(block2) == 4
        assert layer_out_channels(block2[-1], None) == 290

    def test_erfdec_has_no_projection_or_upsample_layer(self):
        net = build_variant("erfdec", classes=19)
        kinds = [l.kind for l in net.layers]
        assert "projection" not in kinds
        assert "bilinear" not in kinds
        assert kinds[-1] == "deconv"
        assert net.layers[-1].out_ch == 19

    def test_densedown_uses_densenet_style_downsampling(self):
        net = build_variant("densedown", classes=19)
        stem = net.layers[0]
        assert (stem.kind, stem.kh, stem.stride, stem.out_ch) == ("conv", 7, 2, 60)
        assert net.layers[1].kind == "maxpool" and net.layers[1].k == 3
        trans = [l for l in net.layers if l.name == "trans1"][0]
        assert (trans.kh, trans.out_ch) == (1, 130)
        pools = [l for l in net.layers if l.kind == "avgpool"]
        assert len(pools) == 1 and pools[0].k == 2

    def test_variants_share_prefix_through_block1(self):
        reference = build_variant("edanet", classes=19).layers[:7]
        for variant in ("non_asym", "shallow", "aspp", "erfdec"):
            prefix = build_variant(variant, classes=19).layers[:7]
            for ref, got in zip(reference, prefix):
                assert (ref.name, ref.dilation) == (got.name, got.dilation)
                assert layer_out_channels(ref, None) == layer_out_channels(got, None)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            build_variant("resnet", classes=19)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_spatial_divisor_is_eight(self, variant):
        assert spatial_divisor(build_variant(variant, classes=19)) == 8

    def test_camvid_configuration(self):
        net = build_variant("edanet", classes=11, upscale=1, train_size=(360, 480))
        assert net.classes == 11
        assert net.inference_upscale == 1
        assert net.train_size == (360, 480)


class TestNetspecFormat:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_identity(self, variant):
        net = build_variant(variant, classes=19)
        assert parse_netspec(serialize_netspec(net)) == net

    def test_round_trip_camvid(self):
        net = build_variant("shallow", classes=11, upscale=1, train_size=(360, 480))
        assert parse_netspec(serialize_netspec(net)) == net

    def test_single_eda_line(self):
        net = parse_netspec(
            "net name=demo classes=2\n"
            "eda name=m1_1 in=60 growth=40 dilation=1\n"
        )
        (layer,) = net.layers
        assert layer == LayerSpec("eda", "m1_1", in_ch=60, growth=40, dilation=1)

    def test_comments_and_blank_lines_ignored(self):
        net = parse_netspec(
            "# a network\n"
            "net name=demo classes=2  # header\n"
            "\n"
            "eda name=m in=60 growth=40 dilation=1  # module\n"
        )
        assert len(net.layers) == 1

    def test_duplicate_name_reports_line(self):
        text = (
            "net name=demo classes=2\n"
            "eda name=m in=60 growth=40\n"
            "eda name=m in=100 growth=40\n"
        )
        with pytest.raises(NetspecError, match="line 3") as exc:
            parse_netspec(text)
        assert "duplicate layer name" in str(exc.value)

    def test_syntax_error_reports_location(self):
        with pytest.raises(NetspecError, match="line 2, col 5"):
            parse_netspec("net name=demo classes=2\neda garbage\n")

    def test_unknown_kind_rejected(self):
        with pytest.raises(NetspecError, match="unknown layer kind"):
            parse_netspec("net name=demo classes=2\nlstm name=x\n")

    def test_channel_arithmetic_violation(self):
        text = (
            "net name=demo classes=2\n"
            "eda name=a in=60 growth=40\n"
            "eda name=b in=90 growth=40\n"
        )
        with pytest.raises(NetspecError, match="line 3"):
            parse_netspec(text)

    def test_missing_required_key(self):
        with pytest.raises(NetspecError, match="missing required key 'growth'"):
            parse_netspec("net name=demo classes=2\neda name=m in=60\n")

    def test_non_integer_value_rejected(self):
        with pytest.raises(NetspecError, match="expects int"):
            parse_netspec("net name=demo classes=2\neda name=m in=sixty growth=40\n")

    def test_missing_header_rejected(self):
        with pytest.raises(NetspecError, match="header"):
            parse_netspec("eda name=m in=60 growth=40\n")

    def test_two_projections_rejected(self):
        text = (
            "net name=demo classes=2\n"
            "projection name=p1 in=8 classes=2\n"
            "projection name=p2 in=2 classes=2\n"
        )
        with pytest.raises(NetspecError, match="projection"):
            parse_netspec(text)

    def test_layer_after_projection_rejected(self):
        text = (
            "net name=demo classes=2\n"
            "projection name=p in=8 classes=2\n"
            "eda name=m in=2 growth=40\n"
        )
        with pytest.raises(NetspecError, match="after the projection"):
            parse_netspec(text)

    def test_serialization_is_canonical(self):
        net = build_variant("edanet", classes=19)
        text = serialize_netspec(net)
        assert text == serialize_netspec(parse_netspec(text))
        assert text.splitlines()[0] == "net name=edanet classes=19 upscale=2 train=512x1024"
        assert "eda name=m1_1 in=60 growth=40 dilation=1" in text


class TestNetworkSpecValidation:
    def test_duplicate_names_rejected_at_build(self):
        layers = [
            LayerSpec("eda", "m", in_ch=60, growth=40, dilation=1),
            LayerSpec("eda", "m", in_ch=100, growth=40, dilation=1),
        ]
        with pytest.raises(NetspecError):
            NetworkSpec("demo", 2, layers)

    def test_channel_chain_checked_at_build(self):
        layers = [
            LayerSpec("downsample", "d", in_ch=3, out_ch=16),
            LayerSpec("erf", "r", width=32, dilation=1),
        ]
        with pytest.raises(NetspecError):
            NetworkSpec("demo", 2, layers)
