"""Variant assembly, parameter/MAC accounting and the config file format."""

import time

import numpy as np
import pytest

from msdet import tensor as T
from msdet.errors import ConfigurationError, ValidationError
from msdet.lska import LskaSpec, lska_param_count
from msdet.nn import Conv2d
from msdet.tensor import ConvSpec, Tensor
from msdet.zoo import (
    VARIANTS,
    ModelConfig,
    build,
    count_params,
    estimate_macs,
    parse_config,
    trace_shapes,
)

from oracles import naive_conv_multiply_count

SMALL = ModelConfig(input_size=64, widths=(8, 12, 16, 24), num_classes=2)


class TestBuild:
    def test_deterministic_manifests(self):
        a = build("baseline", SMALL)
        b = build("baseline", SMALL)
        names_a = [(n, p.data.tobytes()) for n, p in a.named_params()]
        names_b = [(n, p.data.tobytes()) for n, p in b.named_params()]
        assert names_a == names_b

    def test_lska_gd_param_algebra(self):
        _, gd_total = count_params(build("gd_only", SMALL))
        _, lg_total = count_params(build("lska_gd", SMALL))
        dw, _, pw = lska_param_count(LskaSpec(24, SMALL.lska_k, SMALL.lska_d))
        assert lg_total - gd_total == dw + pw + 5 * 24  # plus the five biases

    def test_gd_seam_differs_only_in_head(self):
        gd = dict(build("gd_only", SMALL).named_params())
        gs = dict(build("gd_seam", SMALL).named_params())
        non_head_gd = {n for n in gd if not n.startswith("head.")}
        non_head_gs = {n for n in gs if not n.startswith("head.")}
        assert non_head_gd == non_head_gs
        assert {n for n in gd if n.startswith("head.")} != {
            n for n in gs if n.startswith("head.")
        }

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            build("everything", SMALL)

    def test_all_variants_forward_256_under_2s(self):
        cfg = ModelConfig(input_size=256, num_classes=2)
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 256, 256)))
        for variant in VARIANTS:
            model = build(variant, cfg)
            model.set_mode(False)
            t0 = time.time()
            with T.no_grad():
                outs = model(x)
            dt = time.time() - t0
            assert dt < 2.0, f"{variant} took {dt:.2f}s"
            assert [o.shape for o in outs] == [
                (1, 7, 32, 32),
                (1, 7, 16, 16),
                (1, 7, 8, 8),
            ]


class TestAccounting:
    def test_conv_param_count_closed_form(self):
        rng = np.random.default_rng(1)
        conv = Conv2d(rng, ConvSpec(16, 32, 3, 3, padding=1))
        assert conv.param_count() == 16 * 32 * 9 + 32  # 4640

    def test_conv_macs_closed_form(self):
        rng = np.random.default_rng(2)
        conv = Conv2d(rng, ConvSpec(16, 32, 3, 3, padding=1))
        conv.finalize_names("conv.")
        from msdet.nn import trace

        x = Tensor(np.zeros((1, 16, 32, 32)))
        with trace() as log:
            conv(x)
        assert log[0][2] == 32 * 32 * 32 * 16 * 9  # 4,718,592

    def test_depthwise_param_count(self):
        rng = np.random.default_rng(3)
        conv = Conv2d(rng, ConvSpec(16, 16, 3, 3, padding=1, groups=16, has_bias=False))
        assert conv.param_count() == 144
        with_bias = Conv2d(rng, ConvSpec(16, 16, 3, 3, padding=1, groups=16))
        assert with_bias.param_count() == 160

    def test_mac_estimator_matches_multiply_counting(self):
        # brute-force multiply counter on tiny shapes, exact equality
        rng = np.random.default_rng(4)
        specs = [
            ConvSpec(2, 3, 3, 3, padding=1),
            ConvSpec(4, 4, 3, 3, stride=2, padding=1, groups=4),
            ConvSpec(3, 6, 1, 1),
            ConvSpec(4, 2, 3, 3, padding=2, dilation=2),
        ]
        from msdet.nn import trace

        for spec in specs:
            conv = Conv2d(rng, spec)
            conv.finalize_names("probe.")
            x = Tensor(np.zeros((1, spec.in_channels, 8, 8)))
            with trace() as log:
                conv(x)
            assert log[0][2] == naive_conv_multiply_count(1, spec.in_channels, 8, 8, spec)

    def test_per_module_tables(self):
        table, total = count_params(build("lska_gd", SMALL))
        assert set(table) == {"backbone", "lska", "gd", "head"}
        assert total == sum(table.values())
        macs_table, macs_total = estimate_macs(build("lska_gd", SMALL), 64)
        assert macs_total == sum(m for _, _, m in macs_table)
        assert any(name.startswith("lska.") for name, _, _ in macs_table)


class TestTrace:
    def test_final_taps(self):
        rows = dict(trace_shapes(build("baseline", SMALL), 64))
        # stride arithmetic at 64: head levels 8x8, 4x4, 2x2
        assert rows["head.p3.reg_out"] == (1, 5, 8, 8)
        assert rows["head.p4.reg_out"] == (1, 5, 4, 4)
        assert rows["head.p5.reg_out"] == (1, 5, 2, 2)
        assert rows["head.p5.cls_out"] == (1, 2, 2, 2)

    def test_single_lska_group(self):
        rows = trace_shapes(build("lska_gd", SMALL), 64)
        lska_nodes = [n for n, _ in rows if n.startswith("lska.")]
        assert lska_nodes == ["lska.h5", "lska.v5", "lska.hd", "lska.vd", "lska.pw"]

    def test_repeatable(self):
        model = build("gd_seam", SMALL)
        assert trace_shapes(model, 64) == trace_shapes(model, 64)


class TestConfigFile:
    def test_parse_and_reject(self):
        text = """
        # toy setup
        input_size = 96
        widths = 8,12,16,24
        variant = lska_gd
        num_classes = 2
        seed = 7
        k = 7
        d = 2
        patch_sizes = 1,2
        thresholds = 0.1,0.6
        """
        cfg, variant = parse_config(text)
        assert variant == "lska_gd"
        assert cfg.input_size == 96
        assert cfg.widths == (8, 12, 16, 24)
        assert cfg.lska_k == 7 and cfg.lska_d == 2
        assert cfg.patch_sizes == (1, 2)
        assert cfg.conf_threshold == 0.1 and cfg.iou_threshold_nms == 0.6
        assert cfg.seed == 7

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown key"):
            parse_config("optimizer = adam\n")

    def test_bad_variant_rejected(self):
        with pytest.raises(ValidationError):
            parse_config("variant = resnet\n")

    def test_config_invariants(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(input_size=60)
        with pytest.raises(ConfigurationError):
            ModelConfig(input_size=100)
