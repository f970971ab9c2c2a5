import json

import numpy as np
import pytest

from finsight import gradcheck
from finsight.epafpn import (NeckConfig, PyramidFeatures, build_epafpn, build_panet, build_topdown_fpn,
                             conv_cost, count_cost, graph_dump, make_neck)
from finsight.errors import ConfigError, TopologyError
from finsight.nn import as_vars
from finsight.tensor import autograd as ag
from finsight.tensor import functional as F
from finsight.tensor.functional import ConvSpec

IN = {2: 16, 3: 32, 4: 64, 5: 128}


def cbs(cin, cout, k):
    # conv without bias plus per-channel scale and shift
    return k * k * cin * cout + 2 * cout


def pyramid(rng, in_ch=IN, top=2, size=2, n=1):
    return {k: rng.normal(size=(n, c, size * 2 ** (5 - k), size * 2 ** (5 - k))) for k, c in in_ch.items() if k >= top}


@pytest.fixture
def rng():
    return np.random.default_rng(11)


class TestCounting:
    def test_conv_formula_examples(self):
        assert conv_cost(ConvSpec(16, 32, 3, padding=1), 8, 8)["params"] == 3 * 3 * 16 * 32 + 32 == 4640
        assert conv_cost(ConvSpec(64, 64, 1), 8, 8)["params"] == 4160

    def test_topdown_by_hand(self):
        w = 64
        expect = cbs(128, w, 1) + cbs(64 + w, w, 3) + cbs(32 + w, w, 3)
        assert count_cost("topdown-fpn")["params"] == expect == 137_600

    def test_panet_by_hand(self):
        w = 64
        expect = 137_600 + 2 * cbs(w, w, 3) + 2 * cbs(2 * w, w, 3)
        assert count_cost("panet")["params"] == expect == 359_296

    def test_epa_by_hand(self):
        w, h = 64, 32
        psi = cbs(32, h, 1) + cbs(64, h, 1) + cbs(128, h, 1)
        proj = lambda c: c * h + h
        cross = proj(w) + 2 * (cbs(w, w, 3) + proj(w))
        skips = 2 * cbs(16, 16, 3) + proj(16) + 2 * cbs(32, 32, 3) + proj(32)
        assert count_cost("epa-fpn")["params"] == 137_600 + psi + cross + skips == 250_016

    def test_reduction_band(self):
        r = 1 - count_cost("epa-fpn")["params"] / count_cost("panet")["params"]
        assert 0.25 <= r <= 0.35
        assert round(r, 3) == 0.304

    @pytest.mark.parametrize("width", [32, 64, 128])
    def test_epa_smaller_at_every_width(self, width):
        assert count_cost("epa-fpn", width=width)["params"] < count_cost("panet", width=width)["params"]

    def test_panet_exceeds_topdown(self):
        for width in (32, 64, 128):
            assert count_cost("panet", width=width)["params"] > count_cost("topdown-fpn", width=width)["params"]

    def test_flops_are_twice_macs_and_scale(self):
        a = count_cost("panet", ref_size=640)
        b = count_cost("panet", ref_size=320)
        assert a["flops"] == 2 * a["macs"]
        assert a["macs"] == 4 * b["macs"]

    def test_topdown_macs_by_hand(self):
        # 640 input: C5 20x20, C4 40x40, C3 80x80
        w = 64
        macs = 20 * 20 * 128 * w + 40 * 40 * 9 * (64 + w) * w + 80 * 80 * 9 * (32 + w) * w
        assert count_cost("topdown-fpn")["macs"] == macs


class TestShapes:
    def test_shape_contract(self, rng):
        in_ch = {3: 64, 4: 128, 5: 256}
        C = {3: rng.normal(size=(1, 64, 80, 80)), 4: rng.normal(size=(1, 128, 40, 40)),
             5: rng.normal(size=(1, 256, 20, 20))}
        cfg = NeckConfig("topdown-fpn", 64, (), in_ch)
        P = build_topdown_fpn(C, make_neck(cfg).init(0), cfg)
        assert {k: v.shape for k, v in P.levels.items()} == {3: (1, 64, 80, 80), 4: (1, 64, 40, 40),
                                                             5: (1, 64, 20, 20)}

    def test_variants_interchangeable(self, rng):
        C = pyramid(rng)
        shapes = []
        for v in ("topdown-fpn", "panet", "epa-fpn"):
            cfg = NeckConfig(v, 16, in_channels=IN)
            out = make_neck(cfg)(as_vars(make_neck(cfg).init(0)), {k: ag.Var(a) for k, a in C.items()})
            shapes.append({k: o.data.shape for k, o in out.items()})
        assert shapes[0] == shapes[1] == shapes[2]
        assert all(s[1] == 16 for s in shapes[0].values())

    def test_single_level(self, rng):
        C5 = rng.normal(size=(1, 128, 2, 2))
        cfg = NeckConfig("topdown-fpn", 8, (), IN)
        params = make_neck(cfg).init(0)
        P = build_topdown_fpn({5: C5}, params, cfg)
        w = params["neck.td.lat5.conv.w"]
        lat = F.silu(F.conv2d(C5, ConvSpec(128, 8, 1, has_bias=False), w) * params["neck.td.lat5.scale"][:, None, None]
                     + params["neck.td.lat5.shift"][:, None, None])
        assert list(P.levels) == [5]
        np.testing.assert_allclose(P[5], lat, rtol=1e-12)

    def test_output_pyramid_is_valid(self, rng):
        cfg = NeckConfig("epa-fpn", 8, in_channels=IN)
        P = build_epafpn(pyramid(rng), cfg, make_neck(cfg).init(0))
        P.check()
        assert P.strides == {3: 8, 4: 16, 5: 32}


class TestFusionRules:
    def test_topdown_zero_c4_gives_upsampled_p5(self, rng):
        w = 8
        cfg = NeckConfig("topdown-fpn", w, (), IN)
        params = make_neck(cfg).init(0)
        # fuse4 = identity on the upsampled block; scale 1, shift 0
        k = np.zeros((w, 64 + w, 3, 3))
        for c in range(w):
            k[c, 64 + c, 1, 1] = 1.0
        params["neck.td.fuse4.conv.w"] = k
        C = pyramid(rng, {4: 64, 5: 128}, top=4)
        C[4][:] = 0
        P = build_topdown_fpn(C, params, cfg)
        # the CBS applies SiLU after the identity conv
        np.testing.assert_allclose(P[4], F.silu(F.upsample_nearest(P[5], 2)), rtol=1e-12, atol=1e-15)

    def test_panet_zero_input_zero_output(self, rng):
        cfg = NeckConfig("panet", 8, (), IN)
        P = build_panet({k: np.zeros_like(v) for k, v in pyramid(rng).items()}, make_neck(cfg).init(0), cfg)
        assert all(not np.any(v) for v in P.levels.values())

    def test_epa_identity_trans_zero_psi(self, rng):
        w = 8
        cfg = NeckConfig("epa-fpn", w, (), IN)
        params = make_neck(cfg).init(0)
        for k in list(params):
            if ".psi" in k and k.endswith(".conv.w"):
                params[k] = np.zeros_like(params[k])
        proj = np.zeros((w // 2, w, 1, 1))
        proj[np.arange(w // 2), np.arange(w // 2)] = 1.0
        params["neck.cross4to3.proj.w"] = proj
        C = pyramid(rng)
        out = build_epafpn(C, cfg, params)
        P_in = build_topdown_fpn(C, params, cfg)
        assert not np.any(out[3][:, : w // 2])
        np.testing.assert_array_equal(out[3][:, w // 2 :], F.upsample_nearest(P_in[4], 2)[:, : w // 2])

    def test_zero_trans_is_pure_lateral(self, rng):
        w = 8
        cfg = NeckConfig("epa-fpn", w, in_channels=IN)
        params = make_neck(cfg).init(0)
        for k in list(params):
            if (".cross" in k or ".skip" in k) and k.endswith("proj.w"):
                params[k] = np.zeros_like(params[k])
        C = pyramid(rng)
        out = build_epafpn(C, cfg, params)
        for i in (3, 4, 5):
            assert not np.any(out[i][:, w // 2 :])
            sc, sh = params[f"neck.psi{i}.scale"], params[f"neck.psi{i}.shift"]
            lat = F.conv2d(C[i], ConvSpec(IN[i], w // 2, 1, has_bias=False), params[f"neck.psi{i}.conv.w"])
            np.testing.assert_allclose(out[i][:, : w // 2], F.silu(lat * sc[:, None, None] + sh[:, None, None]),
                                       rtol=1e-12)

    def test_empty_skips_same_shapes(self, rng):
        C = pyramid(rng)
        a = NeckConfig("epa-fpn", 8, (), IN)
        b = NeckConfig("epa-fpn", 8, in_channels=IN)
        pa = build_epafpn(C, a, make_neck(a).init(0))
        pb = build_epafpn(C, b, make_neck(b).init(0))
        assert {k: v.shape for k, v in pa.levels.items()} == {k: v.shape for k, v in pb.levels.items()}

    def test_skips_change_deep_outputs(self, rng):
        C = pyramid(rng)
        cfg = NeckConfig("epa-fpn", 8, in_channels=IN)
        params = make_neck(cfg).init(0)
        base = build_epafpn(C, cfg, params)
        C2 = dict(C)
        C2[2] = C[2] + 1.0
        moved = build_epafpn(C2, cfg, params)
        # C2 reaches only P4 (skip 2->4); the top-down pass never sees C2
        assert np.array_equal(base[3], moved[3]) and np.array_equal(base[5], moved[5])
        assert not np.array_equal(base[4], moved[4])


class TestTopology:
    def test_structure_and_acyclic(self):
        neck = make_neck(NeckConfig("epa-fpn"))
        assert neck.check_structure()
        order = neck.check_acyclic()
        assert order.index("Pin4") < order.index("P3") and order.index("C2") < order.index("P4")

    def test_no_bottom_up_path(self):
        g = make_neck(NeckConfig("epa-fpn")).graph()
        assert not any(e["src"].startswith("P") and e["src"][1].isdigit() for e in g["edges"])

    def test_graph_dump_lists_long_skips(self):
        g = json.loads(graph_dump(NeckConfig("epa-fpn")))
        assert {("C2", "P4"), ("C3", "P5")} <= {(e["src"], e["dst"]) for e in g["edges"]}

    def test_graph_params_sum_to_count(self):
        for v in ("topdown-fpn", "panet", "epa-fpn"):
            g = make_neck(NeckConfig(v)).graph()
            assert sum(e["params"] for e in g["edges"]) == count_cost(v)["params"]

    def test_adjacent_skip_rejected(self):
        with pytest.raises(ConfigError):
            NeckConfig("epa-fpn", long_skips=((3, 4),))

    def test_duplicate_skip_rejected(self):
        with pytest.raises(ConfigError):
            NeckConfig("epa-fpn", long_skips=((2, 4), (2, 4)))

    def test_absent_level(self, rng):
        cfg = NeckConfig("epa-fpn", 8, in_channels=IN)
        C = pyramid(rng)
        del C[2]
        with pytest.raises(TopologyError):
            build_epafpn(C, cfg, make_neck(cfg).init(0))

    def test_missing_c5(self, rng):
        cfg = NeckConfig("topdown-fpn", 8, (), IN)
        with pytest.raises(TopologyError):
            build_topdown_fpn({4: rng.normal(size=(1, 64, 2, 2))}, make_neck(cfg).init(0), cfg)

    def test_bad_pyramid(self, rng):
        with pytest.raises(TopologyError):
            PyramidFeatures({4: np.zeros((1, 1, 4, 4)), 5: np.zeros((1, 1, 3, 3))}).check()

    def test_wrong_variant(self):
        with pytest.raises(ConfigError):
            build_epafpn({}, NeckConfig("panet"), {})


@pytest.mark.parametrize("case", ["neck_topdown", "neck_panet", "neck_epa"])
def test_neck_gradients(case):
    for seed in range(3):
        assert gradcheck.check_case(gradcheck.CASES[case], seed) <= 1e-4
