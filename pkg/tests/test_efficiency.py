import numpy as np
import pytest

from mddfnet import tensor as T
from mddfnet.backbone import Backbone, tiny_config
from mddfnet.efficiency import (count_params, efficiency_report, estimate_gflops, measure_fps,
                                trace_model_flops)
from mddfnet.errors import EstimationError, MeasurementError
from mddfnet.model import build_variant
from mddfnet.nn import Conv


def test_count_params_single_conv():
    assert count_params(Conv(3, 16, 3).parameters()) == 448


def test_count_params_empty_store():
    assert count_params(T.ParamStore()) == 0


def _vss(c, n=4):
    """Hand count for one VSS block at width c with expand 2."""
    d = 2 * c
    r = -(-d // 16)
    return (2 * c  # pre_norm
            + 2 * d * c + 2 * d  # in_proj
            + 9 * d + d  # depthwise 3x3
            + 4 * (r + 2 * n) * d  # x_proj, no bias
            + 4 * d * r + 4 * d  # dt_proj, 4 groups
            + d * n + d  # A_log, D
            + 2 * d  # post_norm
            + c * d + c)  # out_proj


def test_tiny_backbone_hand_ledger():
    ledger = {
        "stem": 224 + 584,
        "stage1": 1416, "stage2": 3856, "stage3": 11808, "stage4": 40000,
        "merge1": 528, "merge2": 2080, "merge3": 8256,
        # proj1+proj2, EMA, DF, two psi3, two psi5, phi
        "tail": 2 * 2080 + 2624 + 2340 + 2 * 4624 + 2 * 12816 + 4160,
    }
    assert [_vss(c) for c in (8, 16, 32, 64)] == [ledger[f"stage{i}"] for i in range(1, 5)]
    bb = Backbone(tiny_config())
    counts = {}
    for name, p in bb.parameters().items():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.size
    assert counts == ledger
    assert count_params(bb.parameters()) == 116_916


def test_conv_flops_closed_form():
    conv = Conv(3, 16, 3)
    with T.no_grad(), T.trace_flops(execute=False) as rec:
        conv(T.Tensor(np.zeros((1, 3, 64, 64))))
    assert sum(f for *_, f in rec) == 3_538_944


@pytest.mark.parametrize("cin,cout,hw", [(8, 8, 16), (32, 5, 7), (64, 128, 4)])
def test_pointwise_conv_flops(cin, cout, hw):
    with T.no_grad(), T.trace_flops(execute=False) as rec:
        Conv(cin, cout, 1)(T.Tensor(np.zeros((2, cin, hw, hw))))
    assert sum(f for *_, f in rec) == 2 * 2 * cin * cout * hw * hw


def _conv(cin_g, cout, k, hw, batch=1):
    return 2 * batch * cin_g * cout * k * k * hw * hw


def _scan(d, hw, n=4):
    return 4 * 4 * hw * hw * d * n  # four traversal directions


def _tiny_sheet():
    """Per-block FLOPs of the tiny full detector at 128 px, neck 32, 3 classes."""
    sheet = {
        "backbone.stem": _conv(3, 8, 3, 64) + _conv(8, 8, 3, 32),
        "backbone.merge1": _conv(32, 16, 1, 16),
        "backbone.merge2": _conv(64, 32, 1, 8),
        "backbone.merge3": _conv(128, 64, 1, 4),
    }
    for i, (c, hw) in enumerate(((8, 32), (16, 16), (32, 8), (64, 4)), 1):
        d = 2 * c
        r = -(-d // 16)
        sheet[f"backbone.stage{i}"] = (_conv(c, 2 * d, 1, hw) + _conv(1, d, 3, hw) + _conv(d, 4 * (r + 8), 1, hw)
                                       + _conv(r, 4 * d, 1, hw) + _scan(d, hw) + _conv(d, c, 1, hw))
    sheet["backbone.tail"] = (
        2 * _conv(64, 32, 1, 4)
        + 2 * (2 * 16 * 16 * 8) + _conv(16, 16, 3, 4, batch=2)  # EMA on 2 groups, strips of length 8
        + _conv(32, 4, 1, 1) + _conv(1, 32, 3, 4) + _conv(32, 32, 1, 4)  # DF
        + 2 * _conv(32, 16, 3, 4) + 2 * _conv(32, 16, 5, 4) + _conv(64, 64, 1, 4))
    fuse = lambda hw: _conv(64, 32, 3, hw) + _conv(32, 32, 3, hw)  # noqa: E731
    sheet["neck"] = (_conv(16, 32, 1, 16) + _conv(32, 32, 1, 8) + _conv(64, 32, 1, 4)
                     + fuse(8) + fuse(16) + _conv(32, 32, 3, 8) + fuse(8) + _conv(32, 32, 3, 4) + fuse(4))
    sheet["head"] = sum(4 * _conv(32, 32, 3, hw) + _conv(32, 3, 1, hw) + _conv(32, 4, 1, hw) for hw in (16, 8, 4))
    return sheet


def test_tiny_detector_flops_match_sheet():
    rep = trace_model_flops(build_variant("full", "tiny", num_classes=3, neck_width=32), 128)
    sheet = _tiny_sheet()
    traced = dict.fromkeys(sheet, 0)
    for name, f in rep.per_layer.items():
        parts = name.split(".")[1:]
        key = ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]
        traced[key] += f
    for key, want in sheet.items():
        assert abs(traced[key] - want) <= 0.01 * want, key
    assert abs(rep.total - sum(sheet.values())) <= 0.01 * sum(sheet.values())
    assert rep.gflops == rep.total / 1e9


def test_flops_scale_quadratically_with_input():
    m = build_variant("baseline", "tiny")
    assert trace_model_flops(m, 256).total == 4 * trace_model_flops(m, 128).total


def test_flop_trace_does_not_run_kernels():
    m = build_variant("full", "tiny")
    before = {k: v.data.copy() for k, v in m.parameters().items()}
    estimate_gflops(m, 640)
    assert all(np.array_equal(before[k], v.data) for k, v in m.parameters().items())


@pytest.mark.parametrize("size", [100, 0])
def test_unresolvable_shape_names_layer(size):
    with pytest.raises(EstimationError, match="backbone|positive"):
        trace_model_flops(build_variant("full", "tiny"), size)


def test_estimation_error_names_inner_layer():
    m = build_variant("full", "tiny")
    m.backbone.tail.ema.channels = 7  # wire a mismatch deep in the graph
    with pytest.raises(EstimationError, match=r"backbone\.tail\.ema"):
        trace_model_flops(m, 64)


def test_fps_needs_three_runs():
    with pytest.raises(MeasurementError):
        measure_fps(build_variant("baseline", "tiny"), 64, n_warmup=0, n_runs=2)


def test_fps_report_fields():
    m = build_variant("baseline", "tiny")
    rep = measure_fps(m, 64, n_warmup=1, n_runs=3, batch=2)
    assert rep.batch == 2 and rep.n_runs == 3
    assert 0 < rep.fps_min <= rep.fps <= rep.fps_max
    assert rep.dispersion >= 1.0


def test_efficiency_report_dict():
    m = build_variant("full", "tiny")
    d = efficiency_report(m, 64, n_warmup=0, n_runs=3).to_dict()
    assert d["param_count"] == count_params(m.parameters())
    assert d["gflops"] == pytest.approx(estimate_gflops(m, 64))
    assert "conv" in d["flop_convention"] and d["hardware"]
