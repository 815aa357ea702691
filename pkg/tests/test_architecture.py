import dataclasses
import json

import numpy as np
import pytest

from conftest import config_path
from sparseagg.architecture import (
    BlockSpec,
    InputSpec,
    NetworkSpec,
    StemSpec,
    analyze,
    compare_topologies,
    load_spec,
    plan_network,
    save_spec,
    spec_hash,
)
from sparseagg.errors import PlanError, SpecFormatError
from sparseagg.topology import Dense, Fractal, Plain, Sparse


def cifar_spec(topology, family="concat", n=12, k=12, width=16, stem=16,
               bottleneck=False, compression=1.0, blocks=3):
    if family == "concat":
        bs = tuple(BlockSpec(num_layers=n, growth_rate=k) for _ in range(blocks))
    else:
        bs = tuple(BlockSpec(num_layers=n, width=width) for _ in range(blocks))
    return NetworkSpec(family=family, topology=topology, blocks=bs,
                       stem=StemSpec(out_channels=stem, kernel=3, stride=1),
                       num_classes=10, input=InputSpec(32, 32, 3),
                       bottleneck=bottleneck, compression=compression)


# ---------------------------------------------------------------------------
# width schedules


def test_dense_concat_width_schedule():
    plan = plan_network(load_spec(config_path("dense40_k12_cifar.json")))
    ins = [lp.in_channels for lp in plan.blocks[0].layers]
    assert ins[:3] == [16, 28, 40]
    assert ins == [16 + 12 * (i - 1) for i in range(1, 13)]


def test_sparse_layer6_in_channels():
    plan = plan_network(load_spec(config_path("sparse40_k12_cifar.json")))
    layer6 = plan.blocks[0].layers[5]
    assert layer6.predecessors == (5, 4, 2)
    assert layer6.in_channels == 36


def test_sum_family_constant_width():
    plan = plan_network(load_spec(config_path("sum_plain_d12_cifar.json")))
    widths = (16, 32, 64)
    for block, width in zip(plan.blocks, widths):
        assert all(lp.in_channels == width for lp in block.layers)
        assert all(lp.out_channels == width for lp in block.layers)


# ---------------------------------------------------------------------------
# cost pins against reference model totals


def test_dense121_exact_params():
    report = analyze(load_spec(config_path("dense121_imagenet.json")))
    assert report.total_params == 7_978_856
    assert abs(report.total_flops - 5.7e9) <= 0.10 * 5.7e9


def test_sparse121_flops():
    report = analyze(load_spec(config_path("sparse121_imagenet.json")))
    assert abs(report.total_flops - 3.46e9) <= 0.15 * 3.46e9


def test_depth40_and_100_param_pins():
    assert analyze(load_spec(config_path("dense40_k12_cifar.json"))).total_params == 1_019_722
    assert analyze(load_spec(config_path("dense100_k12_cifar.json"))).total_params == 6_979_642
    assert analyze(load_spec(config_path("sparse40_k12_cifar.json"))).total_params == 185_778
    big = analyze(load_spec(config_path("sparse_bc_k32-64-128_d100_cifar.json"))).total_params
    assert abs(big - 16.7e6) <= 0.10 * 16.7e6


def test_single_conv_cost_row():
    report = analyze(load_spec(config_path("dense40_k12_cifar.json")))
    stem = report.rows[0]
    assert stem.layer == "stem"
    assert stem.params == 432
    assert stem.flops == 884_736


def test_dense_has_more_params_than_sparse_at_depth100():
    dense = analyze(load_spec(config_path("dense100_k12_cifar.json"))).total_params
    sparse = analyze(cifar_spec(Sparse(2), n=32)).total_params
    assert dense > sparse


def test_depth400_param_divergence():
    # depth 400 without bottleneck: (400 - 4) / 3 = 132 layers per block
    n = 132
    dense = analyze(cifar_spec(Dense(), n=n)).total_params
    sparse = analyze(cifar_spec(Sparse(2), n=n)).total_params
    assert dense / sparse > 10


def test_param_scaling_exponents():
    ns = np.array([16, 32, 64, 128, 256])

    def exponent(build):
        params = [analyze(build(int(n))).total_params for n in ns]
        return np.polyfit(np.log(ns), np.log(params), 1)[0]

    assert 1.8 <= exponent(lambda n: cifar_spec(Dense(), n=n)) <= 2.2
    assert 1.0 <= exponent(lambda n: cifar_spec(Sparse(2), n=n)) <= 1.3
    assert 0.9 <= exponent(lambda n: cifar_spec(Dense(), family="sum", n=n)) <= 1.1


def test_aggregated_feature_scaling_via_in_channels():
    n = 64
    dense_plan = plan_network(cifar_spec(Dense(), n=n))
    sparse_plan = plan_network(cifar_spec(Sparse(2), n=n))
    dense_deg = [len(lp.predecessors) for lp in dense_plan.blocks[0].layers]
    sparse_deg = [len(lp.predecessors) for lp in sparse_plan.blocks[0].layers]
    assert dense_deg == list(range(1, n + 1))
    assert max(sparse_deg) == int(np.log2(n)) + 1


# ---------------------------------------------------------------------------
# report mechanics


def test_analyze_total_is_additive():
    report = analyze(load_spec(config_path("sparse40_k12_cifar.json")))
    assert report.total_params == sum(r.params for r in report.rows)
    assert report.total_flops == sum(r.flops for r in report.rows)


def test_report_csv_shape():
    report = analyze(cifar_spec(Plain(), n=2))
    lines = report.to_csv().strip().split("\n")
    assert lines[0] == "layer,block,in_ch,out_ch,params,flops"
    assert lines[-1] == f"total,,,,{report.total_params},{report.total_flops}"
    assert json.loads(report.to_json())["total_params"] == report.total_params


def test_plan_json_deterministic():
    spec = load_spec(config_path("sparse40_k12_cifar.json"))
    assert plan_network(spec).to_json() == plan_network(spec).to_json()


def test_compare_topologies_replans():
    spec = load_spec(config_path("dense40_k12_cifar.json"))
    reports = compare_topologies(spec, [Plain(), Sparse(2), Dense()])
    assert set(reports) == {"plain", "sparse:2", "dense"}
    assert reports["dense"].total_params == 1_019_722
    assert reports["plain"].total_params < reports["sparse:2"].total_params


def test_sparse_with_large_base_plans_like_plain():
    base = cifar_spec(Plain(), n=6)
    wide = dataclasses.replace(base, topology=Sparse(8))  # base >= n + 2
    assert analyze(base).to_csv() == analyze(wide).to_csv()


# ---------------------------------------------------------------------------
# spec validation and serialization


def test_spec_round_trip(tmp_path):
    spec = load_spec(config_path("sparse_bc_tiny_cifar.json"))
    path = tmp_path / "copy.json"
    save_spec(spec, path)
    again = load_spec(path)
    assert again == spec
    assert spec_hash(again) == spec_hash(spec)


def test_spec_hash_tracks_content():
    a = cifar_spec(Sparse(2), n=4)
    b = cifar_spec(Sparse(2), n=5)
    assert spec_hash(a) != spec_hash(b)
    assert spec_hash(a) == spec_hash(cifar_spec(Sparse(2), n=4))


def test_unknown_field_rejected(tmp_path):
    obj = json.loads(load_spec(config_path("sparse_bc_tiny_cifar.json")).to_json())
    obj["wombat"] = 3
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(SpecFormatError, match="wombat"):
        load_spec(path)


def test_missing_field_rejected(tmp_path):
    obj = json.loads(load_spec(config_path("sparse_bc_tiny_cifar.json")).to_json())
    del obj["family"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(SpecFormatError, match="family"):
        load_spec(path)


def test_bottleneck_requires_concat():
    with pytest.raises(SpecFormatError):
        cifar_spec(Dense(), family="sum", bottleneck=True)


def test_compression_requires_bottleneck():
    with pytest.raises(SpecFormatError):
        cifar_spec(Dense(), compression=0.5)


def test_fractal_is_not_plannable():
    with pytest.raises(PlanError):
        plan_network(cifar_spec(Fractal(2), n=4))


def test_sum_width_change_needs_projection():
    spec = dataclasses.replace(load_spec(config_path("sum_plain_d12_cifar.json")),
                               allow_projection=False)
    with pytest.raises(PlanError):
        plan_network(spec)
