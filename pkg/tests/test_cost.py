import numpy as np
import pytest

from binarch.cell import ArchParams, NetworkConfig, SearchNetwork
from binarch.cost import (PRESETS, RESNET18_TOTAL_FLOPS, CostReport, LayerRow, count_conv, count_genotype,
                          count_network, reference_imagenet, resnet18_stem)
from binarch.genotype import REFERENCE_BINARY_CELLS, Genotype, reference_cifar_config, reference_imagenet_config
from binarch.ops import MODES, GroupConfig

ALL_SKIP = Genotype([("skip_connect", 0), ("skip_connect", 1)] * 4, [("skip_connect", 0), ("skip_connect", 1)] * 4,
                    [2, 3, 4, 5])


def test_resnet_stem_count_and_ratio():
    macs = resnet18_stem().flops
    assert macs == 49 * 3 * 64 * 112 * 112 == 118_013_952
    assert 0.060 <= macs / RESNET18_TOTAL_FLOPS <= 0.070
    assert round(macs / 1e8, 1) == 1.2


def test_grouped_conv_count():
    assert count_conv((36, 32, 32), 36, 3, 1, 1, 1, 12) == 9 * 3 * 36 * 1024 == 995_328


@pytest.mark.parametrize("d", [1, 2])
def test_dilation_keeps_macs_when_padding_matches(d):
    assert count_conv((6, 8, 8), 6, 3, 1, d, d, 2) == 9 * 3 * 6 * 64


@pytest.mark.parametrize("g", [1, 2, 4, 8])
def test_grouping_divides_macs(g):
    assert count_conv((16, 14, 14), 32, 3, 2, 1, 1, 1) == g * count_conv((16, 14, 14), 32, 3, 2, 1, 1, g)


@pytest.mark.parametrize("args", [
    ((6, 8, 8), 6, 3, 1, 1, 1, 4),   # groups do not divide channels
    ((6, 2, 2), 6, 5, 1, 0, 1, 1),   # kernel larger than input
    ((6, 8, 8), 6, 0, 1, 0, 1, 1),
    ((6, 8, 8), 6, 3, 0, 1, 1, 1),
    ((6, 8, 8), 6, 3, 1, -1, 1, 1),
])
def test_invalid_geometry_rejected(args):
    with pytest.raises(ValueError):
        count_conv(*args)


def test_imagenet_stem_group_factor_is_exact():
    g4 = count_genotype(REFERENCE_BINARY_CELLS, reference_imagenet_config(), (3, 224, 224)).layer("stem.conv1")
    g1 = count_genotype(REFERENCE_BINARY_CELLS, reference_imagenet_config(imagenet_stem_groups=1), (3, 224, 224)).layer(
        "stem.conv1")
    assert g1.flops == 4 * g4.flops and g4.bops == 0


def test_all_skip_genotype_has_no_binary_ops():
    rep = count_genotype(ALL_SKIP, reference_cifar_config(), (3, 32, 32))
    assert rep.bops == 0
    # reductions of a skip edge go through the real-valued factorized reduce
    allowed = ("stem", ".pre0", ".pre1", "skip_connect", "classifier")
    assert all(any(a in r.name for a in allowed) for r in rep.per_layer if r.flops)


def test_totals_are_sums_and_zero_ops_absent():
    rep = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(), (3, 32, 32))
    assert rep.flops == sum(r.flops for r in rep.per_layer) and rep.bops == sum(r.bops for r in rep.per_layer)
    assert all(r.flops == 0 or r.bops == 0 for r in rep.per_layer)
    assert not any(("max_pool" in r.name or "avg_pool" in r.name) and (r.flops or r.bops) for r in rep.per_layer)


def test_cell_convs_counted_as_binary():
    rep = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(), (3, 32, 32))
    conv_rows = [r for r in rep.per_layer if "gconv" in r.name]
    assert conv_rows and all(r.bops > 0 and r.flops == 0 for r in conv_rows)
    real = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(mode=MODES["real"]),
                          (3, 32, 32))
    assert real.bops == 0 and real.flops == rep.flops + rep.bops


def test_imagenet_config_within_table_tolerance():
    rep = reference_imagenet()
    assert abs(rep.flops / 0.805e8 - 1) <= 0.20
    assert abs(rep.bops / 1.149e9 - 1) <= 0.20


def test_width_doubling_scales_binary_ops():
    base = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(init_channels=36), (3, 32, 32)).bops
    wide = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(init_channels=72), (3, 32, 32)).bops
    # constant channels per group: group count doubles with width, so cell convs scale by exactly 2
    assert wide == 2 * base


def test_count_is_static():
    a = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(), (3, 32, 32))
    b = count_genotype(REFERENCE_BINARY_CELLS, reference_cifar_config(), (3, 32, 32))
    assert a == b


def test_search_network_counts_every_candidate():
    cfg = NetworkConfig(init_channels=6, layers=3, num_classes=2, n_nodes=2, groups=GroupConfig(3),
                        mode=MODES["bin-full"])
    rep = count_network(SearchNetwork(cfg, ArchParams.initial(2)), (3, 16, 16))
    assert rep.bops > 0 and rep.flops > 0
    # real weights with binary activations are not XNOR-able, so they count as FLOPs
    proposed = count_network(SearchNetwork(cfg.with_(mode=MODES["bin-proposed"]), ArchParams.initial(2)), (3, 16, 16))
    assert proposed.bops == 0 and proposed.flops == rep.flops + rep.bops
    with pytest.raises(ValueError):
        count_network(SearchNetwork(cfg, ArchParams.initial(2)), (16, 16))


def test_csv_format():
    rep = CostReport([LayerRow("a", 5, 0), LayerRow("b", 0, 7)])
    assert rep.to_csv() == "layer,name,flops,bops\n0,a,5,0\n1,b,0,7\ntotal,,5,7\n"
    assert rep.layer("b").bops == 7
    with pytest.raises(KeyError):
        rep.layer("c")


def test_presets_listed():
    assert set(PRESETS) == {"resnet18-stem", "reference-imagenet", "reference-cifar"}
    assert "118013952" in PRESETS["resnet18-stem"]().to_csv()
