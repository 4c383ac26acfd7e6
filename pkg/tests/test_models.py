import numpy as np
import pytest

from gather_excite.cost import count, registry_census
from gather_excite.exceptions import ConfigurationError, DimensionError
from gather_excite.ge import GatherKind
from gather_excite.models import (ArchSpec, GEPlacement, block_alias, build_model, count_ge_units,
                                  resolve_block_name)
from gather_excite.nn import Conv2d
from gather_excite.tensor import Tensor, no_grad


def test_resnet50_stage_plan():
    plan = ArchSpec.resnet50().plan()
    assert [s.name for s in plan.stages] == ["stage2", "stage3", "stage4", "stage5"]
    assert [len(s.blocks) for s in plan.stages] == [3, 4, 6, 3]
    assert [s.blocks[-1].cout for s in plan.stages] == [256, 512, 1024, 2048]
    assert [s.blocks[-1].out_hw for s in plan.stages] == [(56, 56), (28, 28), (14, 14), (7, 7)]


def test_resnet101_block_counts():
    assert [len(s.blocks) for s in ArchSpec.resnet101().plan().stages] == [3, 4, 23, 3]


def test_cifar_families():
    p110 = ArchSpec.cifar_resnet(110).plan()
    assert [len(s.blocks) for s in p110.stages] == [18, 18, 18]
    assert {b.kind for s in p110.stages for b in s.blocks} == {"preact-basic"}
    p164 = ArchSpec.cifar_resnet(164).plan()
    assert [len(s.blocks) for s in p164.stages] == [18, 18, 18]
    assert p164.final_channels == 256 and p164.preact
    wrn = ArchSpec.wrn(16, 8).plan()
    assert [len(s.blocks) for s in wrn.stages] == [2, 2, 2]
    assert [s.blocks[0].cout for s in wrn.stages] == [128, 256, 512]


def test_reference_parameter_counts():
    # well-known sizes of the standard CIFAR backbones
    assert count(ArchSpec.cifar_resnet(110)).params_m == pytest.approx(1.73, abs=0.01)
    assert count(ArchSpec.cifar_resnet(164)).params_m == pytest.approx(1.70, abs=0.01)
    assert count(ArchSpec.wrn(16, 8)).params_m == pytest.approx(10.96, abs=0.01)


def test_bad_arch_config():
    with pytest.raises(ConfigurationError):
        ArchSpec("vgg")
    with pytest.raises(ConfigurationError):
        ArchSpec.cifar_resnet(111)


def test_resnet50_has_53_convs_and_fc():
    m = build_model(ArchSpec.resnet50())
    convs = [n for n, mod in m.named_modules() if isinstance(mod, Conv2d)]
    assert len(convs) == 53
    assert m.fc.weight.shape == (1000, 2048)
    assert m.num_parameters() == 25_557_032


def test_ge_stage2_adds_three_units():
    place = GEPlacement.parse("theta:global:stage2")
    m = build_model(ArchSpec.resnet50(), place)
    assert len(m.ge_units()) == 3 == count_ge_units(ArchSpec.resnet50(), place)
    assert all(u.cfg.gather is GatherKind.DEPTHWISE_CONV for u in m.ge_units().values())


def test_unit_count_is_sum_of_selected_blocks():
    arch = ArchSpec.resnet101()
    assert count_ge_units(arch, GEPlacement.parse("se:global:stage3,stage4")) == 4 + 23
    assert count_ge_units(arch, GEPlacement.parse("theta-minus:e8:all")) == 33


def test_invalid_stage_selection():
    with pytest.raises(ConfigurationError):
        build_model(ArchSpec.cifar_resnet(8), "theta:global:stage5")
    with pytest.raises(ConfigurationError):
        GEPlacement.parse("theta:global:conv3")
    with pytest.raises(ConfigurationError):
        GEPlacement.parse("mystery:global:all")
    with pytest.raises(ConfigurationError):
        GEPlacement.parse("se:e4:all")


def test_placement_round_trip():
    for text in ("theta:e8:stage3,stage4", "theta-minus-max:e4:all", "se:global:all", "theta-plus:global:stage2"):
        assert GEPlacement.parse(text).describe() == text
    assert GEPlacement.parse("none") is None


def test_cifar110_se_forward_shape():
    m = build_model(ArchSpec.cifar_resnet(110), "se:global:all").eval()
    with no_grad():
        out = m(Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    assert out.shape == (1, 10)


def test_fresh_eval_model_zero_input_finite(tiny_arch):
    m = build_model(tiny_arch, "theta:e2:all").eval()
    with no_grad():
        out = m(Tensor(np.zeros((2, 3, 32, 32), np.float32))).data
    assert np.all(np.isfinite(out))


def test_eval_forward_bit_identical(tiny_arch, rng):
    m = build_model(tiny_arch, "theta-plus:e4:all").eval()
    x = Tensor(rng.standard_normal((3, 3, 32, 32)).astype(np.float32))
    with no_grad():
        assert m(x).data.tobytes() == m(x).data.tobytes()


def test_same_seed_same_weights(tiny_arch):
    a = build_model(tiny_arch, "theta:global:all", seed=7).state_dict()
    b = build_model(tiny_arch, "theta:global:all", seed=7).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_geometry_mismatch(tiny_arch):
    m = build_model(tiny_arch)
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 3, 28, 28), np.float32)))


@pytest.mark.parametrize("place", ["theta-minus:global:all", "theta:e4:all", "theta-plus:global:stage3", "se:global:all"])
def test_saturated_gates_match_baseline(tiny_arch, rng, place):
    ge = build_model(tiny_arch, place, seed=3)
    base = build_model(tiny_arch, None, seed=99)
    shared = {k: v for k, v in ge.state_dict().items() if ".ge." not in k}
    base.load_state_dict(shared)
    ge.eval().set_gate_logit(np.inf)
    base.eval()
    x = Tensor(rng.standard_normal((4, 3, 32, 32)).astype(np.float32))
    with no_grad():
        assert np.array_equal(ge(x).data, base(x).data)


def test_registry_names_unique_and_hierarchical():
    m = build_model(ArchSpec.cifar_resnet(20), "theta:e4:all")
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert "stage3.block2.ge.gather.stage1.conv.weight" in names
    assert all(p.name == n for n, p in m.named_parameters())


def test_every_parameter_has_a_cost_line():
    arch = ArchSpec.cifar_resnet(20)
    place = GEPlacement.parse("theta-plus:e2:stage2,stage4")
    lines = count(arch, place).by_name()
    census = registry_census(build_model(arch, place))
    assert census.keys() <= lines.keys()
    assert all(lines[k].params == v for k, v in census.items())


def test_block_aliases():
    assert block_alias("stage4.block6") == "conv4-6"
    assert resolve_block_name("conv4-6-relu") == "stage4.block6"
    m = build_model(ArchSpec.cifar_resnet(20))
    assert m.block("conv3-2") is m.block("stage3.block2")
    with pytest.raises(ConfigurationError):
        m.block("conv9-9")
