import pytest

import published
from nanotune import cost
from nanotune.nn import ALL_WB, BN_WB, PRESETS, count_selected_params, desk_descriptor, reference_descriptor

ARCH = reference_descriptor()


def rel(a, b):
    return abs(a - b) / abs(b)


@pytest.mark.parametrize("name", sorted(published.COST))
def test_parameter_counts(name):
    assert rel(count_selected_params(ARCH, PRESETS[name]) / 1000, published.COST[name][0]) <= 0.05


def test_forward_macs():
    assert rel(cost.forward_macs(ARCH) / 1e6, published.FORWARD_MMAC) <= 0.05


@pytest.mark.parametrize("name", sorted(published.COST))
def test_train_step_macs(name):
    assert rel(cost.train_step_macs(ARCH, PRESETS[name]).total / 1e6, published.COST[name][2]) <= 0.10


@pytest.mark.parametrize("name", sorted(published.COST))
def test_activation_footprint(name):
    tol = 0.25 if name == "BiasOnly" else 0.10
    assert rel(cost.cost_report(ARCH, PRESETS[name]).activation_kib, published.COST[name][1]) <= tol


def test_fc_only_step_is_forward_plus_head():
    step = cost.train_step_macs(ARCH, PRESETS["FcWB"])
    fc_in = ARCH.shapes()[-2][0]
    bn_elems = sum(
        cost._prod(ARCH.shapes()[i]) for i, l in enumerate(ARCH.layers) if type(l).__name__ == "BatchNorm"
    )
    assert step.forward == cost.forward_macs(ARCH) + bn_elems
    assert step.backward == fc_in * 4 + 4


def test_retention_scales_with_batch():
    for s in PRESETS.values():
        r = cost.retention(ARCH, s)
        assert cost.activation_elements(ARCH, s, 8) == 8 * r.per_frame + r.per_batch


def calibrated():
    meas = {soc: {"strategy": "AllWB", "set_size": 512, "time": published.TIMES[("AllWB", 512)][soc]} for soc in ("GAP9", "GAP8")}
    return {s.name: s for s in cost.calibrate_socs(ARCH, meas)}


@pytest.mark.parametrize("soc", ["GAP9", "GAP8"])
@pytest.mark.parametrize("cell", sorted(published.TIMES))
def test_runtime_predictions(soc, cell):
    profile = calibrated()[soc]
    strategy, n = cell
    predicted = cost.estimate_time(cost.train_step_macs(ARCH, PRESETS[strategy]), n, 5, profile)
    assert rel(predicted, cost.parse_duration(published.TIMES[cell][soc])) <= 0.10


def test_calibration_reproduces_its_own_cell():
    for name, profile in calibrated().items():
        t = cost.estimate_time(cost.train_step_macs(ARCH, ALL_WB), 512, 5, profile)
        assert t == pytest.approx(cost.parse_duration(published.TIMES[("AllWB", 512)][name]), rel=1e-12)


def test_gap8_keeps_the_gap9_rate_and_explicit_emulation():
    p = calibrated()
    assert p["GAP8"].mac_per_cycle == p["GAP9"].mac_per_cycle
    assert p["GAP8"].emulation == 10.0
    assert 0 < p["GAP8"].efficiency < 1


def test_set_size_ratio_is_exact():
    for profile in calibrated().values():
        step = cost.train_step_macs(ARCH, ALL_WB)
        assert cost.estimate_time(step, 512, 5, profile) / cost.estimate_time(step, 128, 5, profile) == 4.0


def test_bn_to_all_time_ratio_tracks_mac_ratio():
    mac_ratio = cost.train_step_macs(ARCH, BN_WB).total / cost.train_step_macs(ARCH, ALL_WB).total
    measured = cost.parse_duration("1:29") / cost.parse_duration("2:03")
    assert rel(measured, mac_ratio) <= 0.05


def test_durations():
    assert cost.parse_duration("2:03") == 123
    assert cost.parse_duration("86:51") == 5211
    assert cost.parse_duration("1:02.5") == 62.5
    assert cost.parse_duration("17") == 17
    assert cost.format_duration(5211) == "86:51"


def test_estimate_rejects_bad_sizes():
    with pytest.raises(ValueError):
        cost.estimate_time(1e6, 0, 5, cost.GAP9)
    with pytest.raises(ValueError):
        cost.SocProfile("x", 1e8, 0)


def test_desk_network_is_much_cheaper():
    assert cost.forward_macs(desk_descriptor()) < cost.forward_macs(ARCH) / 10


@pytest.mark.xfail(strict=True, reason="32 frames x 217.5 KB is about 87% of 8 MB, not the quoted 57%")
def test_batch_of_32_fits_in_57_percent_of_dram():
    kib = cost.cost_report(ARCH, ALL_WB).activation_kib
    assert rel(32 * kib * 1024 / (8 * 1024 * 1024), 0.57) <= 0.10


def test_step_cost_ordering_on_frontnet_variants():
    import numpy as np

    from nanotune.nn import frontnet

    rng = np.random.default_rng(11)
    for _ in range(30):
        h, w = int(rng.integers(3, 7)) * 16, int(rng.integers(3, 7)) * 16
        widths = tuple(int(v) for v in rng.integers(2, 40, size=4))
        arch = frontnet((1, h, w), widths)
        m = {n: cost.train_step_macs(arch, s).total for n, s in PRESETS.items()}
        assert m["FcWB"] < m["BiasOnly"] <= m["BnWB"] < m["AllWB"], m


def test_bias_only_can_cost_more_than_bn_when_a_bias_sits_below_every_norm():
    # a biased conv with no norm after it pulls the bias-only backward pass deeper
    from nanotune.nn import ArchDescriptor, BatchNorm, Conv2D, Flatten, FullyConnected, ReLU

    arch = ArchDescriptor(
        (Conv2D(2, 3, 1, 1, bias=True), ReLU(), Conv2D(2, 3, 1, 1), BatchNorm(2), Flatten(), FullyConnected(4)),
        input_shape=(1, 6, 6),
    )
    assert cost.train_step_macs(arch, PRESETS["BiasOnly"]).total > cost.train_step_macs(arch, PRESETS["BnWB"]).total


def test_time_is_linear_in_epochs_and_set_size():
    step = cost.train_step_macs(ARCH, ALL_WB)
    t = cost.estimate_time(step, 100, 1, cost.GAP9)
    assert cost.estimate_time(step, 300, 7, cost.GAP9) == pytest.approx(21 * t, rel=1e-12)
