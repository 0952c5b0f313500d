import numpy as np
import pytest

from highres3d import network
from highres3d.network import ArchitectureError, CheckpointError, LayerSpec
from highres3d.tensor import ShapeError

from conftest import micro_model, micro_spec
from oracles import highres_parameter_count

# frozen from the closed-form oracle
DEFAULT_160 = 814_032
DROPOUT_160 = 821_872


def test_oracle_values_are_frozen():
    assert highres_parameter_count(160) == DEFAULT_160
    assert highres_parameter_count(160, head=80) == DROPOUT_160
    assert highres_parameter_count(160, batchnorm=False) == 812_624


@pytest.mark.parametrize("variant,head", [("default", None), ("dropout", 80), ("nores", None)])
@pytest.mark.parametrize("classes", [2, 3, 160])
def test_parameter_count_matches_closed_form(variant, head, classes):
    spec = network.highres3dnet_spec(variant, classes)
    store = network.init_parameters(spec, np.random.default_rng(0))
    assert network.count_parameters(store) == highres_parameter_count(classes, head=head)


def test_published_counts_round_to_two_significant_figures():
    assert round(DEFAULT_160 / 1e6, 2) == 0.81
    assert round(DROPOUT_160 / 1e6, 2) == 0.82


def test_architecture_audit():
    spec = network.highres3dnet_spec("default", 160)
    convs3 = [l for l in spec.convs if l.kernel == 3]
    assert len(spec.convs) == 20
    assert [sum(l.dilation == r for l in convs3) for r in (1, 2, 4)] == [7, 6, 6]
    assert len(spec.blocks()) == 9
    assert all(len(b) == 2 for b in spec.blocks())
    assert [b[0].dilation for b in spec.blocks()] == [1, 1, 1, 2, 2, 2, 4, 4, 4]
    assert [b[1].c_out for b in spec.blocks()] == [16] * 3 + [32] * 3 + [64] * 3
    # pre-activation: every conv inside a block is preceded by batch norm then ReLU
    kinds = [l.kind for l in spec.layers]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv" and layer.name.startswith("block_"):
            assert kinds[i - 2:i] == ["batchnorm", "relu"]
    assert spec.layers[-1].kind == "softmax"
    assert spec.layers[-2].name == "classifier" and spec.layers[-2].kernel == 1


def test_dropout_variant_head():
    spec = network.highres3dnet_spec("dropout", 5)
    head = spec.layers[spec.index_of("conv_head")]
    assert (head.kernel, head.c_in, head.c_out) == (1, 64, 80)
    drop = spec.layers[spec.index_of("dropout")]
    assert drop.keep_prob == 0.5
    assert spec.index_of("dropout") == spec.index_of("classifier") - 1


def test_unknown_variant_and_bad_specs():
    with pytest.raises(ArchitectureError):
        network.highres3dnet_spec("wide")
    with pytest.raises(ArchitectureError):
        network.highres3dnet_spec("default", 1)
    with pytest.raises(ArchitectureError):
        LayerSpec("pool")
    with pytest.raises(ArchitectureError):
        network.ArchitectureSpec([LayerSpec("residual-begin", "a")], 2)


def test_init_is_deterministic():
    _, a = network.build_highres3dnet("default", 3, seed=5)
    _, b = network.build_highres3dnet("default", 3, seed=5)
    _, c = network.build_highres3dnet("default", 3, seed=6)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["conv_0.weight"], c.params["conv_0.weight"])


def test_he_initialisation_scale():
    spec = network.highres3dnet_spec("default", 3)
    store = network.init_parameters(spec, np.random.default_rng(0))
    w = store.params["block_8.conv_1.weight"]
    assert abs(w.std() - np.sqrt(2 / (27 * 64))) < 0.01 * np.sqrt(2 / (27 * 64)) * 5


def test_output_is_a_distribution_with_input_shape():
    spec, store = micro_model()
    x = np.random.default_rng(0).normal(size=(1, 7, 8, 9)).astype(np.float32)
    for mode in ("train", "inference"):
        y = network.forward(spec, store, x, mode, rng=np.random.default_rng(0)).data
        assert y.shape == (3, 7, 8, 9)
        np.testing.assert_allclose(y.sum(axis=0), 1, atol=1e-5)


def test_forward_rejects_wrong_channels_and_modes():
    spec, store = micro_model()
    with pytest.raises(ShapeError):
        network.forward(spec, store, np.zeros((2, 5, 5, 5), np.float32))
    with pytest.raises(ValueError):
        network.forward(spec, store, np.zeros((1, 5, 5, 5), np.float32), "eval")
    with pytest.raises(ValueError):
        network.forward(spec, store, np.zeros((1, 5, 5, 5), np.float32), norm="group")


def test_inference_is_deterministic():
    spec, store = network.build_highres3dnet("dropout", 3, seed=0)
    x = np.random.default_rng(1).normal(size=(1, 12, 12, 12)).astype(np.float32)
    a = network.forward(spec, store, x, "inference").data
    b = network.forward(spec, store, x, "inference").data
    assert np.array_equal(a, b)


def test_zero_residual_branch_is_identity():
    spec, store = micro_model(stages=((1, 3, 1), (2, 3, 1)), first=3)
    for k in store.params:
        if k.startswith("block_1.conv_1"):
            store.params[k][:] = 0
    x = np.random.default_rng(0).normal(size=(3, 6, 6, 6)).astype(np.float32)
    begin, end = spec.index_of("block_1.begin"), spec.index_of("block_1.end")
    y = network.forward(spec, store, x, "inference", start=begin, stop=end + 1).data
    assert np.array_equal(y, x)


def test_nores_variant_drops_the_skip():
    spec, store = micro_model(residual=False, stages=((1, 3, 1),), first=3)
    for k in store.params:
        if k.startswith("block_0.conv_1"):
            store.params[k][:] = 0
    x = np.random.default_rng(0).normal(size=(3, 5, 5, 5)).astype(np.float32)
    begin, end = spec.index_of("block_0.begin"), spec.index_of("block_0.end")
    y = network.forward(spec, store, x, "inference", start=begin, stop=end + 1).data
    assert not y.any()


def test_train_mode_records_batch_statistics():
    spec, store = micro_model()
    stats = {}
    x = np.random.default_rng(0).normal(size=(1, 6, 6, 6)).astype(np.float32)
    network.forward(spec, store, x, "train", bn_stats=stats)
    assert set(stats) == {l.name for l in spec.layers if l.kind == "batchnorm"}
    before = store.buffers["bn_0.running_mean"].copy()
    network.apply_bn_stats(store, stats)
    np.testing.assert_allclose(store.buffers["bn_0.running_mean"], 0.9 * before + 0.1 * stats["bn_0"].mean,
                               rtol=1e-6)


def test_volume_norm_matches_train_mode_without_dropout():
    spec, store = micro_model()
    x = np.random.default_rng(0).normal(size=(1, 6, 6, 6)).astype(np.float32)
    a = network.forward(spec, store, x, "train").data
    b = network.forward(spec, store, x, "inference", norm="volume").data
    assert np.array_equal(a, b)


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    spec, store = network.build_highres3dnet("dropout", 4, seed=3)
    store.buffers["bn_0.running_mean"][:] = np.arange(16)
    p1, p2 = tmp_path / "a.hr3d", tmp_path / "b.hr3d"
    network.save_checkpoint(p1, spec, store, {"step": 7})
    spec2, store2, meta = network.load_checkpoint(p1)
    assert spec2.to_dict() == spec.to_dict()
    assert meta["step"] == 7
    for k in store.params:
        assert np.array_equal(store.params[k], store2.params[k])
    for k in store.buffers:
        assert np.array_equal(store.buffers[k], store2.buffers[k])
    network.save_checkpoint(p2, spec2, store2, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_errors(tmp_path):
    spec, store = micro_model()
    path = tmp_path / "m.hr3d"
    network.save_checkpoint(path, spec, store)
    blob = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        network.load_checkpoint(tmp_path / "bad_magic")
    (tmp_path / "short").write_bytes(blob[:-10])
    with pytest.raises(CheckpointError):
        network.load_checkpoint(tmp_path / "short")
    other = micro_spec(num_classes=4)
    with pytest.raises(ArchitectureError):
        network.check_compatible(other, store)
