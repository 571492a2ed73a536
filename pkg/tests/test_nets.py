import numpy as np
import pytest

from xmgc import nets, tensor_core as tc
from xmgc.tensor_core import Tensor

# frozen regression value, cross-checked by the closed-form count below
UNET_256_D7_B64_PARAMS = 41_833_475


def image_batch(n, res, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (n, 3, res, res)))


def test_generator_256_depth7_bottleneck_and_shape():
    spec, params = nets.build_unet_generator(256, depth=7)
    assert nets.bottleneck_shape(spec)[1:] == (2, 2)
    with tc.no_grad():
        out = nets.forward(spec, params, image_batch(1, 256))
    assert out.shape == (1, 3, 256, 256)


def test_generator_512_depth7():
    spec, params = nets.build_unet_generator(512, depth=7)
    assert nets.bottleneck_shape(spec)[1:] == (4, 4)
    with tc.no_grad():
        out = nets.forward(spec, params, image_batch(1, 512), "infer")
    assert out.shape == (1, 3, 512, 512)


def test_generator_desk_scale():
    spec, params = nets.build_unet_generator(64, base_filters=16, depth=5)
    assert nets.bottleneck_shape(spec)[1:] == (2, 2)
    out = nets.forward(spec, params, image_batch(2, 64))
    assert out.shape == (2, 3, 64, 64)
    assert out.data.min() >= -1 and out.data.max() <= 1


@pytest.mark.parametrize("res,depth", [(100, 5), (32, 7), (0, 3), (96, 5)])
def test_generator_rejects_bad_resolution(res, depth):
    with pytest.raises(ValueError):
        nets.build_unet_generator(res, depth=depth)


@pytest.mark.parametrize("res", [48, 2, 1000])
def test_discriminator_and_classifier_reject_bad_resolution(res):
    with pytest.raises(ValueError):
        nets.build_discriminator(res)
    with pytest.raises(ValueError):
        nets.build_classifier(res, 11)


def test_generator_parameter_count_frozen():
    spec, params = nets.build_unet_generator(256, depth=7, base_filters=64)
    total = 0
    for layer in spec.layers:
        total += layer.in_channels * layer.out_channels * 16 + layer.out_channels
        total += 2 * layer.out_channels if layer.norm else 0
    assert params.count() == total == UNET_256_D7_B64_PARAMS


def test_parameter_count_independent_of_resolution():
    a = nets.build_unet_generator(128, depth=5, base_filters=8)[1].count()
    b = nets.build_unet_generator(512, depth=5, base_filters=8)[1].count()
    assert a == b


def test_skip_links_reference_matching_encoder_levels():
    spec, _ = nets.build_unet_generator(256, depth=7)
    for idx, layer in enumerate(spec.layers):
        if layer.skip_from is not None:
            src = spec.layers[layer.skip_from]
            assert layer.skip_from < idx and src.name.startswith("enc")
            assert src.out_shape[1:] == spec.layers[idx - 1].out_shape[1:]
    skipped = {spec.layers[i].name: spec.layers[i].skip_from for i in range(len(spec.layers))
               if spec.layers[i].skip_from is not None}
    # encoder level i feeds decoder level depth-1-i
    assert skipped == {f"dec{7 - 1 - i}": i for i in range(6)}


def test_skip_links_are_live():
    spec, params = nets.build_unet_generator(64, base_filters=8, depth=5, seed=3)
    x = image_batch(1, 64, seed=4)
    with tc.no_grad():
        a = nets.forward(spec, params, x, "infer")
        b = nets.forward(spec, params, x, "infer", drop_skips=True)
    assert np.any(a.data != b.data)


def test_parameter_names_stable_and_learnable():
    _, p1 = nets.build_unet_generator(64, base_filters=8, depth=5, seed=0)
    _, p2 = nets.build_unet_generator(64, base_filters=8, depth=5, seed=9)
    assert list(p1.tensors) == list(p2.tensors)
    assert len(set(p1.tensors)) == len(p1.tensors)
    assert all(t.requires_grad for _, t in p1)
    assert all(isinstance(b, np.ndarray) for b in p1.buffers.values())
    assert "enc1.running_mean" in p1.buffers and "enc0.gamma" not in p1.tensors


def test_initialization_statistics():
    _, params = nets.build_unet_generator(256, depth=7)
    w = params["enc3.weight"].data
    assert abs(float(w.mean())) < 1e-3 and abs(float(w.std()) - 0.02) < 1e-3
    assert not params["enc3.bias"].data.any()


def test_discriminator_output_is_probability():
    spec, params = nets.build_discriminator(256, base_filters=64)
    assert spec.layers[0].in_channels == 6
    assert spec.layers[-2].out_shape[1:] == (2, 2)
    cond, cand = image_batch(2, 256, 1), image_batch(2, 256, 2)
    with tc.no_grad():
        p = nets.discriminate(spec, params, cond, cand, "train", update_stats=False)
        q = nets.discriminate(spec, params, cond, cand, "train", update_stats=False)
    assert p.shape == (2, 1)
    assert np.all((p.data > 0) & (p.data < 1))
    assert p.data.tobytes() == q.data.tobytes()


def test_infer_forward_bit_identical():
    spec, params = nets.build_unet_generator(64, base_filters=8, depth=5)
    x = image_batch(2, 64)
    with tc.no_grad():
        a = nets.forward(spec, params, x, "infer").data
        b = nets.forward(spec, params, x, "infer").data
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_wrong_input_shape():
    spec, params = nets.build_unet_generator(64, base_filters=8, depth=5)
    with pytest.raises(tc.ShapeError, match="generator"):
        nets.forward(spec, params, image_batch(1, 32))


def test_classifier_outputs_and_softmax():
    spec, params = nets.build_classifier(64, 11)
    with tc.no_grad():
        logits = nets.forward(spec, params, image_batch(3, 64), "infer")
    assert logits.shape == (3, 11)
    np.testing.assert_allclose(tc.softmax(logits.data).sum(axis=1), 1.0, atol=1e-6)


def test_classifier_rejects_single_class():
    with pytest.raises(ValueError):
        nets.build_classifier(64, 1)


def test_untrained_classifier_is_at_chance():
    rng = np.random.default_rng(0)
    spec, params = nets.build_classifier(16, 11, seed=1)
    labels = np.repeat(np.arange(11), 91)[:1000]
    x = rng.uniform(-1, 1, size=(1000, 3, 16, 16))
    with tc.no_grad():
        pred = nets.forward(spec, params, Tensor(x), "infer").data.argmax(axis=1)
    assert abs(float((pred == labels).mean()) - 1 / 11) <= 0.1


def test_recalibrate_batchnorm_uses_population_statistics():
    spec, params = nets.build_classifier(16, 3, seed=0)
    x = np.random.default_rng(2).normal(0.3, 0.5, (10, 3, 16, 16))
    nets.recalibrate_batchnorm(spec, params, x, chunk=10)
    # first layer sees the raw input, so its stats are those of conv0 over the full set
    with tc.no_grad():
        h = tc.conv2d(Tensor(x), params["conv0.weight"], params["conv0.bias"], 2, 1).data.astype(np.float64)
    np.testing.assert_allclose(params.buffers["conv0.running_mean"], h.mean(axis=(0, 2, 3)), rtol=1e-5, atol=1e-6)
    n = h.shape[0] * h.shape[2] * h.shape[3]
    np.testing.assert_allclose(params.buffers["conv0.running_var"], h.var(axis=(0, 2, 3)) * n / (n - 1),
                               rtol=1e-4)
    # chunking averages the chunk statistics with equal weight
    _, chunked = nets.build_classifier(16, 3, seed=0)
    nets.recalibrate_batchnorm(spec, chunked, x, chunk=5)
    np.testing.assert_allclose(chunked.buffers["conv0.running_mean"], params.buffers["conv0.running_mean"],
                               rtol=1e-5, atol=1e-6)
