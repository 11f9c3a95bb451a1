import os

import pytest
import numpy as np

from gfcnn import gfarch
from gfcnn import gftensor
from gfcnn.gfarch import Conv, Pool, GlobalFeature, FullyConnected


CNN_COUNTS = {1: 347880, 2: 644720, 3: 1292336, 4: 1653744, 5: 2518192,
              6: 3331312}
GF_COUNTS = {1: 358890, 2: 657730, 3: 1305346, 4: 1666754, 5: 2531202,
             6: 3344322}
FLAT = {1: 3456, 2: 2112, 3: 4224, 4: 5120, 5: 8064, 6: 9728}

tiny = 'C(2)-P(2)-G(3)-F(8)*'


def test_parse():
    spec = gfarch.parse_arch('C(16)-P(2)-F(100)*')
    assert spec.layers == [Conv(16), Pool(2, 2), FullyConnected(100, True)]
    assert spec.input_shape == (50, 20)
    assert spec.n_classes == 20
    spec = gfarch.parse_arch('C(16)-P(2)-G(10)-F(100)*')
    assert spec.layers == [Conv(16), Pool(2, 2), GlobalFeature(10),
                           FullyConnected(100, True)]
    spec = gfarch.parse_arch('C(16) - P(2,1) - F(300)')
    assert spec.layers[1] == Pool(rows=1, cols=2)
    assert spec.layers[2] == FullyConnected(300, False)


def test_text_round_trip():
    for cnn, gf in gfarch.REFERENCE_MODELS.values():
        assert gfarch.parse_arch(cnn).text == cnn
        assert gfarch.parse_arch(gf).text == gf
        assert gfarch.parse_arch(gf).without_global().text == cnn


@pytest.mark.parametrize('text, position', [
    ('C(16)-X(2)', 2),
    ('C(16)-P(2)-F(10)-G(5)', 4),
    ('C(16)-G(2)-G(3)-F(10)', 3),
    ('C(16)-P(2)', 2),
    ('C(16)*-F(10)', 1),
    ('C(16)-P(1,2,3)-F(10)', 2),
    ('C(16,2)-F(10)', 1),
    ('C(0)-F(10)', 1),
    ('C(16)-F(10)-C(4)', 3),
    ('C(a)-F(10)', 1),
    ('', 1),
])
def test_parse_errors(text, position):
    with pytest.raises(gfarch.ArchError) as e:
        gfarch.parse_arch(text)
    assert e.value.position == position
    assert 'token %d' % position in str(e.value)


def test_parse_type_error():
    with pytest.raises(TypeError):
        gfarch.parse_arch(16)


def test_trace_model_2():
    spec = gfarch.parse_arch(gfarch.REFERENCE_MODELS[2][0])
    shapes = [s.shape for s in gfarch.trace_shapes(spec)]
    assert shapes[:6] == [(50, 20, 1), (48, 18, 16), (24, 9, 16),
                          (22, 7, 32), (22, 3, 32), (2112, )]
    assert shapes[-2:] == [(300, ), (20, )]


def test_trace_model_6():
    spec = gfarch.parse_arch(gfarch.REFERENCE_MODELS[6][1])
    steps = gfarch.trace_shapes(spec)
    maps = [s.shape for s in steps if len(s.shape) == 3]
    assert maps[-1] == (19, 2, 256)
    names = [s.layer for s in steps if isinstance(s.layer, str)]
    assert names == ['input', 'flatten', 'concat', 'output']
    assert [s.shape for s in steps if s.layer == 'concat'] == [(9738, )]


def test_flatten_sizes():
    for k, (cnn, gf) in gfarch.REFERENCE_MODELS.items():
        assert gfarch.feature_sizes(gfarch.parse_arch(cnn)) == (FLAT[k], 0)
        assert gfarch.feature_sizes(gfarch.parse_arch(gf)) == (FLAT[k], 10)


def test_trace_underflow():
    spec = gfarch.parse_arch(gfarch.REFERENCE_MODELS[1][0], (3, 3))
    with pytest.raises(gfarch.ArchError) as e:
        gfarch.trace_shapes(spec)
    assert e.value.layer == 2
    spec = gfarch.parse_arch('C(4)-C(4)-F(2)', (4, 10))
    with pytest.raises(gfarch.ArchError) as e:
        gfarch.build_model(spec)
    assert e.value.layer == 2


def test_reference_counts_from_spec():
    for k, (cnn, gf) in gfarch.REFERENCE_MODELS.items():
        assert gfarch.spec_params(gfarch.parse_arch(cnn)).total == \
            CNN_COUNTS[k]
        assert gfarch.spec_params(gfarch.parse_arch(gf)).total == \
            GF_COUNTS[k]


def test_reference_counts_from_models():
    for k, (cnn, gf) in gfarch.REFERENCE_MODELS.items():
        for text, expected in ((cnn, CNN_COUNTS[k]), (gf, GF_COUNTS[k])):
            model = gfarch.build_model(text, 0)
            count = gfarch.count_params(model)
            assert count.total == expected
            assert count.total == count.n_conv + count.n_mlp + count.n_fc
            assert count.total == sum(p.size for p in model.parameters())
            assert count == gfarch.spec_params(model.spec)


def test_global_overhead():
    for k, (cnn, gf) in gfarch.REFERENCE_MODELS.items():
        width = 100 if k == 1 else 300
        assert GF_COUNTS[k] - CNN_COUNTS[k] == 10010 + 10 * width
        count = gfarch.spec_params(gfarch.parse_arch(gf))
        assert count.n_mlp == 10010
        overhead, base = gfarch.complexity(gfarch.parse_arch(gf))
        assert overhead == 10010 + 10 * width
        assert overhead < base
        assert gfarch.spec_params(gfarch.parse_arch(cnn)).n_mlp == 0


def test_fc_split():
    model = gfarch.build_model(gfarch.REFERENCE_MODELS[4][1], 0)
    n_fc1, n_fc2 = gfarch.fc_split(model)
    assert n_fc2 == 10 * 300
    assert n_fc1 + n_fc2 == gfarch.count_params(model).n_fc
    assert model.fc_layers[0][0].weights.shape == (5130, 300)
    assert model.global_layer.weights.shape == (1000, 10)
    assert model.output_layer.weights.shape == (300, 20)


def test_build_is_seeded():
    a = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 7)
    b = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 7)
    c = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 8)
    for (na, pa), (nb, pb) in zip(a.named_parameters(),
                                  b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)
    for name, p in a.named_parameters():
        if name.endswith('bias'):
            assert np.all(p.data == 0)
    assert a.mode == 'eval'
    assert a.dtype == np.float32


def test_partition():
    model = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 0)
    ids = [id(p) for p in model.theta_conv + model.theta_mlp + model.theta_fc]
    assert len(ids) == len(set(ids))
    assert set(ids) == set(id(p) for p in model.parameters())
    cnn = gfarch.build_model(gfarch.parse_arch('C(2)-F(4)', (8, 8), 3), 0)
    assert cnn.theta_mlp == []
    assert cnn.global_layer is None


def test_forward_shapes_and_batching():
    spec = gfarch.parse_arch(tiny, (8, 8), 3)
    model = gfarch.build_model(spec, 1, dtype=np.float64)
    x = np.random.default_rng(0).random((4, 8, 8))
    single = model.forward(x[0])
    assert single.shape == (3, )
    batched = model.forward(x)
    assert batched.shape == (4, 3)
    for i in range(4):
        assert np.allclose(batched.data[i], model.forward(x[i]).data)
    with pytest.raises(ValueError):
        model.forward(np.zeros((8, 7)))


def test_train_mode_needs_rng():
    model = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 1)
    model.train()
    assert model.mode == 'train'
    with pytest.raises(ValueError):
        model.forward(np.zeros((8, 8)))
    out = model.forward(np.ones((8, 8)), np.random.default_rng(0))
    assert out.shape == (3, )
    model.eval()
    assert np.array_equal(model.forward(np.ones((8, 8))).data,
                          model.forward(np.ones((8, 8))).data)


def test_global_feature_gradients():
    spec = gfarch.parse_arch(gfarch.REFERENCE_MODELS[1][1])
    model = gfarch.build_model(spec, 0, dtype=np.float64)
    x = np.random.default_rng(4).integers(0, 256, size=(50, 20)) / 255
    err = gftensor.grad_check(model, x, 7, eps=1e-5, n_params=200)
    assert err < 1e-4


def test_save_and_load(tmp_path):
    path = str(tmp_path / 'model.gfcnn')
    model = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 5)
    x = np.random.default_rng(1).random((8, 8))
    model.train()
    gfarch.save_model(model, path, extra=[('train.epochs', 2)])
    assert os.path.exists(path + '.bin')
    with open(path) as f:
        manifest = f.read()
    assert 'arch C(2)-P(2)-G(3)-F(8)*' in manifest
    assert 'seed 5' in manifest
    assert 'train.epochs 2' in manifest
    loaded = gfarch.load_model(path)
    assert loaded.mode == 'eval'
    assert loaded.seed == 5
    assert loaded.spec == model.spec
    assert gfarch.count_params(loaded) == gfarch.count_params(model)
    for (_, a), (_, b) in zip(model.named_parameters(),
                              loaded.named_parameters()):
        assert np.array_equal(a.data, b.data)
    model.eval()
    assert np.array_equal(model.forward(x).data, loaded.forward(x).data)


def test_load_rejects_damage(tmp_path):
    path = str(tmp_path / 'model.gfcnn')
    model = gfarch.build_model(gfarch.parse_arch(tiny, (8, 8), 3), 5)
    model.dump(path)
    with open(path + '.bin', 'rb') as f:
        blob = f.read()
    with open(path + '.bin', 'wb') as f:
        f.write(blob[:-8])
    with pytest.raises(ValueError):
        gfarch.load_model(path)
    with open(path + '.bin', 'wb') as f:
        f.write(blob[:-4] + b'\x00\x00\x80\x3f')
    with pytest.raises(ValueError):
        gfarch.load_model(path)
    with open(path, 'w') as f:
        f.write('not a model\n')
    with pytest.raises(ValueError):
        gfarch.load_model(path)


if __name__ == "__main__":
    test_reference_counts_from_spec()
