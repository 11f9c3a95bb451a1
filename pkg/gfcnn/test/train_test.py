import math

import pytest
import numpy as np

from gfcnn import gfarch
from gfcnn import gfdata
from gfcnn import gftrain
from gfcnn.gftensor import Tape


tiny = gfarch.parse_arch('C(2)-P(2)-G(3)-F(8)*', (8, 8), 3)


def small_dataset(count=24, seed=0, n_classes=3):
    r = np.random.default_rng(seed)
    pixels = r.integers(0, 256, size=(count, 8, 8)).astype(np.uint8)
    labels = np.arange(count) % n_classes
    return gfdata.WindowedDataset(pixels, labels, n_classes)


def separable_dataset(n_classes=2, runs=4, seed=0):
    cfg = gfdata.SynthConfig(n=50, w=20, classes=n_classes, runs=runs,
                             samples=480, gamma=0.0, sigma=0.0)
    return gfdata.make_images(gfdata.gen_synthetic(cfg, seed), 20)


def test_defaults():
    hp = gftrain.HyperParams()
    assert (hp.batch_size, hp.epochs, hp.learning_rate, hp.dropout_rate) == \
        (128, 50, 0.001, 0.5)
    assert (hp.beta1, hp.beta2, hp.epsilon) == (0.9, 0.999, 1e-8)
    assert hp.optimizer == 'adam'
    gftrain.check_hyperparams(hp)
    for bad in (hp._replace(batch_size=0), hp._replace(epochs=0),
                hp._replace(learning_rate=0.0), hp._replace(optimizer='rms')):
        with pytest.raises(ValueError):
            gftrain.check_hyperparams(bad)


def test_batch_loss_uniform_logits():
    spec = gfarch.parse_arch('C(2)-F(4)', (8, 8), 20)
    model = gfarch.build_model(spec, 0, dtype=np.float64)
    model.output_layer.weights.data[...] = 0
    loss = gftrain.batch_loss(model, np.random.default_rng(0).random((1, 8, 8)),
                              [5])
    assert np.isclose(loss.item(), math.log(20))


def test_batch_loss_mean_invariance():
    model = gfarch.build_model(tiny, 1, dtype=np.float64)
    x = np.random.default_rng(1).random((5, 8, 8))
    y = np.array([0, 2, 1, 1, 0])
    once = gftrain.batch_loss(model, x, y).item()
    twice = gftrain.batch_loss(model, np.concatenate([x, x]),
                               np.concatenate([y, y])).item()
    assert np.isclose(once, twice, rtol=1e-12)
    with pytest.raises(ValueError):
        gftrain.batch_loss(model, x, [0, 2, 1, 1, 3])
    with pytest.raises(ValueError):
        gftrain.batch_loss(model, np.zeros((0, 8, 8)), [])


def test_batch_loss_oracle():
    model = gfarch.build_model(tiny, 2, dtype=np.float64)
    r = np.random.default_rng(2)
    for _ in range(1000):
        x = r.random((4, 8, 8))
        y = r.integers(0, 3, size=4)
        logits = model.forward(x).data
        terms = []
        for z, label in zip(logits, y):
            top = max(z)
            log_sum = top + math.log(math.fsum(math.exp(v - top) for v in z))
            terms.append(log_sum - z[label])
        expected = math.fsum(terms) / len(terms)
        assert abs(gftrain.batch_loss(model, x, y).item() - expected) < 1e-9


def test_label_permutation():
    model = gfarch.build_model(tiny, 3, dtype=np.float64)
    x = np.random.default_rng(3).random((6, 8, 8))
    y = np.array([0, 1, 2, 2, 1, 0])
    before = gftrain.batch_loss(model, x, y).item()
    perm = np.array([2, 0, 1])
    inverse = np.argsort(perm)
    model.output_layer.weights.data[...] = \
        model.output_layer.weights.data[:, inverse]
    model.output_layer.bias.data[...] = model.output_layer.bias.data[inverse]
    after = gftrain.batch_loss(model, x, perm[y]).item()
    assert np.isclose(before, after, rtol=1e-12)


def test_adam_first_step():
    lr = 0.001
    params = [np.array([1.0, -2.0, 0.5])]
    grads = [np.array([3.0, -0.01, 100.0])]
    new, state = gftrain.adam_step(params, grads, None, lr, 0.9, 0.999,
                                   1e-8, 1)
    delta = new[0] - params[0]
    assert np.all(np.sign(delta) == -np.sign(grads[0]))
    assert np.all(np.abs(delta) >= 0.999 * lr)
    assert np.all(np.abs(delta) <= lr)
    assert len(state) == 2


def test_adam_zero_gradient():
    params = [np.array([[1.0, 2.0]])]
    state = None
    for t in range(1, 6):
        params, state = gftrain.adam_step(params, [np.zeros((1, 2))], state,
                                          0.1, 0.9, 0.999, 1e-8, t)
    assert np.array_equal(params[0], [[1.0, 2.0]])


def test_adam_converges():
    theta = [np.array([1.0])]
    state = None
    for t in range(1, 201):
        theta, state = gftrain.adam_step(theta, [2 * theta[0]], state, 0.1,
                                         0.9, 0.999, 1e-8, t)
    assert abs(theta[0][0]) < 0.1


def test_adam_errors():
    with pytest.raises(ValueError):
        gftrain.adam_step([np.ones(2)], [np.ones(3)], None, 0.1, 0.9, 0.999,
                          1e-8, 1)
    with pytest.raises(ValueError):
        gftrain.adam_step([np.ones(2)], [np.ones(2)], None, 0.1, 0.9, 0.999,
                          1e-8, 0)


def test_small_step_decreases_loss():
    violations = 0
    for i in range(100):
        model = gfarch.build_model(tiny, i, dtype=np.float64)
        r = np.random.default_rng(1000 + i)
        x = r.random((1, 8, 8))
        y = r.integers(0, 3, size=1)
        params = model.parameters()
        with Tape() as tape:
            before = gftrain.batch_loss(model, x, y)
            tape.backward(before)
        gftrain.SGD(params, lr=1e-4).step()
        after = gftrain.batch_loss(model, x, y)
        if not after.item() < before.item():
            violations += 1
    assert violations <= 2


def test_train_is_deterministic():
    data = small_dataset()
    hp = gftrain.HyperParams(batch_size=5, epochs=3, seed=4)
    a, history_a = gftrain.train(gfarch.build_model(tiny, 4), data, hp)
    b, history_b = gftrain.train(gfarch.build_model(tiny, 4), data, hp)
    assert history_a.losses == history_b.losses
    assert len(history_a) == 3
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)
    assert a.mode == 'eval'
    c, history_c = gftrain.train(gfarch.build_model(tiny, 4), data,
                                 hp._replace(seed=5))
    assert history_c.losses != history_a.losses


def test_train_with_eval_set_and_sgd():
    data = small_dataset()
    hp = gftrain.HyperParams(batch_size=7, epochs=2, optimizer='sgd')
    model, history = gftrain.train(gfarch.build_model(tiny, 0), data, hp,
                                   eval_set=small_dataset(9, seed=1))
    assert all(0 <= a <= 1 for a in history.accuracies)
    frame = history.to_frame()
    assert list(frame.columns) == ['epoch', 'loss', 'eval_accuracy',
                                   'eval_macro_fdr']
    assert list(frame['epoch']) == [1, 2]


def test_train_rejects_bad_data():
    model = gfarch.build_model(tiny, 0)
    empty = gfdata.WindowedDataset(np.zeros((0, 8, 8), np.uint8), [], 3)
    with pytest.raises(ValueError):
        gftrain.train(model, empty, gftrain.HyperParams(epochs=1))
    with pytest.raises(ValueError):
        gftrain.train(model, small_dataset(n_classes=2),
                      gftrain.HyperParams(epochs=1))


def test_history_file(tmp_path):
    data = small_dataset()
    hp = gftrain.HyperParams(batch_size=8, epochs=2)
    _, history = gftrain.train(gfarch.build_model(tiny, 0), data, hp)
    path = str(tmp_path / 'history.csv')
    history.write(path)
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0] == 'epoch,loss,eval_accuracy,eval_macro_fdr'
    assert len(lines) == 3
    assert lines[1].endswith(',nan,nan')


def test_predict():
    model = gfarch.build_model(tiny, 6)
    data = small_dataset(10)
    predictions = gftrain.predict(model, data, batch_size=4)
    assert predictions.probs.shape == (10, 3)
    assert np.allclose(predictions.probs.sum(axis=1), 1, atol=1e-6)
    assert np.array_equal(predictions.classes,
                          np.argmax(predictions.probs, axis=1))
    again = gftrain.predict(model, data.pixels, batch_size=3, jobs=2)
    assert np.allclose(again.probs, predictions.probs)
    assert np.array_equal(again.classes, predictions.classes)
    single = gftrain.predict(model, data.pixels[0])
    assert single.probs.shape == (1, 3)
    with pytest.raises(ValueError):
        gftrain.predict(model, np.zeros((2, 8, 7)))
    model.train()
    with pytest.raises(ValueError):
        gftrain.predict(model, data)


def test_predict_ties_go_to_smallest_class():
    spec = gfarch.parse_arch('C(1)-F(2)', (8, 8), 4)
    model = gfarch.build_model(spec, 0)
    model.output_layer.weights.data[...] = 0
    predictions = gftrain.predict(model, np.zeros((3, 8, 8)))
    assert list(predictions.classes) == [0, 0, 0]


def test_separable_training():
    data = separable_dataset()
    assert len(data) == 192
    spec = gfarch.parse_arch(gfarch.REFERENCE_MODELS[1][0], (50, 20), 2)
    hp = gftrain.HyperParams(batch_size=32, epochs=5)
    model, history = gftrain.train(gfarch.build_model(spec, 0), data, hp)
    classes = gftrain.predict(model, data).classes
    assert np.mean(classes == data.labels) >= 0.99
    assert history.losses[-1] < history.losses[0]


def test_repeat_train():
    data = small_dataset()
    hp = gftrain.HyperParams(batch_size=8, epochs=1)
    results = gftrain.repeat_train(tiny, data, hp, seeds=[0, 1],
                                   eval_set=small_dataset(6, seed=2))
    assert len(results) == 2
    assert results[0].model.seed == 0
    assert results[1].model.seed == 1
    assert results[1].report.metadata == {'seed': 1}
    assert results[0].history.losses != results[1].history.losses


@pytest.mark.slow
def test_global_feature_advantage():
    cfg = gfdata.SynthConfig(n=50, w=20, classes=4, runs=25, samples=400,
                             gamma=1.0, sigma=1.0, shift=0.0, pairs=3)
    train = gfdata.gen_synthetic(cfg, 100, structure_seed=7)
    test = gfdata.gen_synthetic(cfg._replace(runs=5, samples=500), 200,
                                structure_seed=7)
    stats = gfdata.compute_norm_stats(train)
    train_set = gfdata.make_images(gfdata.normalize(train, stats), 20)
    test_set = gfdata.make_images(gfdata.normalize(test, stats), 20)
    assert (len(train_set), len(test_set)) == (2000, 500)
    hp = gftrain.HyperParams(epochs=10)
    scores = {}
    for name, text in zip(('cnn', 'gf'), gfarch.REFERENCE_MODELS[1]):
        spec = gfarch.parse_arch(text, (50, 20), 4)
        results = gftrain.repeat_train(spec, train_set, hp, range(5),
                                       test_set)
        scores[name] = np.mean([r.report.macro_fdr for r in results])
    assert scores['gf'] - scores['cnn'] >= 0.03


if __name__ == "__main__":
    test_separable_training()
