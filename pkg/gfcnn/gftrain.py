""" Minibatch training, optimizers and batched prediction.

The training objective is the mean cross-entropy over the training
images. Shuffling, dropout masks and initialization all derive from one
run seed, so training is deterministic given the seed.
"""

from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
import logging
import time

import numpy as np
import pandas as pd
from scipy.special import softmax

from gfcnn import gfarch
from gfcnn import gfeval
from gfcnn.gftensor import Tape


logger = logging.getLogger(__name__)

HyperParams = namedtuple('HyperParams',
                         ['batch_size', 'epochs', 'learning_rate',
                          'dropout_rate', 'beta1', 'beta2', 'epsilon',
                          'optimizer', 'seed'])
HyperParams.__new__.__defaults__ = (128, 50, 0.001, 0.5, 0.9, 0.999, 1e-8,
                                    'adam', 0)

Predictions = namedtuple('Predictions', ['probs', 'classes'])
RunResult = namedtuple('RunResult', ['model', 'history', 'report'])


def check_hyperparams(hp):
    if int(hp.batch_size) != hp.batch_size or hp.batch_size < 1:
        raise ValueError('batch_size must be an integer >= 1.')
    if int(hp.epochs) != hp.epochs or hp.epochs < 1:
        raise ValueError('epochs must be an integer >= 1.')
    if not hp.learning_rate > 0:
        raise ValueError('learning_rate must be positive.')
    if not 0 <= hp.dropout_rate < 1:
        raise ValueError('dropout_rate must be in [0, 1).')
    if hp.optimizer not in ('adam', 'sgd'):
        raise ValueError("optimizer must be 'adam' or 'sgd', got %r"
                         % (hp.optimizer, ))
    if int(hp.seed) != hp.seed or hp.seed < 0:
        raise ValueError('seed must be a non-negative integer.')


class TrainHistory(object):

    """ One record per completed epoch.

    Attributes:
        losses (list): mean training loss
        accuracies (list): evaluation accuracy, or None
        fdrs (list): evaluation macro FDR, or None
        times (list): wall time in seconds
    """

    def __init__(self):
        self.losses = []
        self.accuracies = []
        self.fdrs = []
        self.times = []

    def __len__(self):
        return len(self.losses)

    def append(self, loss, accuracy=None, fdr=None, seconds=0.0):
        self.losses.append(float(loss))
        self.accuracies.append(accuracy)
        self.fdrs.append(fdr)
        self.times.append(seconds)

    def to_frame(self):
        """ Epoch records without wall times, so the file is reproducible.
        """
        return pd.DataFrame({'epoch': np.arange(1, len(self) + 1),
                             'loss': self.losses,
                             'eval_accuracy': [np.nan if a is None else a
                                               for a in self.accuracies],
                             'eval_macro_fdr': [np.nan if f is None else f
                                                for f in self.fdrs]})

    def write(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g',
                               na_rep='nan')


def adam_step(params, grads, state, lr, beta1, beta2, eps, t):
    """ One Adam update with bias correction.

    Parameters:
        params (list): np.ndarray parameters
        grads (list): gradients, same shapes
        state (tuple): (m, v) lists of moment estimates, or None
        lr, beta1, beta2, eps (float)
        t (int): step number, starting at 1

    Returns:
        params (list): updated parameters
        state (tuple): updated (m, v)
    """
    if t < 1:
        raise ValueError('Adam step numbers start at 1.')
    if len(params) != len(grads):
        raise ValueError('got %d gradients for %d parameters'
                         % (len(grads), len(params)))
    if state is None:
        state = ([np.zeros_like(p) for p in params],
                 [np.zeros_like(p) for p in params])
    m, v = state
    new_params, new_m, new_v = [], [], []
    for p, g, m_i, v_i in zip(params, grads, m, v):
        if np.shape(g) != np.shape(p) or np.shape(m_i) != np.shape(p) or \
                np.shape(v_i) != np.shape(p):
            raise ValueError('shape mismatch: parameter %s, gradient %s'
                             % (np.shape(p), np.shape(g)))
        m_i = beta1 * m_i + (1 - beta1) * g
        v_i = beta2 * v_i + (1 - beta2) * (g * g)
        m_hat = m_i / (1 - beta1 ** t)
        v_hat = v_i / (1 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m_i)
        new_v.append(v_i)
    return new_params, (new_m, new_v)


class Adam(object):

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = None
        self.t = 0

    def step(self):
        """ Update every parameter from its grad. """
        self.t += 1
        data = [p.data for p in self.params]
        grads = [p.grad for p in self.params]
        updated, self.state = adam_step(data, grads, self.state, self.lr,
                                        self.beta1, self.beta2, self.eps,
                                        self.t)
        for p, new in zip(self.params, updated):
            p.data[...] = new


class SGD(object):

    def __init__(self, params, lr=0.001):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            p.data[...] = p.data - self.lr * p.grad


def make_optimizer(params, hp):
    if hp.optimizer == 'sgd':
        return SGD(params, hp.learning_rate)
    return Adam(params, hp.learning_rate, hp.beta1, hp.beta2, hp.epsilon)


def batch_loss(model, images, labels, rng=None):
    """ Mean cross-entropy of a batch.

    Parameters:
        model (GFCNN)
        images (np.ndarray): B x n x w network inputs
        labels (np.ndarray): B class indices
        rng (np.random.Generator): dropout masks, needed in train mode

    Returns:
        loss (Tensor): rank-0
    """
    images = np.asarray(images)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError('a batch needs at least one n x w image.')
    return model.loss(images.astype(model.dtype, copy=False),
                      np.asarray(labels), rng)


def _check_dataset(model, dataset):
    if dataset.n_classes != model.spec.n_classes:
        raise ValueError('data set has %d classes, model has %d outputs'
                         % (dataset.n_classes, model.spec.n_classes))
    if (dataset.n, dataset.w) != model.spec.input_shape:
        raise ValueError('images are %d x %d, model expects %d x %d'
                         % ((dataset.n, dataset.w) + model.spec.input_shape))


def train(model, train_set, hp=HyperParams(), eval_set=None):
    """ Train a model with minibatch Adam (or SGD).

    Each epoch reshuffles the training images with a generator seeded by
    (seed, epoch); the final short batch is kept and the epoch loss is
    weighted by batch size.

    Parameters:
        model (GFCNN)
        train_set (WindowedDataset)
        hp (HyperParams)
        eval_set (WindowedDataset): evaluated after every epoch

    Returns:
        model (GFCNN): in eval mode
        history (TrainHistory)
    """
    check_hyperparams(hp)
    if len(train_set) == 0:
        raise ValueError('training set is empty.')
    _check_dataset(model, train_set)
    if eval_set is not None:
        _check_dataset(model, eval_set)
    X = train_set.inputs(model.dtype)
    y = train_set.labels
    N = len(y)
    params = model.parameters()
    optimizer = make_optimizer(params, hp)
    model.set_dropout_rate(hp.dropout_rate)
    history = TrainHistory()
    for epoch in range(hp.epochs):
        start = time.time()
        model.train()
        order = np.random.default_rng([hp.seed, epoch]).permutation(N)
        drop_rng = np.random.default_rng([hp.seed, epoch, 1])
        total = 0.0
        for s in range(0, N, hp.batch_size):
            index = order[s:s + hp.batch_size]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss = batch_loss(model, X[index], y[index], drop_rng)
                tape.backward(loss)
            optimizer.step()
            total += loss.item() * len(index)
        epoch_loss = total / N
        model.eval()
        accuracy = fdr = None
        if eval_set is not None:
            report = evaluate(model, eval_set, hp.batch_size)
            accuracy, fdr = float(report.accuracy), report.macro_fdr
        seconds = time.time() - start
        history.append(epoch_loss, accuracy, fdr, seconds)
        if eval_set is None:
            logger.info('epoch %d/%d: loss %.6f (%.1f s)', epoch + 1,
                        hp.epochs, epoch_loss, seconds)
        else:
            logger.info('epoch %d/%d: loss %.6f, accuracy %.4f, macro FDR '
                        '%.4f (%.1f s)', epoch + 1, hp.epochs, epoch_loss,
                        accuracy, fdr, seconds)
    return model.eval(), history


def _image_inputs(model, images):
    if hasattr(images, 'pixels'):
        images = images.pixels
    images = np.asarray(images)
    n, w = model.spec.input_shape
    if images.ndim == 2:
        images = images[np.newaxis]
    if images.ndim != 3 or images.shape[1:] != (n, w):
        raise ValueError('expected %d x %d images, got shape %s'
                         % (n, w, images.shape))
    return images.astype(model.dtype) / 255


def predict(model, images, batch_size=128, jobs=1):
    """ Class probabilities and predicted classes.

    Parameters:
        model (GFCNN): in eval mode
        images (WindowedDataset or np.ndarray): gray images with pixels in
            [0, 255], count x n x w
        batch_size (int)
        jobs (int): threads evaluating batches

    Returns:
        predictions (Predictions): probs (count x C) and classes; ties go
            to the smallest class index
    """
    if model.mode != 'eval':
        raise ValueError('predict needs a model in eval mode.')
    X = _image_inputs(model, images)

    def _run(start):
        logits = model.forward(X[start:start + batch_size]).data
        return softmax(logits.astype(np.float64), axis=1)

    starts = list(range(0, len(X), batch_size))
    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run, starts))
    else:
        chunks = [_run(s) for s in starts]
    if chunks:
        probs = np.vstack(chunks)
    else:
        probs = np.zeros((0, model.spec.n_classes))
    return Predictions(probs, np.argmax(probs, axis=1))


def evaluate(model, dataset, batch_size=128, jobs=1, metadata=None):
    """ Predict a WindowedDataset and build its EvalReport. """
    _check_dataset(model, dataset)
    classes = predict(model, dataset, batch_size, jobs).classes
    return gfeval.make_report(classes, dataset.labels, dataset.n_classes,
                              metadata)


def repeat_train(spec, train_set, hp=HyperParams(), seeds=(0, ),
                 eval_set=None, dtype=np.float32):
    """ Train one fresh model per seed.

    Returns:
        results (list): RunResult(model, history, report) per seed; report
            is None without an eval_set
    """
    results = []
    for seed in seeds:
        run_hp = hp._replace(seed=int(seed))
        model = gfarch.build_model(spec, int(seed), dtype=dtype,
                                   dropout_rate=run_hp.dropout_rate)
        model, history = train(model, train_set, run_hp, eval_set)
        report = None
        if eval_set is not None:
            report = evaluate(model, eval_set, hp.batch_size,
                              metadata={'seed': seed})
        results.append(RunResult(model, history, report))
    return results
