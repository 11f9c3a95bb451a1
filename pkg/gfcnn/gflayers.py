""" Layer types of the GF-CNN: convolution, max pooling, dense, dropout.

Every forward function works on a single sample and also accepts an
optional leading batch axis. Feature maps are stored channel-first:
(channels, rows, cols), rows running over process variables and cols
over time.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from gfcnn import gftensor
from gfcnn.gftensor import Tensor

KERNEL = 3


def he_uniform(rng, shape, fan_in, dtype):
    """ Draw He-uniform weights, U(-sqrt(6 / fan_in), sqrt(6 / fan_in)). """
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ConvLayer(object):

    """ A valid 3 x 3 convolution with stride 1, bias and ReLU.

    Attributes:
        kernels (Tensor): out_channels x in_channels x 3 x 3
        bias (Tensor): out_channels
        index (int): position of the layer in its architecture, for
            error messages
    """

    def __init__(self, in_channels, out_channels, index=None,
                 dtype=np.float64):
        if in_channels < 1 or out_channels < 1:
            raise ValueError('channel counts must be >= 1.')
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.index = index
        shape = (out_channels, in_channels, KERNEL, KERNEL)
        self.kernels = Tensor(np.zeros(shape, dtype=dtype),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype),
                           requires_grad=True)

    def initialize(self, rng):
        fan_in = self.in_channels * KERNEL * KERNEL
        self.kernels.data[...] = he_uniform(rng, self.kernels.shape, fan_in,
                                            self.kernels.dtype)
        self.bias.data[...] = 0

    def parameters(self):
        return [self.kernels, self.bias]

    def __call__(self, x):
        return conv_forward(self, x)


class PoolLayer(object):

    """ Non-overlapping max pooling.

    Attributes:
        rows (int): window extent along the variable axis
        cols (int): window extent along the time axis
    """

    def __init__(self, rows, cols, index=None):
        if rows < 1 or cols < 1:
            raise ValueError('pooling window extents must be >= 1.')
        self.rows = rows
        self.cols = cols
        self.index = index

    def parameters(self):
        return []

    def __call__(self, x):
        return pool_forward(self, x)


class DenseLayer(object):

    """ A fully-connected layer, out = f(x W + b).

    Attributes:
        weights (Tensor): n_in x n_out
        bias (Tensor): n_out
        activation (str): 'relu' or 'none'
    """

    def __init__(self, n_in, n_out, activation='relu', dtype=np.float64):
        if n_in < 1 or n_out < 1:
            raise ValueError('dense layer extents must be >= 1.')
        if activation not in ('relu', 'none'):
            raise ValueError("activation must be 'relu' or 'none'.")
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        self.weights = Tensor(np.zeros((n_in, n_out), dtype=dtype),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def initialize(self, rng):
        self.weights.data[...] = he_uniform(rng, self.weights.shape,
                                            self.n_in, self.weights.dtype)
        self.bias.data[...] = 0

    def parameters(self):
        return [self.weights, self.bias]

    def __call__(self, x):
        return dense_forward(self, x)


class DropoutSpec(object):

    """ Inverted dropout.

    Attributes:
        rate (float): probability of zeroing an element, in [0, 1)
        mode (str): 'train' or 'eval'
    """

    def __init__(self, rate=0.5, mode='train'):
        self._set_rate(rate)
        if mode not in ('train', 'eval'):
            raise ValueError("mode must be 'train' or 'eval'.")
        self.mode = mode

    def _set_rate(self, rate):
        if not 0 <= rate < 1:
            raise ValueError('dropout rate must be in [0, 1), got %r' % rate)
        self.rate = float(rate)


def conv2d(x, kernels, bias):
    """ Valid cross-correlation of x with kernels plus bias (no activation).

    Parameters:
        x (Tensor): (C_in, h, d) or (B, C_in, h, d)
        kernels (Tensor): (C_out, C_in, k, k)
        bias (Tensor): (C_out, )

    Returns:
        out (Tensor): (C_out, h-k+1, d-k+1), batched if x is
    """
    k = kernels.shape[-1]
    batched = x.ndim == 4
    xd = x.data if batched else x.data[np.newaxis]
    w = kernels.data
    patches = sliding_window_view(xd, (k, k), axis=(2, 3))
    out = np.einsum('bcijkl,ockl->boij', patches, w, optimize=True)
    out += bias.data[:, np.newaxis, np.newaxis]
    h_out, d_out = out.shape[2], out.shape[3]

    def _backward(g):
        if not batched:
            g = g[np.newaxis]
        gw = np.einsum('bcijkl,boij->ockl', patches, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gx = np.zeros_like(xd)
        for r in range(k):
            for c in range(k):
                gx[:, :, r:r + h_out, c:c + d_out] += np.einsum(
                    'boij,oc->bcij', g, w[:, :, r, c], optimize=True)
        if not batched:
            gx = gx[0]
        return gx, gw, gb
    if not batched:
        out = out[0]
    return gftensor.record(out, (x, kernels, bias), _backward)


def conv_forward(layer, x):
    """ x_j = ReLU(sum_i k_ij * x_i + b_j) for a ConvLayer.

    Parameters:
        layer (ConvLayer)
        x (Tensor): (N_l, h, d) or (B, N_l, h, d)

    Returns:
        out (Tensor): (N_{l+1}, h-2, d-2), batched if x is
    """
    if x.ndim not in (3, 4):
        raise ValueError('conv layer %s: expected (C, h, d) input, got %s'
                         % (layer.index, x.shape))
    if x.shape[-3] != layer.in_channels:
        raise ValueError('conv layer %s: expected %d input channels, got %d'
                         % (layer.index, layer.in_channels, x.shape[-3]))
    if x.shape[-2] < KERNEL or x.shape[-1] < KERNEL:
        raise ValueError('conv layer %s: spatial extent %s is smaller than '
                         'the 3 x 3 kernel' % (layer.index, x.shape[-2:]))
    return gftensor.relu(conv2d(x, layer.kernels, layer.bias))


def max_pool2d(x, rows, cols):
    """ Max over non-overlapping rows x cols windows of the last two axes.

    Trailing rows/cols that do not fill a window are dropped. The
    gradient goes to the first maximal element of each window in
    row-major order.
    """
    h, d = x.shape[-2], x.shape[-1]
    if rows > h or cols > d:
        raise ValueError('pooling window (%d, %d) is larger than the input '
                         '(%d, %d)' % (rows, cols, h, d))
    h_out, d_out = h // rows, d // cols
    lead = x.shape[:-2]
    cropped = x.data[..., :h_out * rows, :d_out * cols]
    windows = cropped.reshape(lead + (h_out, rows, d_out, cols))
    windows = np.swapaxes(windows, -3, -2)
    windows = windows.reshape(lead + (h_out, d_out, rows * cols))
    arg = np.argmax(windows, axis=-1)[..., np.newaxis]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg, g[..., np.newaxis], axis=-1)
        gw = gw.reshape(lead + (h_out, d_out, rows, cols))
        gw = np.swapaxes(gw, -3, -2)
        gw = gw.reshape(lead + (h_out * rows, d_out * cols))
        gx = np.zeros_like(x.data)
        gx[..., :h_out * rows, :d_out * cols] = gw
        return (gx, )
    return gftensor.record(out, (x, ), _backward)


def pool_forward(layer, x):
    """ Max pooling for a PoolLayer.

    Parameters:
        layer (PoolLayer)
        x (Tensor): (C, h, d) or (B, C, h, d)

    Returns:
        out (Tensor): (C, h // rows, d // cols), batched if x is
    """
    if x.ndim < 2:
        raise ValueError('pool layer %s: expected at least 2 axes, got %s'
                         % (layer.index, x.shape))
    return max_pool2d(x, layer.rows, layer.cols)


def dense_forward(layer, x):
    """ out = f(x W + b) for a DenseLayer.

    Parameters:
        layer (DenseLayer)
        x (Tensor): (n_in, ) or (B, n_in)

    Returns:
        out (Tensor): (n_out, ) or (B, n_out)
    """
    if x.ndim not in (1, 2) or x.shape[-1] != layer.n_in:
        raise ValueError('dense layer expects %d inputs, got shape %s'
                         % (layer.n_in, x.shape))
    out = gftensor.add_bias(gftensor.matmul(x, layer.weights), layer.bias)
    if layer.activation == 'relu':
        out = gftensor.relu(out)
    return out


def dropout_forward(spec, x, rng=None):
    """ Inverted dropout.

    In train mode each element is zeroed with probability spec.rate and
    survivors are scaled by 1 / (1 - rate); the mask is drawn from rng.
    In eval mode, or with rate 0, x is returned unchanged.

    Parameters:
        spec (DropoutSpec)
        x (Tensor)
        rng (np.random.Generator): required in train mode

    Returns:
        out (Tensor)
    """
    if not 0 <= spec.rate < 1:
        raise ValueError('dropout rate must be in [0, 1), got %r'
                         % spec.rate)
    if spec.mode == 'eval' or spec.rate == 0:
        return x
    if rng is None:
        raise ValueError('dropout in train mode needs a seeded generator.')
    keep = rng.random(x.shape) >= spec.rate
    mask = Tensor(keep.astype(x.dtype) / (1.0 - spec.rate))
    return gftensor.mul(x, mask)


def softmax_cross_entropy(logits, label):
    """ Cross-entropy of softmax(logits) against a class index.

    Parameters:
        logits (Tensor): (C, ), or (B, C) for a batch
        label (int or array of int): class index, one per sample

    Returns:
        loss (Tensor): rank-0; the mean over the batch when batched
        probs (Tensor): softmax probabilities, same shape as logits
    """
    if logits.ndim not in (1, 2):
        raise ValueError('logits must be (C, ) or (B, C), got %s'
                         % (logits.shape, ))
    n_classes = logits.shape[-1]
    batched = logits.ndim == 2
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError('labels must be integer class indices.')
    z = logits.data if batched else logits.data[np.newaxis]
    if labels.shape != (z.shape[0], ):
        raise ValueError('expected %d labels, got %d'
                         % (z.shape[0], labels.size))
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError('label out of range [0, %d): %s'
                         % (n_classes, labels[(labels < 0) |
                                              (labels >= n_classes)]))
    log_p = log_softmax(z, axis=1)
    rows = np.arange(z.shape[0])
    loss = -np.mean(log_p[rows, labels])
    probs = np.exp(log_p)

    def _backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        d *= g / z.shape[0]
        if not batched:
            d = d[0]
        return (d, )
    loss_t = gftensor.record(np.asarray(loss, dtype=logits.dtype),
                             (logits, ), _backward)
    return loss_t, Tensor(probs if batched else probs[0])
