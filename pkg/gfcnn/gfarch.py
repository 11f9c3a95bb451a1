''' Architecture strings, shape tracing and the GF-CNN model.

Architectures are written as dash-separated tokens:

    C(n)      3 x 3 valid convolution with n kernels, stride 1, ReLU
    P(n)      n x n max pooling
    P(n,m)    max pooling by n along time and m along the variables
    G(n)      global feature: one dense ReLU layer over vec(x) with n outputs
    F(n)[*]   dense ReLU layer with n neurons, * = dropout after it

for example 'C(16)-P(2)-G(10)-F(100)*'. The classification layer with
one output per class is appended automatically.
'''

from collections import namedtuple
import hashlib
import os
import re

import numpy as np

from gfcnn import gflayers
from gfcnn import gftensor
from gfcnn.gftensor import Tensor


Conv = namedtuple('Conv', ['n'])
Pool = namedtuple('Pool', ['rows', 'cols'])
GlobalFeature = namedtuple('GlobalFeature', ['dim'])
FullyConnected = namedtuple('FullyConnected', ['neurons', 'dropout'])

TraceStep = namedtuple('TraceStep', ['layer', 'shape'])
ParamCount = namedtuple('ParamCount', ['total', 'n_conv', 'n_mlp', 'n_fc'])

# (CNN, GF-CNN) pairs of the case study, input (50, 20), 20 classes.
REFERENCE_MODELS = {
    1: ('C(16)-P(2)-F(100)*',
        'C(16)-P(2)-G(10)-F(100)*'),
    2: ('C(16)-P(2)-C(32)-P(2,1)-F(300)*',
        'C(16)-P(2)-C(32)-P(2,1)-G(10)-F(300)*'),
    3: ('C(32)-P(2)-C(64)-P(2,1)-F(300)*',
        'C(32)-P(2)-C(64)-P(2,1)-G(10)-F(300)*'),
    4: ('C(64)-P(2)-C(64)-C(128)-P(2,1)-F(300)*',
        'C(64)-P(2)-C(64)-C(128)-P(2,1)-G(10)-F(300)*'),
    5: ('C(32)-C(64)-P(2)-C(128)-P(2,1)-F(300)*',
        'C(32)-C(64)-P(2)-C(128)-P(2,1)-G(10)-F(300)*'),
    6: ('C(64)-C(64)-P(2)-C(128)-C(256)-P(2,1)-F(300)*',
        'C(64)-C(64)-P(2)-C(128)-C(256)-P(2,1)-G(10)-F(300)*'),
}

DEFAULT_INPUT = (50, 20)
DEFAULT_CLASSES = 20
MODEL_FORMAT = 'gfcnn-model 1'

_TOKEN = re.compile(r'^([A-Za-z]+)\(([^()]*)\)(\*?)$')


class ArchError(ValueError):

    """ An architecture string that cannot be parsed or traced.

    Attributes:
        position (int): 1-based token index, for parse errors
        layer (int): 1-based layer index, for trace errors
    """

    def __init__(self, message, position=None, layer=None):
        ValueError.__init__(self, message)
        self.position = position
        self.layer = layer


class ArchSpec(object):

    """ A parsed architecture.

    Attributes:
        layers (list): Conv, Pool, GlobalFeature and FullyConnected entries
        input_shape (tuple): (n variables, w window)
        n_classes (int)
    """

    def __init__(self, layers, input_shape=DEFAULT_INPUT,
                 n_classes=DEFAULT_CLASSES):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError('input shape must be two extents >= 1, got %s'
                             % (input_shape, ))
        if self.n_classes < 1:
            raise ValueError('n_classes must be >= 1.')

    def __repr__(self):
        return 'ArchSpec(%r, input_shape=%s, n_classes=%d)' % \
            (self.text, self.input_shape, self.n_classes)

    def __eq__(self, other):
        return isinstance(other, ArchSpec) and \
            (self.layers, self.input_shape, self.n_classes) == \
            (other.layers, other.input_shape, other.n_classes)

    @property
    def text(self):
        return '-'.join(format_layer(layer) for layer in self.layers)

    @property
    def global_feature(self):
        for layer in self.layers:
            if isinstance(layer, GlobalFeature):
                return layer
        return None

    def without_global(self):
        """ The CNN counterpart: the same spec with G(..) removed. """
        return ArchSpec([l for l in self.layers
                         if not isinstance(l, GlobalFeature)],
                        self.input_shape, self.n_classes)


def format_layer(layer):
    if isinstance(layer, Conv):
        return 'C(%d)' % layer.n
    if isinstance(layer, Pool):
        if layer.rows == layer.cols:
            return 'P(%d)' % layer.rows
        return 'P(%d,%d)' % (layer.cols, layer.rows)
    if isinstance(layer, GlobalFeature):
        return 'G(%d)' % layer.dim
    return 'F(%d)%s' % (layer.neurons, '*' if layer.dropout else '')


def parse_arch(text, input_shape=DEFAULT_INPUT, n_classes=DEFAULT_CLASSES):
    """ Parse an architecture string.

    Parameters:
        text (string): e.g. 'C(16)-P(2)-G(10)-F(100)*'
        input_shape (tuple): (n variables, w window)
        n_classes (int)

    Returns:
        spec (ArchSpec)
    """
    if not isinstance(text, str):
        raise TypeError('architecture must be a string.')
    tokens = [t.strip() for t in text.strip().split('-')]
    layers = []
    seen_fc = False
    seen_g = False
    for position, token in enumerate(tokens, 1):
        match = _TOKEN.match(token.replace(' ', ''))
        if match is None:
            raise ArchError('token %d: cannot parse %r' % (position, token),
                            position=position)
        kind, args, star = match.groups()
        if kind not in ('C', 'P', 'G', 'F'):
            raise ArchError('token %d: unknown layer %r' % (position, kind),
                            position=position)
        try:
            args = [int(a) for a in args.split(',')]
        except ValueError:
            raise ArchError('token %d: arguments of %r must be integers'
                            % (position, token), position=position)
        if min(args) < 1:
            raise ArchError('token %d: arguments of %r must be >= 1'
                            % (position, token), position=position)
        if star and kind != 'F':
            raise ArchError('token %d: dropout marker only follows F(n)'
                            % position, position=position)
        if kind == 'P':
            if len(args) > 2:
                raise ArchError('token %d: P takes one or two arguments'
                                % position, position=position)
        elif len(args) != 1:
            raise ArchError('token %d: %s takes one argument'
                            % (position, kind), position=position)
        if kind == 'C':
            layer = Conv(args[0])
        elif kind == 'P':
            time, variables = args if len(args) == 2 else (args[0], args[0])
            layer = Pool(rows=variables, cols=time)
        elif kind == 'G':
            if seen_g:
                raise ArchError('token %d: only one G(n) is allowed'
                                % position, position=position)
            if seen_fc:
                raise ArchError('token %d: G(n) must precede the first F(n)'
                                % position, position=position)
            seen_g = True
            layer = GlobalFeature(args[0])
        else:
            seen_fc = True
            layer = FullyConnected(args[0], bool(star))
        if kind in ('C', 'P') and seen_fc:
            raise ArchError('token %d: %s after F(n)' % (position, kind),
                            position=position)
        layers.append(layer)
    if not seen_fc:
        raise ArchError('token %d: architecture needs at least one F(n)'
                        % len(tokens), position=len(tokens))
    return ArchSpec(layers, input_shape, n_classes)


def trace_shapes(spec):
    """ Shapes after every layer.

    Feature-map shapes are (rows, cols, channels); vectors are (length, ).
    The steps are: 'input', each C/P layer, 'flatten' (n_x,cnn), then
    'global' (n_x,mlp) and 'concat' when G(n) is present, each F(n), and
    'output'.

    Parameters:
        spec (ArchSpec)

    Returns:
        steps (list): TraceStep(layer, shape) entries
    """
    rows, cols = spec.input_shape
    channels = 1
    steps = [TraceStep('input', (rows, cols, channels))]
    for i, layer in enumerate(spec.layers, 1):
        if isinstance(layer, Conv):
            if rows < gflayers.KERNEL or cols < gflayers.KERNEL:
                raise ArchError('layer %d (%s): input (%d, %d) is smaller '
                                'than the 3 x 3 kernel'
                                % (i, format_layer(layer), rows, cols),
                                layer=i)
            rows, cols = rows - gflayers.KERNEL + 1, cols - gflayers.KERNEL + 1
            channels = layer.n
            steps.append(TraceStep(layer, (rows, cols, channels)))
        elif isinstance(layer, Pool):
            if layer.rows > rows or layer.cols > cols:
                raise ArchError('layer %d (%s): window (%d, %d) exceeds '
                                'input (%d, %d)'
                                % (i, format_layer(layer), layer.rows,
                                   layer.cols, rows, cols), layer=i)
            rows, cols = rows // layer.rows, cols // layer.cols
            steps.append(TraceStep(layer, (rows, cols, channels)))
    n_x = rows * cols * channels
    steps.append(TraceStep('flatten', (n_x, )))
    g = spec.global_feature
    if g is not None:
        steps.append(TraceStep(g, (g.dim, )))
        n_x += g.dim
        steps.append(TraceStep('concat', (n_x, )))
    for layer in spec.layers:
        if isinstance(layer, FullyConnected):
            steps.append(TraceStep(layer, (layer.neurons, )))
    steps.append(TraceStep('output', (spec.n_classes, )))
    return steps


def feature_sizes(spec):
    """ Return (n_x_cnn, n_x_mlp) for a spec. """
    steps = trace_shapes(spec)
    n_x_cnn = [s.shape[0] for s in steps if s.layer == 'flatten'][0]
    g = spec.global_feature
    return n_x_cnn, (g.dim if g is not None else 0)


def spec_params(spec):
    """ Count parameters from a spec alone, without building the model.

    Returns:
        count (ParamCount)
    """
    n_conv = 0
    channels = 1
    for layer in spec.layers:
        if isinstance(layer, Conv):
            n_conv += layer.n * (channels * gflayers.KERNEL ** 2 + 1)
            channels = layer.n
    n_x_cnn, n_x_mlp = feature_sizes(spec)
    n_vec = spec.input_shape[0] * spec.input_shape[1]
    n_mlp = (n_vec + 1) * n_x_mlp if n_x_mlp else 0
    n_fc = 0
    width = n_x_cnn + n_x_mlp
    for layer in spec.layers:
        if isinstance(layer, FullyConnected):
            n_fc += (width + 1) * layer.neurons
            width = layer.neurons
    n_fc += (width + 1) * spec.n_classes
    return ParamCount(n_conv + n_mlp + n_fc, n_conv, n_mlp, n_fc)


def complexity(spec):
    """ Both sides of the global-feature overhead inequality.

    Returns:
        overhead (int): n_mlp + n_fc2, parameters added by G(n)
        base (int): n_conv + n_fc1
    """
    count = spec_params(spec)
    n_fc1, n_fc2 = _fc_split(spec)
    return count.n_mlp + n_fc2, count.n_conv + n_fc1


def _fc_split(spec):
    _, n_x_mlp = feature_sizes(spec)
    first = [l for l in spec.layers if isinstance(l, FullyConnected)][0]
    n_fc2 = n_x_mlp * first.neurons
    return spec_params(spec).n_fc - n_fc2, n_fc2


class GFCNN(object):

    """ A CNN with an optional global-feature branch.

    The CNN branch maps the image to the flattened last feature map
    x_fc,cnn. With G(n), one dense ReLU layer maps vec(x) to x_fc,mlp and
    [x_fc,cnn ; x_fc,mlp] feeds the first F(n). The output layer has no
    activation; softmax is applied by the loss.

    Attributes:
        spec (ArchSpec)
        features (list): ConvLayer and PoolLayer in order
        global_layer (DenseLayer): None for a plain CNN
        fc_layers (list): (DenseLayer, DropoutSpec or None) pairs
        output_layer (DenseLayer)
        mode (str): 'train' or 'eval'
        seed: seed the weights were drawn from
        dtype (np.dtype)
    """

    def __init__(self, spec, dtype=np.float32, dropout_rate=0.5):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.seed = None
        self.mode = 'eval'
        trace = trace_shapes(spec)
        self.features = []
        channels = 1
        for i, layer in enumerate(spec.layers, 1):
            if isinstance(layer, Conv):
                self.features.append(gflayers.ConvLayer(channels, layer.n,
                                                        index=i,
                                                        dtype=self.dtype))
                channels = layer.n
            elif isinstance(layer, Pool):
                self.features.append(gflayers.PoolLayer(layer.rows,
                                                        layer.cols, index=i))
        n_x_cnn, n_x_mlp = feature_sizes(spec)
        self.global_layer = None
        if n_x_mlp:
            n_vec = spec.input_shape[0] * spec.input_shape[1]
            self.global_layer = gflayers.DenseLayer(n_vec, n_x_mlp,
                                                    dtype=self.dtype)
        self.fc_layers = []
        width = n_x_cnn + n_x_mlp
        for layer in spec.layers:
            if isinstance(layer, FullyConnected):
                dense = gflayers.DenseLayer(width, layer.neurons,
                                            dtype=self.dtype)
                drop = None
                if layer.dropout:
                    drop = gflayers.DropoutSpec(dropout_rate, mode='eval')
                self.fc_layers.append((dense, drop))
                width = layer.neurons
        self.output_layer = gflayers.DenseLayer(width, spec.n_classes,
                                                activation='none',
                                                dtype=self.dtype)
        self._trace = trace

    def _set_params(self, **kwargs):
        ''' Sets attributes of the model.

        Does not rebuild layers, so use with caution.
        '''
        for key, value in kwargs.items():
            setattr(self, key, value)

    def initialize(self, rng):
        """ He-uniform weights and zero biases, drawn in layer order. """
        for layer in self.features:
            if isinstance(layer, gflayers.ConvLayer):
                layer.initialize(rng)
        if self.global_layer is not None:
            self.global_layer.initialize(rng)
        for dense, _ in self.fc_layers:
            dense.initialize(rng)
        self.output_layer.initialize(rng)

    @property
    def dropout_rate(self):
        for _, drop in self.fc_layers:
            if drop is not None:
                return drop.rate
        return None

    def set_dropout_rate(self, rate):
        for _, drop in self.fc_layers:
            if drop is not None:
                drop._set_rate(rate)

    def train(self):
        self._set_mode('train')
        return self

    def eval(self):
        self._set_mode('eval')
        return self

    def _set_mode(self, mode):
        self.mode = mode
        for _, drop in self.fc_layers:
            if drop is not None:
                drop.mode = mode

    def named_parameters(self):
        """ (name, Tensor) pairs, in a fixed order. """
        named = []
        for layer in self.features:
            if isinstance(layer, gflayers.ConvLayer):
                named.append(('conv%d.kernels' % layer.index, layer.kernels))
                named.append(('conv%d.bias' % layer.index, layer.bias))
        if self.global_layer is not None:
            named.append(('global.weights', self.global_layer.weights))
            named.append(('global.bias', self.global_layer.bias))
        for i, (dense, _) in enumerate(self.fc_layers, 1):
            named.append(('fc%d.weights' % i, dense.weights))
            named.append(('fc%d.bias' % i, dense.bias))
        named.append(('output.weights', self.output_layer.weights))
        named.append(('output.bias', self.output_layer.bias))
        return named

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    @property
    def theta_conv(self):
        return [t for layer in self.features for t in layer.parameters()]

    @property
    def theta_mlp(self):
        if self.global_layer is None:
            return []
        return self.global_layer.parameters()

    @property
    def theta_fc(self):
        params = [t for dense, _ in self.fc_layers for t in dense.parameters()]
        return params + self.output_layer.parameters()

    def forward(self, x, rng=None):
        """ Logits for one image or a batch of images.

        Parameters:
            x (np.ndarray or Tensor): (n, w) or (B, n, w), pixels scaled
                to [0, 1]
            rng (np.random.Generator): dropout masks, needed in train mode

        Returns:
            logits (Tensor): (C, ) or (B, C)
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        n, w = self.spec.input_shape
        if x.shape[-2:] != (n, w) or x.ndim not in (2, 3):
            raise ValueError('expected input (%d, %d) or (B, %d, %d), got %s'
                             % (n, w, n, w, x.shape))
        batched = x.ndim == 3
        lead = x.shape[:1] if batched else ()
        h = gftensor.reshape(x, lead + (1, n, w))
        for layer in self.features:
            h = layer(h)
        start = 1 if batched else 0
        h = gftensor.flatten(h, start=start)
        if self.global_layer is not None:
            g = self.global_layer(gftensor.flatten(x, start=start))
            h = gftensor.concat(h, g)
        for dense, drop in self.fc_layers:
            h = dense(h)
            if drop is not None:
                h = gflayers.dropout_forward(drop, h, rng)
        return self.output_layer(h)

    __call__ = forward

    def loss(self, x, label, rng=None):
        """ Cross-entropy of the model's prediction for x against label. """
        loss, _ = gflayers.softmax_cross_entropy(self.forward(x, rng), label)
        return loss

    def dump(self, f, extra=None):
        ''' Save the model.

        Writes a plain-text manifest to f and the parameters to f + '.bin'
        as little-endian 32-bit floats.

        Parameters:
            f (string): path of the manifest
            extra (list): additional (key, value) manifest entries, e.g.
                training settings
        '''
        blob_path = f + '.bin'
        with open(blob_path, 'wb') as b_file:
            index = gftensor.dump_tensors(self.named_parameters(), b_file)
        with open(blob_path, 'rb') as b_file:
            digest = hashlib.sha256(b_file.read()).hexdigest()
        lines = [MODEL_FORMAT,
                 'arch %s' % self.spec.text,
                 'input_shape %d %d' % self.spec.input_shape,
                 'n_classes %d' % self.spec.n_classes,
                 'seed %s' % self.seed,
                 'precision %s' % self.dtype.name,
                 'init he-uniform',
                 'dropout_rate %s' % self.dropout_rate,
                 'blob %s' % os.path.basename(blob_path),
                 'sha256 %s' % digest]
        for key, value in extra or []:
            if key in ('tensor', ) or ' ' in key:
                raise ValueError('invalid manifest key %r' % key)
            lines.append('%s %s' % (key, value))
        lines += ['tensor ' + gftensor.index_line(*entry) for entry in index]
        with open(f, 'w') as m_file:
            m_file.write('\n'.join(lines) + '\n')

    @classmethod
    def load(cls, model):
        ''' Load a saved model; the result is in eval mode.

        Parameters:
            model (string): path to the manifest
        '''
        with open(model) as m_file:
            lines = [l.strip() for l in m_file if l.strip()]
        if not lines or lines[0] != MODEL_FORMAT:
            raise ValueError('%s is not a gfcnn model manifest' % model)
        fields = {}
        index = []
        for line in lines[1:]:
            key, _, value = line.partition(' ')
            if key == 'tensor':
                index.append(gftensor.parse_index_line(value))
            else:
                fields[key] = value
        try:
            n, w = (int(v) for v in fields['input_shape'].split())
            spec = parse_arch(fields['arch'], (n, w),
                              int(fields['n_classes']))
            dtype = np.dtype(fields['precision'])
            blob_path = os.path.join(os.path.dirname(model), fields['blob'])
            digest = fields['sha256']
        except KeyError as e:
            raise ValueError('%s: manifest is missing %s' % (model, e))
        rate = fields.get('dropout_rate', 'None')
        rate = 0.5 if rate == 'None' else float(rate)
        with open(blob_path, 'rb') as b_file:
            blob = b_file.read()
        if hashlib.sha256(blob).hexdigest() != digest:
            raise ValueError('%s: checksum mismatch' % blob_path)
        arrays = gftensor.load_tensors(index, blob, dtype=dtype)
        loaded = cls(spec, dtype=dtype, dropout_rate=rate)
        named = loaded.named_parameters()
        if sorted(arrays) != sorted(name for name, _ in named):
            raise ValueError('%s: tensors in the manifest do not match %s'
                             % (model, spec.text))
        for name, tensor in named:
            if arrays[name].shape != tensor.shape:
                raise ValueError('%s: %s has shape %s, expected %s'
                                 % (model, name, arrays[name].shape,
                                    tensor.shape))
            tensor.data[...] = arrays[name]
        seed = fields.get('seed', 'None')
        loaded.seed = None if seed == 'None' else int(seed)
        return loaded.eval()


def build_model(spec, rng=0, dtype=np.float32, dropout_rate=0.5):
    """ Instantiate and initialize a model.

    Parameters:
        spec (ArchSpec or string)
        rng (int or np.random.Generator): an int is used as the seed
        dtype: parameter precision
        dropout_rate (float): rate for the F(n)* layers

    Returns:
        model (GFCNN): in eval mode
    """
    if isinstance(spec, str):
        spec = parse_arch(spec)
    model = GFCNN(spec, dtype=dtype, dropout_rate=dropout_rate)
    if isinstance(rng, (int, np.integer)):
        model.seed = int(rng)
        rng = np.random.default_rng(int(rng))
    model.initialize(rng)
    return model


def count_params(model):
    """ Count scalar weights and biases per partition.

    Returns:
        count (ParamCount): (total, n_conv, n_mlp, n_fc)
    """
    n_conv = sum(t.size for t in model.theta_conv)
    n_mlp = sum(t.size for t in model.theta_mlp)
    n_fc = sum(t.size for t in model.theta_fc)
    return ParamCount(n_conv + n_mlp + n_fc, n_conv, n_mlp, n_fc)


def fc_split(model):
    """ Return (n_fc1, n_fc2): FC parameters induced by the CNN and by G. """
    return _fc_split(model.spec)


def save_model(model, path, extra=None):
    model.dump(path, extra)


def load_model(path):
    return GFCNN.load(path)
