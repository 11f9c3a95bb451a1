""" Dense real tensors with reverse-mode automatic differentiation.

Operations on Tensors are recorded on the active Tape (see Tape) whenever
at least one input requires a gradient. Replaying the tape in reverse
populates the grad of every leaf tensor that requires one. Without an
active tape the same operations only compute values.
"""

import threading

import numpy as np


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_tape():
    """ Return the innermost tape entered on this thread, or None. """
    stack = _tape_stack()
    if stack:
        return stack[-1]
    return None


class Tensor(object):

    """ An n-dimensional real array with optional gradient accumulation.

    Data is stored row-major. A Tensor is not modified by any operation;
    only its grad accumulates during backward.

    Attributes:
        data (np.ndarray)
        grad (np.ndarray): same shape as data, or None
        requires_grad (bool)
    """

    def __init__(self, data, requires_grad=False, dtype=None):
        data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim > 1 and 0 in data.shape:
            raise ValueError('Tensor extents must be >= 1, got %s'
                             % (data.shape, ))
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' % \
            (self.shape, self.dtype, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        """ A copy of this tensor that is not part of any graph. """
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node(object):

    __slots__ = ('out', 'parents', 'backward')

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape(object):

    """ Ordered record of the primitive operations of one forward pass.

    Use as a context manager; operations executed inside the with-block
    on this thread are recorded. A tape is replayed at most once and is
    freed afterwards.

    Attributes:
        freed (bool)
    """

    def __init__(self):
        self._nodes = []
        self._leaves = {}
        self.freed = False

    def __enter__(self):
        if self.freed:
            raise ValueError('tape has already been replayed')
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, parents, backward):
        for p in parents:
            if p.requires_grad and p._tape is None:
                self._leaves[id(p)] = p
        out._tape = self
        out._node = len(self._nodes)
        self._nodes.append(_Node(out, parents, backward))

    def backward(self, loss):
        """ Replay the tape in reverse from a scalar loss.

        Every leaf recorded on the tape that requires a gradient ends up
        with a populated grad (zeros if the loss does not depend on it).

        Parameters:
            loss (Tensor): rank-0 or shape (1, ), produced on this tape.
        """
        if loss.size != 1 or loss.ndim > 1:
            raise ValueError('loss must be a scalar, got shape %s'
                             % (loss.shape, ))
        if self.freed:
            raise ValueError('tape has already been replayed')
        if loss._tape is not self:
            raise ValueError('loss is detached: it was not recorded on '
                             'this tape')
        adjoints = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes[:loss._node + 1]):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + pg
                    else:
                        adjoints[key] = pg
                else:
                    parent._accumulate(pg)
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self.free()

    def free(self):
        for node in self._nodes:
            node.out._tape = None
            node.out._node = None
        self._nodes = []
        self._leaves = {}
        self.freed = True


def record(data, parents, backward):
    """ Wrap data as the output of a primitive and record it if needed.

    Parameters:
        data (np.ndarray): the forward result
        parents (tuple): input Tensors
        backward (callable): maps the output adjoint to a tuple of input
            adjoints (None for inputs without a gradient)

    Returns:
        out (Tensor)
    """
    tape = active_tape()
    for p in parents:
        if p._tape is not None and p._tape is not tape:
            raise ValueError('input tensor belongs to another tape; '
                             'detach it first')
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, tuple(parents), backward)
    return out


def backward(loss):
    """ Populate grads of all parameters reachable from a scalar loss. """
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError('loss must be a scalar, got shape %s'
                         % (loss.shape, ))
    if loss._tape is None:
        raise ValueError('loss is detached: it was not produced on an '
                         'active tape')
    loss._tape.backward(loss)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError('%s: shape mismatch between %s and %s'
                         % (op, a.shape, b.shape))


def add(a, b):
    _same_shape('add', a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape('sub', a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape('mul', a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (g * b.data, g * a.data))


def scale(a, c):
    """ Multiply a tensor by a real scalar. """
    c = float(c)
    return record(a.data * c, (a, ), lambda g: (g * c, ))


def relu(a):
    mask = a.data > 0
    return record(np.maximum(a.data, 0), (a, ), lambda g: (g * mask, ))


_ELEMENTWISE = {'add': add, 'sub': sub, 'mul': mul}


def elementwise(op, a, b=None):
    """ Apply one of add, sub, mul, relu.

    Shapes of a and b must be identical; mul also takes a plain number
    for b, which scales a.
    """
    if op == 'relu':
        if b is not None:
            raise ValueError('relu takes a single tensor')
        return relu(a)
    if op not in _ELEMENTWISE:
        raise ValueError('unknown elementwise op: %s' % op)
    if op == 'mul' and not isinstance(b, Tensor):
        return scale(a, b)
    if b is None:
        raise ValueError('%s needs two tensors' % op)
    return _ELEMENTWISE[op](a, b)


def matmul(a, b):
    """ Matrix product a @ b.

    a may be rank-1 (treated as a row vector) or rank-2; b is rank-2.
    """
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ValueError('matmul: expected (k,) or (m, k) by (k, n), got '
                         '%s and %s' % (a.shape, b.shape))
    if a.shape[-1] != b.shape[0]:
        raise ValueError('matmul: inner extents differ, %s and %s'
                         % (a.shape, b.shape))

    def _backward(g):
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.T @ g
        return g @ b.data.T, gb
    return record(a.data @ b.data, (a, b), _backward)


def add_bias(x, b):
    """ Add a rank-1 bias along the last axis of x. """
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError('add_bias: bias %s does not match %s'
                         % (b.shape, x.shape))
    m = b.shape[0]
    return record(x.data + b.data, (x, b),
                  lambda g: (g, g.reshape(-1, m).sum(axis=0)))


def reshape(a, shape):
    """ Reshape in row-major order. """
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return record(out, (a, ), lambda g: (g.reshape(a.shape), ))


def flatten(a, start=0):
    """ Flatten axes start.. into one, row-major.

    flatten(a) is rank-1; flatten(a, start=1) keeps a leading batch axis.
    """
    n = int(np.prod(a.shape[start:], dtype=np.int64))
    return reshape(a, a.shape[:start] + (n, ))


reshape_flatten = flatten


def concat(a, b):
    """ Concatenate two rank-1 tensors; a's entries come first.

    Two rank-2 tensors with equal leading (batch) extents are joined
    along their last axis.
    """
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise ValueError('concat: expected two rank-1 tensors, got shapes '
                         '%s and %s' % (a.shape, b.shape))
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ValueError('concat: batch extents differ, %s and %s'
                         % (a.shape, b.shape))
    k = a.shape[-1]
    out = np.concatenate([a.data, b.data.astype(a.dtype)], axis=-1)
    return record(out, (a, b), lambda g: (g[..., :k], g[..., k:]))


def sum(a):
    """ Sum of all elements as a rank-0 tensor. """
    return record(np.sum(a.data), (a, ),
                  lambda g: (np.ones_like(a.data) * g, ))


def mean(a):
    return scale(sum(a), 1.0 / a.size)


def grad_check(model, x, label, eps=1e-5, n_params=200, seed=0):
    """ Compare analytic gradients against central finite differences.

    The model must provide parameters() and loss(x, label) and be in
    eval mode, so that two evaluations of the loss see the same network.

    Parameters:
        model: object with parameters(), loss(x, label) and mode
        x (np.ndarray or Tensor): one input
        label (int): class index
        eps (float): finite-difference step
        n_params (int): number of parameter entries to check; at least
            one entry of every parameter tensor is included
        seed (int): seeds the choice of entries

    Returns:
        max_err (float): max |analytic - numeric| /
            max(|analytic|, |numeric|, 1e-8) over the checked entries
    """
    if not eps > 0:
        raise ValueError('eps must be positive.')
    if getattr(model, 'mode', 'eval') != 'eval':
        raise ValueError('grad_check needs a deterministic model; '
                         'call eval() first.')
    params = list(model.parameters())
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = model.loss(x, label)
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    picks = [(i, int(rng.integers(p.size))) for i, p in enumerate(params)]
    sizes = np.array([p.size for p in params])
    remaining = max(n_params - len(picks), 0)
    if remaining:
        flat = rng.choice(sizes.sum(), size=min(remaining, sizes.sum()),
                          replace=False)
        bounds = np.cumsum(sizes)
        for f in np.sort(flat):
            i = int(np.searchsorted(bounds, f, side='right'))
            start = bounds[i] - sizes[i]
            picks.append((i, int(f - start)))

    worst = 0.0
    for i, flat_index in picks:
        p = params[i]
        idx = np.unravel_index(flat_index, p.shape)
        old = p.data[idx]
        p.data[idx] = old + eps
        f_plus = model.loss(x, label).item()
        p.data[idx] = old - eps
        f_minus = model.loss(x, label).item()
        p.data[idx] = old
        numeric = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[i][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


def index_line(name, shape, offset):
    """ Format one tensor index entry: name, shape and byte offset. """
    return '%s %s %d' % (name, 'x'.join(str(s) for s in shape), offset)


def parse_index_line(line):
    """ Inverse of index_line. """
    parts = line.split()
    if len(parts) != 3:
        raise ValueError('malformed tensor index entry: %r' % line)
    name, shape, offset = parts
    try:
        shape = tuple(int(s) for s in shape.split('x'))
        offset = int(offset)
    except ValueError:
        raise ValueError('malformed tensor index entry: %r' % line)
    return name, shape, offset


def dump_tensors(named, f):
    """ Write tensors to a binary file as little-endian 32-bit floats.

    Parameters:
        named (iterable): (name, Tensor) pairs, written in order
        f: file object opened for binary writing

    Returns:
        index (list): (name, shape, byte offset) per tensor
    """
    index = []
    offset = 0
    for name, tensor in named:
        raw = np.ascontiguousarray(tensor.data, dtype='<f4').tobytes()
        f.write(raw)
        index.append((name, tensor.shape, offset))
        offset += len(raw)
    return index


def load_tensors(index, blob, dtype=np.float32):
    """ Read tensors written by dump_tensors.

    Parameters:
        index (list): (name, shape, byte offset) entries
        blob (bytes)
        dtype: precision of the returned arrays

    Returns:
        arrays (dict): name -> np.ndarray
    """
    arrays = {}
    for name, shape, offset in index:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise ValueError('blob truncated: %s needs bytes %d..%d of %d'
                             % (name, offset, end, len(blob)))
        data = np.frombuffer(blob, dtype='<f4', count=count, offset=offset)
        arrays[name] = data.reshape(shape).astype(dtype)
    return arrays
