""" Series normalization, windowing, signal-to-image conversion and data files.

A SeriesSet holds labelled runs of multivariate measurements. The
pipeline is normalize -> window_series -> window_to_image, which turns
each non-overlapping n x w window into a gray image with pixels in
[0, 255]. Image sets are stored in the GFIM binary format.
"""

from collections import namedtuple
import hashlib
import logging
import multiprocessing as mp
import re
import struct
import warnings

import numpy as np
import pandas as pd


logger = logging.getLogger(__name__)

Run = namedtuple('Run', ['label', 'run_id', 'data', 'period'])
NormStats = namedtuple('NormStats', ['mean', 'std', 'degenerate'])
ImageWindow = namedtuple('ImageWindow', ['pixels', 'label', 'provenance'])
CsvSchema = namedtuple('CsvSchema', ['label', 'run', 'variables', 'drop'])
CsvSchema.__new__.__defaults__ = ('fault', 'run', None, ())
SynthConfig = namedtuple('SynthConfig',
                         ['n', 'w', 'classes', 'runs', 'samples', 'gamma',
                          'sigma', 'phi', 'shift', 'shifted', 'pairs'])
SynthConfig.__new__.__defaults__ = (50, 20, 4, 10, 480, 1.0, 1.0, 0.5,
                                    1.0, 3, 3)

GFIM_MAGIC = b'GFIM'
GFIM_VERSION = 1
_HEADER = struct.Struct('<4s5I')


class DataError(ValueError):

    """ A data file that cannot be read.

    Attributes:
        row (int): 1-based line number in the file (header is line 1),
            or None when no single row is at fault
    """

    def __init__(self, message, row=None):
        ValueError.__init__(self, message)
        self.row = row


class SeriesSet(object):

    """ Labelled runs sharing the same variable count.

    Attributes:
        runs (list): Run(label, run_id, data, period) with data m x n
        n (int): number of variables
        n_classes (int): labels lie in 1..n_classes
    """

    def __init__(self, runs, n_classes=None):
        self.runs = list(runs)
        if not self.runs:
            raise ValueError('a SeriesSet needs at least one run.')
        widths = set()
        for r in self.runs:
            if np.ndim(r.data) != 2:
                raise ValueError('run %s: data must be m x n' % (r.run_id, ))
            widths.add(np.shape(r.data)[1])
        if len(widths) != 1:
            raise ValueError('runs have different variable counts: %s'
                             % sorted(widths))
        self.n = widths.pop()
        labels = [r.label for r in self.runs]
        if min(labels) < 1:
            raise ValueError('labels must lie in 1..C, got %d' % min(labels))
        if n_classes is None:
            n_classes = max(labels)
        elif max(labels) > n_classes:
            raise ValueError('label %d exceeds the class count %d'
                             % (max(labels), n_classes))
        self.n_classes = int(n_classes)

    def __len__(self):
        return len(self.runs)

    @property
    def n_samples(self):
        return sum(len(r.data) for r in self.runs)

    def stacked(self):
        """ All samples of all runs as one array. """
        return np.vstack([np.asarray(r.data, dtype=float) for r in self.runs])

    def _replace_data(self, transform):
        return SeriesSet([r._replace(data=transform(r.data))
                          for r in self.runs], self.n_classes)


class WindowedDataset(object):

    """ Gray images cut from a SeriesSet.

    Attributes:
        pixels (np.ndarray): count x n x w, uint8
        labels (np.ndarray): class indices (fault label - 1)
        n (int)
        w (int)
        n_classes (int)
        provenance (list): (run_id, window index) per image, or None
    """

    def __init__(self, pixels, labels, n_classes, provenance=None):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3:
            raise ValueError('pixels must be count x n x w')
        if pixels.dtype != np.uint8:
            raise ValueError('pixels must be uint8')
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(pixels):
            raise ValueError('got %d labels for %d images'
                             % (len(labels), len(pixels)))
        if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError('class indices must lie in [0, %d)' % n_classes)
        self.pixels = pixels
        self.labels = labels
        self.n, self.w = pixels.shape[1:]
        self.n_classes = int(n_classes)
        self.provenance = provenance

    def __len__(self):
        return len(self.labels)

    def inputs(self, dtype=np.float32):
        """ Network inputs: pixels divided by 255. """
        return self.pixels.astype(dtype) / 255

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


def compute_norm_stats(train):
    """ Per-variable mean and population standard deviation.

    Columns with zero spread get std 1 and a warning.

    Parameters:
        train (SeriesSet)

    Returns:
        stats (NormStats)
    """
    X = train.stacked()
    if len(X) < 2:
        raise ValueError('need at least 2 samples, got %d' % len(X))
    mean = X.mean(axis=0)
    std = np.sqrt(((X - mean) ** 2).mean(axis=0))
    degenerate = ~(std > 0)
    if degenerate.any():
        warnings.warn('constant variables %s: std set to 1'
                      % list(np.flatnonzero(degenerate)))
        std = np.where(degenerate, 1.0, std)
    return NormStats(mean, std, degenerate)


def normalize(series, stats):
    """ Standardize every run with the given (training) statistics. """
    mean = np.asarray(stats.mean, dtype=float)
    std = np.asarray(stats.std, dtype=float)
    if mean.shape != (series.n, ) or std.shape != (series.n, ):
        raise ValueError('stats have %d variables, series has %d'
                         % (len(mean), series.n))
    if not np.all(std > 0):
        raise ValueError('std must be positive.')
    return series._replace_data(
        lambda d: (np.asarray(d, dtype=float) - mean) / std)


def window_series(series, w):
    """ Cut each run into non-overlapping windows of w samples.

    A run of m samples gives floor(m / w) windows; the remainder is
    dropped and windows never span runs.

    Returns:
        windows (list): (label, run_id, window) with window n x w, time
            along the columns
    """
    if int(w) != w or w < 1:
        raise ValueError('window width must be an integer >= 1, got %r' % w)
    w = int(w)
    windows = []
    for r in series.runs:
        data = np.asarray(r.data, dtype=float)
        for k in range(len(data) // w):
            windows.append((r.label, r.run_id, data[k * w:(k + 1) * w].T))
    return windows


def scale_pixels(window):
    """ Min-max scale a window to integers 0..255, rounding half up.

    p_min and p_max are taken over the whole window; a constant window
    maps to all zeros.
    """
    p = np.asarray(window, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError('window contains non-finite values')
    p_min, p_max = p.min(), p.max()
    if not p_max > p_min:
        return np.zeros(p.shape, dtype=np.uint8)
    if not np.isfinite(p_max - p_min):
        p, p_min, p_max = p / 2, p_min / 2, p_max / 2
    # snapped so affine copies of a window hit the same rounding ties
    scaled = np.round(255 * ((p - p_min) / (p_max - p_min)), 9)
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def window_to_image(window, label=0, provenance=None):
    """ Convert an n x w window to an ImageWindow.

    Parameters:
        window (np.ndarray): n x w
        label (int): class index
        provenance (tuple): (run_id, window index)

    Returns:
        image (ImageWindow)
    """
    return ImageWindow(scale_pixels(window), label, provenance)


def make_images(series, w, jobs=1):
    """ Window a SeriesSet and convert every window to an image.

    Images are ordered by run then window index; with jobs > 1 the
    conversion runs on a process pool without changing that order.

    Returns:
        dataset (WindowedDataset)
    """
    windows = window_series(series, w)
    labels = np.array([l - 1 for l, _, _ in windows], dtype=np.int64)
    provenance = []
    counter = {}
    for label, run_id, _ in windows:
        k = counter.get((label, run_id), 0)
        provenance.append((run_id, k))
        counter[(label, run_id)] = k + 1
    arrays = [win for _, _, win in windows]
    if jobs > 1 and len(arrays) > 1:
        with mp.Pool(processes=jobs) as pool:
            pixels = pool.map(scale_pixels, arrays)
    else:
        pixels = [scale_pixels(a) for a in arrays]
    if pixels:
        pixels = np.stack(pixels)
    else:
        pixels = np.zeros((0, series.n, int(w)), dtype=np.uint8)
    logger.info('converted %d runs into %d images of %d x %d',
                len(series), len(pixels), series.n, w)
    return WindowedDataset(pixels, labels, series.n_classes, provenance)


def _numeric_column(frame, column, row_offset=2):
    values = pd.to_numeric(frame[column], errors='coerce')
    bad = ~np.isfinite(values.to_numpy(dtype=float))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError('row %d: column %r has non-numeric or missing value '
                        '%r' % (i + row_offset, column, frame[column].iloc[i]),
                        row=i + row_offset)
    # float() parses the written digits exactly; to_numeric may not
    return frame[column].astype(float).to_numpy()


def load_csv(path, schema=CsvSchema()):
    """ Read labelled runs from a CSV file with a header row.

    Rows are grouped by (label, run); within a run the file order is kept.
    Runs come out sorted by label, then run id.

    Parameters:
        path (string)
        schema (CsvSchema): label and run column names, the ordered
            variable columns (None: all remaining columns), and columns
            to drop

    Returns:
        series (SeriesSet)
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            skip_blank_lines=False)
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        row = int(match.group(1)) if match else None
        raise DataError('%s: ragged row: %s' % (path, e), row=row)
    except pd.errors.EmptyDataError:
        raise DataError('%s: no header row' % path, row=1)
    columns = list(frame.columns)
    for name in (schema.label, schema.run):
        if name not in columns:
            raise DataError('%s: missing column %r' % (path, name), row=1)
    if schema.variables is None:
        skip = set([schema.label, schema.run]) | set(schema.drop)
        variables = [c for c in columns if c not in skip]
    else:
        variables = [c for c in schema.variables if c not in schema.drop]
        missing = [c for c in variables if c not in columns]
        if missing:
            raise DataError('%s: missing columns %s' % (path, missing),
                            row=1)
    if not variables:
        raise DataError('%s: no variable columns' % path, row=1)
    if frame.empty:
        raise DataError('%s: no data rows' % path)
    ragged = frame[columns].isna().any(axis=1).to_numpy()
    if ragged.any():
        row = int(np.flatnonzero(ragged)[0]) + 2
        raise DataError('%s: row %d has too few fields' % (path, row),
                        row=row)

    labels = _numeric_column(frame, schema.label)
    bad = (labels != np.round(labels)) | (labels < 1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0]) + 2
        raise DataError('%s: row %d: labels must be integers >= 1'
                        % (path, row), row=row)
    runs = pd.to_numeric(frame[schema.run], errors='coerce')
    if runs.notna().all() and (runs == runs.round()).all():
        run_ids = runs.astype(np.int64).to_numpy()
    else:
        run_ids = frame[schema.run].to_numpy()
    data = np.column_stack([_numeric_column(frame, c) for c in variables])

    keys = pd.DataFrame({'label': labels.astype(np.int64), 'run': run_ids})
    groups = keys.groupby(['label', 'run'], sort=True).indices
    result = []
    for (label, run_id), rows in sorted(groups.items(), key=lambda g: g[0]):
        result.append(Run(int(label), run_id, data[np.sort(rows)], None))
    logger.info('read %d rows, %d runs, %d variables from %s',
                len(frame), len(result), len(variables), path)
    return SeriesSet(result)


def write_csv(series, path, schema=CsvSchema(), variables=None):
    """ Write a SeriesSet in the ingestion schema. """
    if variables is None:
        variables = ['x%d' % (i + 1) for i in range(series.n)]
    frames = []
    for r in series.runs:
        frame = pd.DataFrame(np.asarray(r.data, dtype=float),
                             columns=variables)
        frame.insert(0, schema.run, r.run_id)
        frame.insert(0, schema.label, r.label)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False,
                                                float_format='%.17g')


def synthetic_structure(cfg, seed):
    """ Class structure of a synthetic set.

    Returns:
        shifts (np.ndarray): classes x n mean shifts
        pairs (list): per class, (i, j) pairs with j - i >= ceil(n / 2)
    """
    _check_synth(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    n = cfg.n
    half = -(-n // 2)
    order = rng.permutation(n)
    shifts = np.zeros((cfg.classes, n))
    pairs = []
    for c in range(cfg.classes):
        k = min(cfg.shifted, n)
        index = order[(np.arange(k) + c * k) % n]
        signs = rng.choice([-1.0, 1.0], size=k)
        shifts[c, index] = cfg.shift * signs
        class_pairs = []
        if n >= 2 and cfg.gamma > 0:
            firsts = rng.choice(n - half, size=min(cfg.pairs, n - half),
                                replace=False)
            used = set()
            for i in firsts:
                free = [j for j in range(i + half, n) if j not in used]
                if not free:
                    continue
                j = free[int(rng.integers(len(free)))]
                used.add(j)
                class_pairs.append((int(i), int(j)))
        pairs.append(class_pairs)
    return shifts, pairs


def _check_synth(cfg):
    for name in ('n', 'w', 'classes', 'runs', 'samples'):
        value = getattr(cfg, name)
        if int(value) != value or value < 1:
            raise ValueError('%s must be an integer >= 1, got %r'
                             % (name, value))
    if cfg.gamma < 0:
        raise ValueError('coupling gamma must be >= 0.')
    if cfg.sigma < 0:
        raise ValueError('noise sigma must be >= 0.')
    if not -1 < cfg.phi < 1:
        raise ValueError('AR coefficient must lie in (-1, 1).')
    if cfg.shifted < 0 or cfg.pairs < 0:
        raise ValueError('shifted and pairs must be >= 0.')


def gen_synthetic(cfg=SynthConfig(), seed=0, structure_seed=None):
    """ Generate a labelled synthetic fault data set.

    Every variable is a stationary AR(1) series with unit variance. Class c
    couples its far pairs (i, j) by z_j <- (z_j + gamma z_i) /
    sqrt(1 + gamma^2), which keeps unit variance and gives the pair a
    correlation of gamma / sqrt(1 + gamma^2). The series are scaled by
    sigma and shifted by the class mean pattern.

    Parameters:
        cfg (SynthConfig)
        seed (int): seeds the series
        structure_seed (int): seeds the class structure; defaults to
            seed. Train and test sets share it.

    Returns:
        series (SeriesSet): cfg.runs runs per class, labels 1..classes
    """
    if structure_seed is None:
        structure_seed = seed
    shifts, pairs = synthetic_structure(cfg, structure_seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    innovation = np.sqrt(1 - cfg.phi ** 2)
    runs = []
    for c in range(cfg.classes):
        for r in range(cfg.runs):
            e = rng.standard_normal((cfg.samples, cfg.n))
            z = np.empty_like(e)
            z[0] = e[0]
            for t in range(1, cfg.samples):
                z[t] = cfg.phi * z[t - 1] + innovation * e[t]
            for i, j in pairs[c]:
                z[:, j] = (z[:, j] + cfg.gamma * z[:, i]) / \
                    np.sqrt(1 + cfg.gamma ** 2)
            runs.append(Run(c + 1, r + 1, shifts[c] + cfg.sigma * z, 1.0))
    return SeriesSet(runs, n_classes=cfg.classes)


def _digest(raw):
    return hashlib.sha256(raw).hexdigest()


def _record_dtype(n, w):
    return np.dtype([('label', '<u2'), ('pixels', 'u1', (n, w))])


def save_images(dataset, path):
    """ Write a GFIM image set and its plain-text manifest path + '.txt'.

    Layout: magic 'GFIM', then little-endian u32 version, n, w, C and
    count, then count records of a u16 class index and n * w pixel bytes.
    """
    records = np.zeros(len(dataset), dtype=_record_dtype(dataset.n,
                                                         dataset.w))
    records['label'] = dataset.labels
    records['pixels'] = dataset.pixels
    raw = _HEADER.pack(GFIM_MAGIC, GFIM_VERSION, dataset.n, dataset.w,
                       dataset.n_classes, len(dataset)) + records.tobytes()
    with open(path, 'wb') as f:
        f.write(raw)
    lines = ['gfim-manifest 1',
             'n %d' % dataset.n,
             'w %d' % dataset.w,
             'classes %d' % dataset.n_classes,
             'count %d' % len(dataset),
             'class_counts %s' % ' '.join(str(c) for c in
                                          dataset.class_counts()),
             'inputs pixels/255',
             'sha256 %s' % _digest(raw)]
    with open(path + '.txt', 'w') as f:
        f.write('\n'.join(lines) + '\n')
    logger.info('wrote %d images to %s', len(dataset), path)
    return _digest(raw)


def load_images(path):
    """ Read a GFIM image set.

    Returns:
        dataset (WindowedDataset): provenance is not stored and is None
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError('%s: file too short for a GFIM header' % path)
    magic, version, n, w, n_classes, count = _HEADER.unpack_from(raw)
    if magic != GFIM_MAGIC:
        raise ValueError('%s: not a GFIM file' % path)
    if version != GFIM_VERSION:
        raise ValueError('%s: unsupported GFIM version %d' % (path, version))
    dtype = _record_dtype(n, w)
    expected = _HEADER.size + count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError('%s: expected %d bytes for %d images, got %d'
                         % (path, expected, count, len(raw)))
    records = np.frombuffer(raw, dtype=dtype, count=count,
                            offset=_HEADER.size)
    return WindowedDataset(records['pixels'].copy(),
                           records['label'].astype(np.int64), n_classes)


def images_digest(path):
    with open(path, 'rb') as f:
        return _digest(f.read())


def save_stats(stats, path):
    frame = pd.DataFrame({'mean': stats.mean, 'std': stats.std,
                          'degenerate': np.asarray(stats.degenerate,
                                                   dtype=int)})
    frame.index.name = 'variable'
    frame.to_csv(path, float_format='%.17g')


def load_stats(path):
    frame = pd.read_csv(path, float_precision='round_trip')
    for column in ('mean', 'std'):
        if column not in frame.columns:
            raise DataError('%s: missing column %r' % (path, column), row=1)
    degenerate = frame['degenerate'].to_numpy(dtype=bool) \
        if 'degenerate' in frame.columns else np.zeros(len(frame), bool)
    return NormStats(frame['mean'].to_numpy(dtype=float),
                     frame['std'].to_numpy(dtype=float), degenerate)
