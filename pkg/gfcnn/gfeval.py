""" Fault diagnosis rates, confusion matrices and variable correlations. """

from collections import namedtuple
import warnings

import numpy as np
import pandas as pd
from sklearn import metrics


# Per-fault FDR of the case study, averaged over 10 runs: CNN model #5
# against GF-CNN model #4 on the Tennessee Eastman data.
REFERENCE_FDR = pd.DataFrame(
    {'cnn': [0.9989, 0.9921, 0.6700, 0.9971, 0.9968, 1.0000, 0.9993, 0.9096,
             0.3014, 0.8300, 0.9671, 0.7911, 0.9279, 1.0000, 0.3993, 0.7657,
             0.9607, 0.9464, 0.9893, 0.8961],
     'gfcnn': [0.9996, 0.9996, 0.7311, 0.9968, 0.9989, 0.9996, 1.0000,
               0.9146, 0.2850, 0.8382, 0.9682, 0.7446, 0.9314, 1.0000,
               0.4114, 0.7596, 0.9607, 0.9504, 0.9932, 0.9197]},
    index=pd.Index(range(1, 21), name='fault'))

RunSummary = namedtuple('RunSummary', ['mean', 'min', 'max', 'per_class'])


def confusion(preds, labels, n_classes):
    """ Confusion counts, rows = true class, columns = predicted class.

    Parameters:
        preds (iterable): predicted class indices
        labels (iterable): true class indices
        n_classes (int)

    Returns:
        counts (np.ndarray): n_classes x n_classes, int64
    """
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(preds) != len(labels):
        raise ValueError('got %d predictions for %d labels'
                         % (len(preds), len(labels)))
    for name, values in (('prediction', preds), ('label', labels)):
        if len(values) and (values.min() < 0 or values.max() >= n_classes):
            raise ValueError('%s out of range [0, %d)' % (name, n_classes))
    if not len(labels):
        return np.zeros((n_classes, n_classes), dtype=np.int64)
    return metrics.confusion_matrix(labels, preds,
                                    labels=np.arange(n_classes)) \
        .astype(np.int64)


def fdr(counts, i):
    """ Fault diagnosis rate P / (P + B) of class i; nan for an empty class.
    """
    counts = np.asarray(counts)
    total = counts[i].sum()
    if total == 0:
        return np.nan
    return counts[i, i] / total


def per_class_fdr(counts):
    return np.array([fdr(counts, i) for i in range(len(counts))])


def macro_fdr(rates):
    """ Unweighted mean of the defined per-class rates.

    Parameters:
        rates (np.ndarray): per-class FDR, nan for empty classes, or an
            EvalReport
    """
    if isinstance(rates, EvalReport):
        rates = rates.fdr
    rates = np.asarray(rates, dtype=float)
    defined = ~np.isnan(rates)
    if not defined.any():
        raise ValueError('every class is empty; macro FDR is undefined.')
    if not defined.all():
        warnings.warn('classes %s have no samples and are excluded from '
                      'the macro FDR' % list(np.flatnonzero(~defined)))
    return float(rates[defined].mean())


class EvalReport(object):

    """ Evaluation of one model on one image set.

    Attributes:
        confusion (np.ndarray): C x C counts
        fdr (np.ndarray): per-class FDR, nan for empty classes
        macro_fdr (float)
        accuracy (float): trace over total
        metadata (dict)
    """

    def __init__(self, counts, metadata=None):
        self.confusion = np.asarray(counts, dtype=np.int64)
        self.fdr = per_class_fdr(self.confusion)
        self.macro_fdr = macro_fdr(self.fdr)
        self.accuracy = np.trace(self.confusion) / self.confusion.sum()
        self.metadata = dict(metadata or {})

    @property
    def n_classes(self):
        return len(self.confusion)

    def fdr_frame(self):
        return pd.DataFrame({'fdr': self.fdr},
                            index=pd.Index(range(1, self.n_classes + 1),
                                           name='fault'))

    def to_text(self):
        lines = ['# gfcnn evaluation report']
        for key in sorted(self.metadata):
            lines.append('%s %s' % (key, self.metadata[key]))
        lines.append('images %d' % self.confusion.sum())
        lines.append('accuracy %.4f' % self.accuracy)
        lines.append('macro_fdr %.4f' % self.macro_fdr)
        lines.append('')
        lines.append('fault fdr')
        for i, rate in enumerate(self.fdr, 1):
            lines.append('%d %s' % (i, 'nan' if np.isnan(rate)
                                    else '%.4f' % rate))
        lines.append('')
        lines.append('confusion (rows: true fault, columns: predicted)')
        for row in self.confusion:
            lines.append(' '.join(str(c) for c in row))
        return '\n'.join(lines) + '\n'

    def write(self, path):
        with open(path, 'w') as f:
            f.write(self.to_text())


def make_report(preds, labels, n_classes, metadata=None):
    return EvalReport(confusion(preds, labels, n_classes), metadata)


def summarize_runs(reports):
    """ Mean, min and max macro FDR over repeated runs.

    Returns:
        summary (RunSummary): per_class is the mean per-class FDR
    """
    if not reports:
        raise ValueError('no runs to summarize.')
    scores = np.array([r.macro_fdr for r in reports])
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', RuntimeWarning)
        per_class = np.nanmean(np.vstack([r.fdr for r in reports]), axis=0)
    return RunSummary(float(scores.mean()), float(scores.min()),
                      float(scores.max()), per_class)


def correlation_matrix(series):
    """ Pearson correlation between all pairs of variables.

    Constant variables get coefficient 0 (1 on the diagonal) and a
    warning.

    Parameters:
        series (SeriesSet or np.ndarray): samples x variables

    Returns:
        R (np.ndarray): n x n, symmetric, unit diagonal
    """
    if hasattr(series, 'stacked'):
        X = series.stacked()
    elif isinstance(series, pd.DataFrame):
        X = series.values.astype(float)
    else:
        X = np.asarray(series, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError('need at least 2 samples of n variables.')
    Xc = X - X.mean(axis=0)
    scale = np.sqrt((Xc ** 2).sum(axis=0))
    constant = ~(scale > 0)
    if constant.any():
        warnings.warn('constant variables %s get correlation 0'
                      % list(np.flatnonzero(constant)))
    Z = Xc / np.where(constant, 1.0, scale)
    R = Z.T @ Z
    R = np.clip((R + R.T) / 2, -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R
