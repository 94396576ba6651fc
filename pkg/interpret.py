"""Gain-share importance and one-vs-rest partial dependence for a trained BoostModel."""
import collections
import logging
import math

import numpy as np
from scipy.special import logit
from tqdm import tqdm as tqdm_

logger = logging.getLogger(__name__)

MAX_BINS = 40
LOGIT_CONVENTION = 'one-vs-rest log odds of the averaged probability'


def tqdm(*args, mininterval=5.0, **kwargs):
    return tqdm_(*args, mininterval=mininterval, **kwargs)


class DegenerateImportanceError(ValueError):
    pass


class LogitOverflowError(ValueError):
    def __init__(self, message, bin_value=None):
        super(LogitOverflowError, self).__init__(message)
        self.bin_value = bin_value


class ImportanceReport(object):
    """Per-feature share of total split gain, in percent (sums to 100)."""

    def __init__(self, names, shares):
        self.names = list(names)
        self.shares = np.asarray(shares, dtype=np.float64)

    def __getitem__(self, name):
        return float(self.shares[self.names.index(name)])

    def ranked(self):
        order = sorted(range(len(self.names)), key=lambda i: (-self.shares[i], i))
        return [(self.names[i], float(self.shares[i])) for i in order]

    def to_dict(self):
        return {'features': [{'name': n, 'share': float(s)} for n, s in zip(self.names, self.shares)]}


def importance(model):
    """Each split adds its gain to its feature; totals are averaged over rounds, then scaled to 100."""
    if model.n_rounds == 0:
        raise DegenerateImportanceError('Importance needs a model with at least one round')
    totals = np.zeros(len(model.schema))
    for trees in model.rounds:
        for tree in trees:
            for _, feature, _, gain in tree.splits():
                totals[feature] += gain
    totals /= model.n_rounds
    if not totals.sum() > 0:
        raise DegenerateImportanceError('Model has zero total split gain (every tree is a single leaf)')
    return ImportanceReport(model.schema.names, 100.0 * totals / totals.sum())


class PdpCurve(object):
    def __init__(self, feature, target_class, bin_values, logits, probabilities, binning, data_fingerprint,
                 reference=None):
        self.feature = feature
        self.target_class = int(target_class)
        self.bin_values = np.asarray(bin_values, dtype=np.float64)
        self.logits = np.asarray(logits, dtype=np.float64)
        self.probabilities = np.asarray(probabilities, dtype=np.float64)
        self.binning = binning
        self.data_fingerprint = data_fingerprint
        self.reference = reference

    @property
    def points(self):
        return list(zip(self.bin_values.tolist(), self.logits.tolist()))

    def to_dict(self):
        return {
            'feature': self.feature,
            'target_class': self.target_class,
            'bin_values': self.bin_values.tolist(),
            'logits': self.logits.tolist(),
            'mean_probabilities': self.probabilities.tolist(),
            'binning': self.binning,
            'logit_convention': LOGIT_CONVENTION,
            'averaging': 'logit of mean probability',
            'data_fingerprint': self.data_fingerprint,
            'reference': self.reference,
        }


def _spaced(lo, hi, spacing):
    start = math.floor(lo / spacing) * spacing
    steps = int(math.floor((hi - start) / spacing + 1e-9))
    return start + spacing * np.arange(steps + 1)


def default_binning(kind, column):
    """Counts: integer spacing giving at most 40 points; binary/category: observed values;
    everything else: 40 equal-width points over the observed range."""
    lo, hi = float(column.min()), float(column.max())
    if kind == 'count':
        return {'spacing': max(1, int(math.ceil((hi - lo) / (MAX_BINS - 1))))}
    if kind in ('binary', 'category') and np.unique(column).shape[0] <= MAX_BINS:
        return {'values': np.unique(column).tolist()}
    return {'n_bins': MAX_BINS}


def bin_values(binning, column):
    lo, hi = float(column.min()), float(column.max())
    if 'values' in binning:
        values = np.asarray(binning['values'], dtype=np.float64)
    elif 'spacing' in binning:
        spacing = float(binning['spacing'])
        if not spacing > 0:
            raise ValueError('Invalid spacing: %r - should be > 0' % spacing)
        values = _spaced(lo, hi, spacing)
    elif 'n_bins' in binning:
        values = np.linspace(lo, hi, int(binning['n_bins']))
    else:
        raise ValueError('Invalid binning rule: %r' % (binning,))
    return np.unique(values)


def partial_dependence(model, data, feature, target_class, bins=None, reference=None):
    """Forces `feature` to each bin value in every reference row and records the one-vs-rest logit of
    the mean predicted probability of `target_class`. The full reference data is used at every point;
    `reference` names it in the curve metadata.
    """
    if len(data) == 0:
        raise ValueError('Partial dependence needs a nonempty reference dataset')
    j = data.schema.index(feature)
    column = data.features[:, j]
    binning = bins if bins is not None else default_binning(data.schema.kind(feature), column)
    values = bin_values(binning, column)
    features = np.array(data.features, dtype=np.float64)
    n = features.shape[0]
    logits = []
    means = []
    for v in tqdm(values, desc='PDP %s' % feature):
        features[:, j] = v
        p = model.predict_proba_matrix(features)[:, target_class]
        mean = math.fsum(p) / n
        if not 0.0 < mean < 1.0:
            raise LogitOverflowError('Mean probability %r at %s = %r has no finite logit' % (mean, feature, v),
                                     bin_value=float(v))
        means.append(mean)
        logits.append(float(logit(mean)))
    logger.info("PDP %s: %d bins, logit range [%.3f, %.3f]", feature, len(values), min(logits), max(logits))
    return PdpCurve(feature, target_class, values, logits, means, binning, data.fingerprint(), reference)


PdpRow = collections.namedtuple('PdpRow', ['feature', 'target_class', 'bin_value', 'logit', 'mean_probability'])


def curve_rows(curve):
    return [PdpRow(curve.feature, curve.target_class, float(v), float(l), float(p))
            for v, l, p in zip(curve.bin_values, curve.logits, curve.probabilities)]
