"""Per-group confusion tables, baseline policies, bootstrap intervals and the resplit/retune harness."""
import collections
import itertools
import logging
from multiprocessing.pool import ThreadPool

import numpy as np
from tqdm import tqdm as tqdm_

from data import ALL_GROUPS, filter_group, make_rng, split_equal
from gbm import train

logger = logging.getLogger(__name__)

POLICIES = ('majority_class', 'release_all', 'release_none', 'coin_flip')
METRICS = ('predicted_share', 'col_error', 'row_error')

BootstrapResult = collections.namedtuple('BootstrapResult',
                                         ['statistic', 'point', 'lower', 'upper', 'level', 'n_resamples',
                                          'redraws', 'widened'])


def tqdm(*args, mininterval=5.0, **kwargs):
    return tqdm_(*args, mininterval=mininterval, **kwargs)


class AuditError(ValueError):
    pass


def _nan_to_none(values):
    return [None if np.isnan(v) else float(v) for v in values]


def _none_to_nan(values):
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


class ConfusionReport(object):
    """Weighted K x K confusion table (rows observed, columns predicted) with derived errors.

    Row or column errors on empty rows/columns are NaN (serialised as null), never 0.
    """

    def __init__(self, counts, group=ALL_GROUPS):
        counts = np.array(counts, dtype=np.float64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise AuditError('Confusion counts must be a square matrix')
        if np.any(counts < 0):
            raise AuditError('Confusion counts must be nonnegative')
        self.group = str(group)
        self.counts = counts
        self.n = float(counts.sum())
        if not self.n > 0:
            raise AuditError('Confusion table for %s has zero total weight' % self.group)
        diag = np.diag(counts)
        row_sums = counts.sum(axis=1)
        col_sums = counts.sum(axis=0)
        with np.errstate(divide='ignore', invalid='ignore'):
            self.row_errors = np.where(row_sums > 0, (row_sums - diag) / row_sums, np.nan)
            self.col_errors = np.where(col_sums > 0, (col_sums - diag) / col_sums, np.nan)
        self.predicted_shares = col_sums / self.n
        self.observed_shares = row_sums / self.n

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def overall_error(self):
        return float(1.0 - np.trace(self.counts) / self.n)

    def metric(self, name, k):
        if name == 'predicted_share':
            return float(self.predicted_shares[k])
        if name == 'col_error':
            return float(self.col_errors[k])
        if name == 'row_error':
            return float(self.row_errors[k])
        raise AuditError('Unknown metric: %s - should be one of %s' % (name, ', '.join(METRICS)))

    @classmethod
    def from_counts(cls, counts, group=ALL_GROUPS):
        return cls(counts, group)

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['counts'], json_object['group'])

    def to_dict(self):
        return {
            'group': self.group,
            'n': self.n,
            'counts': self.counts.tolist(),
            'row_errors': _nan_to_none(self.row_errors),
            'col_errors': _nan_to_none(self.col_errors),
            'predicted_shares': self.predicted_shares.tolist(),
            'observed_shares': self.observed_shares.tolist(),
        }


def _weighted_counts(labels, predictions, weights, n_classes):
    flat = labels * n_classes + predictions
    return np.bincount(flat, weights=weights, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def confusion(labels, predictions, weights=None, n_classes=None, group=ALL_GROUPS):
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise AuditError('Length mismatch: %d labels vs %d predictions' % (labels.shape[0], predictions.shape[0]))
    weights = np.ones(labels.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != labels.shape:
        raise AuditError('Length mismatch: %d labels vs %d weights' % (labels.shape[0], weights.shape[0]))
    if np.any(weights < 0) or not weights.sum() > 0:
        raise AuditError('Weights must be nonnegative with positive total')
    if n_classes is None:
        n_classes = int(max(labels.max(), predictions.max())) + 1
    return ConfusionReport(_weighted_counts(labels, predictions, weights, n_classes), group)


class AuditBundle(object):
    """Per-group reports plus an "all" report and signed pairwise disparities (a - b)."""

    def __init__(self, reports, training_group=None, metadata=None):
        self.reports = collections.OrderedDict(reports)
        if ALL_GROUPS not in self.reports:
            raise AuditError('Audit bundle needs an %r report' % ALL_GROUPS)
        self.training_group = training_group
        self.metadata = dict(metadata or {})
        self.probabilities = None
        self.predictions = None

    @property
    def groups(self):
        return [g for g in self.reports if g != ALL_GROUPS]

    def __getitem__(self, group):
        return self.reports[group]

    def disparities(self):
        out = []
        for a, b in itertools.combinations(self.groups, 2):
            ra, rb = self.reports[a], self.reports[b]
            out.append({
                'groups': [a, b],
                'predicted_shares': (ra.predicted_shares - rb.predicted_shares).tolist(),
                'col_errors': _nan_to_none(ra.col_errors - rb.col_errors),
            })
        return out

    @classmethod
    def from_dict(cls, json_object):
        reports = [(r['group'], ConfusionReport.from_dict(r)) for r in json_object['reports']]
        return cls(reports, json_object.get('training_group'), json_object.get('metadata'))

    def to_dict(self):
        return {
            'training_group': self.training_group,
            'metadata': self.metadata,
            'reports': [dict(r.to_dict(), training_group=self.training_group) for r in self.reports.values()],
            'disparities': self.disparities(),
        }


def audit_by_group(model, test):
    """Scores the test set once with the fixed model and partitions the predictions by group tag."""
    if len(test) == 0:
        raise AuditError('Cannot audit an empty test set')
    if model.schema != test.schema:
        raise AuditError('Model schema %r does not match test schema %r' % (model.schema, test.schema))
    n_classes = model.n_classes
    probabilities = model.predict_proba_matrix(test.features)
    predictions = np.argmax(probabilities, axis=1)
    reports = []
    for group in test.group_ids():
        mask = test.groups == group
        if not test.weights[mask].sum() > 0:
            raise AuditError('Group %s has zero total test weight; every test group needs a report' % group)
        reports.append((group, confusion(test.labels[mask], predictions[mask], test.weights[mask], n_classes, group)))
    reports.append((ALL_GROUPS, confusion(test.labels, predictions, test.weights, n_classes, ALL_GROUPS)))
    bundle = AuditBundle(reports, model.training_group,
                         {'test_fingerprint': test.fingerprint(), 'test_rows_fingerprint': test.rows_fingerprint(),
                          'n_test': len(test)})
    bundle.probabilities = probabilities
    bundle.predictions = predictions
    return bundle


def baseline_policy(policy, labels, n_classes, weights=None, seed=None):
    """Confusion table of a predictor-free policy.

    majority_class predicts the weighted modal class; release_all predicts class 0 (no arrest);
    release_none predicts class K-1; coin_flip draws a uniform class per row from `seed`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] == 0:
        raise AuditError('Baseline needs at least one label')
    weights = np.ones(labels.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if policy == 'majority_class':
        totals = np.bincount(labels, weights=weights, minlength=n_classes)
        predictions = np.full(labels.shape[0], int(np.argmax(totals)))
    elif policy == 'release_all':
        predictions = np.zeros(labels.shape[0], dtype=np.int64)
    elif policy == 'release_none':
        predictions = np.full(labels.shape[0], n_classes - 1)
    elif policy == 'coin_flip':
        if seed is None:
            raise AuditError('coin_flip needs a seed')
        predictions = make_rng(seed).integers(0, n_classes, size=labels.shape[0])
    else:
        raise AuditError('Unknown policy: %s - should be one of %s' % (policy, ', '.join(POLICIES)))
    return confusion(labels, predictions, weights, n_classes, 'baseline:%s' % policy)


def generalization_gain(report, baseline, k=0):
    """Relative reduction in class-k prediction error against a baseline table."""
    return float((baseline.col_errors[k] - report.col_errors[k]) / baseline.col_errors[k])


def parse_statistic(statistic):
    """'B/predicted_share:2' -> ('B', 'predicted_share', 2); the group defaults to 'all'."""
    group = ALL_GROUPS
    if '/' in statistic:
        group, statistic = statistic.split('/', 1)
    try:
        name, k = statistic.split(':')
        k = int(k)
    except ValueError:
        raise AuditError('Invalid statistic selector: %r - should look like [group/]metric:class' % statistic)
    if name not in METRICS:
        raise AuditError('Unknown metric: %s - should be one of %s' % (name, ', '.join(METRICS)))
    return group, name, k


def _statistic_value(labels, predictions, weights, mask, n_classes, name, k):
    w = weights[mask] if mask is not None else weights
    if not w.sum() > 0:
        return np.nan
    counts = _weighted_counts(labels if mask is None else labels[mask],
                              predictions if mask is None else predictions[mask], w, n_classes)
    return ConfusionReport(counts).metric(name, k)


def bootstrap_ci(test, model, statistic, B=1000, level=0.95, seed=0, max_redraws=None):
    """Percentile bootstrap over test rows with the trained model held fixed.

    Resample b draws from its own stream derived from (seed, b). A resample on which the statistic
    is undefined is redrawn and counted. If the percentile interval misses the full-sample point
    estimate, the interval is widened to include it and `widened` is set.
    """
    if B < 100:
        raise AuditError('Invalid B: %d - should be >= 100' % B)
    if not 0.0 < level < 1.0:
        raise AuditError('Invalid level: %r - should be in (0, 1)' % level)
    group, name, k = parse_statistic(statistic)
    n = len(test)
    n_classes = model.n_classes
    predictions = model.predict_class_matrix(test.features)
    labels = test.labels
    weights = test.weights
    groups = test.groups

    def value(index):
        mask = None if group == ALL_GROUPS else (groups[index] == group)
        return _statistic_value(labels[index], predictions[index], weights[index], mask, n_classes, name, k)

    point = value(np.arange(n))
    if np.isnan(point):
        raise AuditError('Statistic %s is undefined on the full test set' % statistic)
    max_redraws = 100 * B if max_redraws is None else max_redraws
    values = np.empty(B)
    redraws = 0
    for b in tqdm(range(B), desc='Bootstrap %s' % statistic):
        rng = make_rng(seed, b)
        while True:
            v = value(rng.integers(0, n, size=n))
            if not np.isnan(v):
                break
            redraws += 1
            if redraws > max_redraws:
                raise AuditError('Statistic %s undefined on too many resamples (%d)' % (statistic, redraws))
        values[b] = v
    alpha = (1.0 - level) / 2.0
    lower, upper = np.percentile(values, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    widened = bool(point < lower or point > upper)
    if widened:
        logger.warning("Percentile interval [%.4f, %.4f] misses point %.4f; widened", lower, upper, point)
    if redraws:
        logger.info("  Redrawn resamples = %d", redraws)
    return BootstrapResult(statistic, float(point), float(min(lower, point)), float(max(upper, point)), level, B,
                           redraws, widened)


def _cell_metrics(bundle):
    out = collections.OrderedDict()
    for group, report in bundle.reports.items():
        for k in range(report.n_classes):
            out['%s/predicted_share:%d' % (group, k)] = float(report.predicted_shares[k])
            out['%s/col_error:%d' % (group, k)] = float(report.col_errors[k])
    return out


def _dispersion(cells, threshold):
    keys = []
    for cell in cells:
        for key in cell['metrics']:
            if key not in keys:
                keys.append(key)
    out = collections.OrderedDict()
    for key in keys:
        values = np.array([cell['metrics'].get(key, np.nan) for cell in cells], dtype=np.float64)
        finite = values[~np.isnan(values)]
        if finite.size == 0:
            out[key] = {'min': None, 'max': None, 'mean': None, 'std': None, 'range': None, 'flagged': False}
            continue
        spread = float(finite.max() - finite.min())
        out[key] = {
            'min': float(finite.min()),
            'max': float(finite.max()),
            'mean': float(finite.mean()),
            'std': float(finite.std()),
            'range': spread,
            'flagged': bool(spread > threshold),
        }
    return out


def robustness_harness(data, config_grid, R, seeds=None, training_group=None, threshold=0.05,
                       prepare_train=None, prepare_test=None, n_workers=1):
    """Retrains and re-audits over every (config, split seed) cell and summarises the spread.

    `prepare_train` maps a training Dataset to the one actually fitted (weights, down-weighting);
    `prepare_test` rewrites each audited test half (test-time transforms).
    Cells may run on a thread pool; results are assembled in cell order.
    """
    if R < 2:
        raise AuditError('Invalid R: %d - should be >= 2' % R)
    if not config_grid:
        raise AuditError('Robustness grid is empty')
    seeds = list(range(R)) if seeds is None else list(seeds)
    if len(seeds) != R:
        raise AuditError('Need %d split seeds, got %d' % (R, len(seeds)))
    cells = [(c, config, r, seed) for c, config in enumerate(config_grid) for r, seed in enumerate(seeds)]

    def run_cell(cell):
        c, config, r, seed = cell
        split = split_equal(data, seed)
        train_data = split.train if training_group is None else filter_group(split.train, training_group)
        if prepare_train is not None:
            train_data = prepare_train(train_data)
        model = train(train_data, config, training_group)
        test_data = split.test if prepare_test is None else prepare_test(split.test)
        bundle = audit_by_group(model, test_data)
        return {'config_index': c, 'split_index': r, 'seed': seed, 'metrics': _cell_metrics(bundle)}

    logger.info("***** Running robustness harness *****")
    logger.info("  Num configs = %d", len(config_grid))
    logger.info("  Num splits per config = %d", R)
    if n_workers > 1:
        pool = ThreadPool(n_workers)
        try:
            results = pool.map(run_cell, cells)
        finally:
            pool.close()
    else:
        results = [run_cell(cell) for cell in tqdm(cells, desc='Robustness')]

    per_config = []
    for c in range(len(config_grid)):
        mine = [cell for cell in results if cell['config_index'] == c]
        per_config.append({'config': config_grid[c].to_dict(), 'dispersion': _dispersion(mine, threshold)})
    overall = _dispersion(results, threshold)
    flagged = [key for key, stats in overall.items() if stats['flagged']]
    if flagged:
        logger.warning("%d metrics vary by more than %.3f: %s", len(flagged), threshold, ', '.join(flagged))
    return {
        'threshold': threshold,
        'training_group': training_group,
        'seeds': seeds,
        'cells': results,
        'per_config': per_config,
        'overall': overall,
        'flagged': flagged,
    }


def _as_reports(obj):
    if isinstance(obj, AuditBundle):
        return obj.reports
    if isinstance(obj, ConfusionReport):
        return collections.OrderedDict([(obj.group, obj)])
    return collections.OrderedDict(obj)


def compare_reports(a, b):
    """Side-by-side predicted shares and prediction errors with signed differences (a - b).

    Two single reports are compared directly, whatever their groups; two bundles are compared group
    by group and must hold the same groups.
    """
    reports_a, reports_b = _as_reports(a), _as_reports(b)
    if len(reports_a) == 1 and len(reports_b) == 1:
        pairs = [(next(iter(reports_a.values())), next(iter(reports_b.values())))]
    else:
        if list(reports_a) != list(reports_b):
            raise AuditError('Reports cover different groups: %s vs %s' % (list(reports_a), list(reports_b)))
        pairs = [(reports_a[g], reports_b[g]) for g in reports_a]
    rows = []
    for ra, rb in pairs:
        if ra.n_classes != rb.n_classes:
            raise AuditError('Reports have %d and %d classes' % (ra.n_classes, rb.n_classes))
        rows.append({
            'groups': [ra.group, rb.group],
            'predicted_shares': {'a': ra.predicted_shares.tolist(), 'b': rb.predicted_shares.tolist(),
                                 'diff': (ra.predicted_shares - rb.predicted_shares).tolist()},
            'col_errors': {'a': _nan_to_none(ra.col_errors), 'b': _nan_to_none(rb.col_errors),
                           'diff': _nan_to_none(ra.col_errors - rb.col_errors)},
        })
    return {'n_classes': pairs[0][0].n_classes, 'comparisons': rows}


def load_reports(json_object):
    """An audit bundle dict or a single confusion-report dict."""
    if 'reports' in json_object:
        return AuditBundle.from_dict(json_object)
    if 'counts' in json_object:
        return ConfusionReport.from_dict(json_object)
    raise AuditError('Not a confusion report or audit bundle')
