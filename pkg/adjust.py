"""Intervention levers: class weight plans, cost-ratio calibration, base-rate down-weighting and
test-time predictor transforms."""
import collections
import copy
import itertools
import json
import logging

import numpy as np

from audit import _weighted_counts
from data import ALL_GROUPS, EmptySelectionError
from gbm import train

logger = logging.getLogger(__name__)

TRANSFORM_OPS = ('sqrt', 'scale', 'recode')

TransformStep = collections.namedtuple('TransformStep', ['features', 'group', 'op', 'factor', 'recode_from',
                                                         'recode_to'])


class WeightPlanError(ValueError):
    pass


class DomainError(ValueError):
    def __init__(self, message, row=None, feature=None):
        super(DomainError, self).__init__(message)
        self.row = row
        self.feature = feature


class WeightPlan(object):
    """Per-class multipliers for training row weights, with provenance."""

    def __init__(self, class_weights, provenance='manual', target=None, iterations=None, converged=None,
                 achieved_ratios=None, history=None):
        class_weights = np.array(class_weights, dtype=np.float64).reshape(-1)
        if class_weights.shape[0] < 2:
            raise WeightPlanError('A weight plan needs one weight per class (at least 2)')
        if not np.all(np.isfinite(class_weights)) or np.any(class_weights <= 0):
            raise WeightPlanError('Invalid class weights: %s - should be finite and > 0' % class_weights.tolist())
        self.class_weights = class_weights
        self.provenance = provenance
        self.target = target
        self.iterations = iterations
        self.converged = converged
        self.achieved_ratios = achieved_ratios
        self.history = history or []

    @property
    def n_classes(self):
        return self.class_weights.shape[0]

    @classmethod
    def identity(cls, n_classes):
        return cls(np.ones(n_classes))

    def scaled(self, c):
        return WeightPlan(self.class_weights * c, self.provenance, self.target, self.iterations, self.converged,
                          self.achieved_ratios)

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['class_weights'], json_object.get('provenance', 'manual'), json_object.get('target'),
                   json_object.get('iterations'), json_object.get('converged'), json_object.get('achieved_ratios'),
                   json_object.get('history'))

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, 'r') as reader:
            return cls.from_dict(json.load(reader))

    def to_dict(self):
        return {
            'class_weights': self.class_weights.tolist(),
            'provenance': self.provenance,
            'target': self.target,
            'iterations': self.iterations,
            'converged': self.converged,
            'achieved_ratios': self.achieved_ratios,
            'history': copy.deepcopy(self.history),
        }

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def apply_weight_plan(data, plan):
    """row weight <- row weight * class_weights[label]; features untouched."""
    if plan.n_classes != data.n_classes:
        raise WeightPlanError('Plan has %d weights but data has %d classes' % (plan.n_classes, data.n_classes))
    return data.replace(weights=data.weights * plan.class_weights[data.labels])


def compose_weight_plans(first, second):
    if first.n_classes != second.n_classes:
        raise WeightPlanError('Cannot compose plans over %d and %d classes' % (first.n_classes, second.n_classes))
    return WeightPlan(first.class_weights * second.class_weights, provenance='composed')


def downweight_class(data, klass, factor):
    """Multiplies the weights of one outcome class by `factor` in (0, 1]."""
    if not 0.0 < factor <= 1.0:
        raise WeightPlanError('Invalid factor: %r - should be in (0, 1]' % factor)
    if not 0 <= klass < data.n_classes:
        raise WeightPlanError('Invalid class: %d - should be in 0..%d' % (klass, data.n_classes - 1))
    weights = np.ones(data.n_classes)
    weights[klass] = factor
    return apply_weight_plan(data, WeightPlan(weights, provenance='downweight'))


def downweight_factor_for_share(data, klass, share):
    """Factor that brings the weighted share of `klass` down to `share`."""
    totals = data.class_weight_totals()
    current = totals[klass] / totals.sum()
    if not 0.0 < share < 1.0:
        raise WeightPlanError('Invalid share: %r - should be in (0, 1)' % share)
    if share >= current:
        raise WeightPlanError('Target share %.4f is not below the current share %.4f' % (share, current))
    rest = totals.sum() - totals[klass]
    return float(share * rest / (totals[klass] * (1.0 - share)))


def empirical_cost_ratios(counts):
    """R[i][j] = counts[i][j] / counts[j][i]: observed-i-predicted-j errors per reverse error."""
    counts = np.asarray(counts, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratios = counts / counts.T
    np.fill_diagonal(ratios, np.nan)
    return ratios


def _target_matrix(target, n_classes):
    if target is None or target == 'uniform':
        return np.ones((n_classes, n_classes))
    if np.isscalar(target):
        target = np.full((n_classes, n_classes), float(target))
    target = np.array(target, dtype=np.float64)
    if target.shape != (n_classes, n_classes):
        raise WeightPlanError('Target ratio matrix must be %d x %d' % (n_classes, n_classes))
    off = ~np.eye(n_classes, dtype=bool)
    if np.any(target[off] <= 0):
        raise WeightPlanError('Target cost ratios must be positive')
    # only the geometric symmetrisation t_ij = 1 / t_ji is attainable
    return np.sqrt(target / target.T)


def _within(ratios, target, tolerance):
    n_classes = ratios.shape[0]
    for i in range(n_classes):
        for j in range(i + 1, n_classes):
            rel = ratios[i, j] / target[i, j]
            if not (np.isfinite(rel) and 1.0 - tolerance <= rel <= 1.0 / (1.0 - tolerance)):
                return False
    return True


def _ratio_list(ratios):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in ratios]


def _ratio_gaps(counts, log_target):
    """Smoothed log(counts[i][j] / counts[j][i]) minus the log target, zero on the diagonal."""
    gaps = np.log((counts + 0.5) / (counts.T + 0.5)) - log_target
    np.fill_diagonal(gaps, 0.0)
    return gaps


def _prior_shift(scores, labels, weights, log_target, max_shift, points=13, rounds=3):
    """Class score offsets (class 0 held at 0) minimising the worst ratio gap of argmax(scores + v).

    The model is not retrained: re-weighting class k by w_k moves its fitted log-odds by about log w_k,
    so the offsets found on fixed scores are the next multiplicative step for the class weights. The
    search is a coarse-to-fine grid over [-max_shift, max_shift] per class.
    """
    n_classes = scores.shape[1]
    best_shift = np.zeros(n_classes)
    best_worst = np.inf
    center, span = best_shift.copy(), float(max_shift)
    for _ in range(rounds):
        grid = np.linspace(-span, span, points)
        for offsets in itertools.product(grid, repeat=n_classes - 1):
            shift = center + np.concatenate([[0.0], offsets])
            counts = _weighted_counts(labels, np.argmax(scores + shift, axis=1), weights, n_classes)
            worst = float(np.max(np.abs(_ratio_gaps(counts, log_target))))
            if worst < best_worst:
                best_worst, best_shift = worst, shift
        center, span = best_shift, 2.0 * span / (points - 1)
    return best_shift, best_worst


def _normalised(log_weights, totals):
    weights = np.exp(log_weights - log_weights[0])
    return weights * totals.sum() / np.dot(totals, weights)


def calibrate_cost_ratios(data, config, target='uniform', max_iter=10, tolerance=0.15, max_shift=3.0):
    """Searches class weights so the training confusion table's pairwise error ratios hit `target`.

    Each iteration trains on the re-weighted data and forms the training confusion table over the
    original row weights. When the worst |log ratio gap| improved, the class score offsets that would
    balance this model's table are searched on its fixed scores and applied to log w as the next step.
    When it got worse, the step from the best iterate so far is halved. Weights are rescaled so the
    re-weighted total equals the original total. A ratio r is within tolerance when
    1 - tolerance <= r / t <= 1 / (1 - tolerance).
    """
    if max_iter < 1:
        raise WeightPlanError('Invalid max_iter: %d - should be >= 1' % max_iter)
    if not 0.0 < tolerance < 1.0:
        raise WeightPlanError('Invalid tolerance: %r - should be in (0, 1)' % tolerance)
    if not max_shift > 0.0:
        raise WeightPlanError('Invalid max_shift: %r - should be > 0' % max_shift)
    n_classes = config.n_classes
    target_matrix = _target_matrix(target, n_classes)
    log_target = np.log(target_matrix)
    totals = np.bincount(data.labels, weights=data.weights, minlength=n_classes)
    weights = np.ones(n_classes)
    history = []
    best = None
    step = 1.0

    logger.info("***** Calibrating cost ratios *****")
    logger.info("  Target = %s", 'uniform' if target in (None, 'uniform') else target_matrix.tolist())
    logger.info("  Tolerance = %.3f", tolerance)
    for iteration in range(1, max_iter + 1):
        model = train(apply_weight_plan(data, WeightPlan(weights)), config)
        scores = model.raw_scores(data.features)
        counts = _weighted_counts(data.labels, np.argmax(scores, axis=1), data.weights, n_classes)
        ratios = empirical_cost_ratios(counts)
        worst = float(np.max(np.abs(_ratio_gaps(counts, log_target))))
        history.append({'iteration': iteration, 'class_weights': weights.tolist(), 'ratios': _ratio_list(ratios)})
        logger.info("  Iteration %d: weights=%s max |log ratio| = %.4f", iteration,
                    np.round(weights, 4).tolist(), worst)
        if _within(ratios, target_matrix, tolerance):
            return WeightPlan(weights, 'calibrated', _target_repr(target), iteration, True, _ratio_list(ratios),
                              history)
        if best is None or worst < best['worst']:
            shift, expected = _prior_shift(scores, data.labels, data.weights, log_target, max_shift)
            logger.info("  Offsets %s bring this model to max |log ratio| = %.4f",
                        np.round(shift, 4).tolist(), expected)
            best = {'worst': worst, 'weights': weights.copy(), 'ratios': ratios, 'iteration': iteration,
                    'shift': shift}
        else:
            step *= 0.5
            logger.info("  No improvement; step halved to %.4f", step)
        weights = _normalised(np.log(best['weights']) + step * best['shift'], totals)

    logger.warning("Cost-ratio calibration did not converge in %d iterations; best max |log ratio| = %.4f",
                   max_iter, best['worst'])
    return WeightPlan(best['weights'], 'calibrated', _target_repr(target), best['iteration'], False,
                      _ratio_list(best['ratios']), history)

def _target_repr(target):
    if target is None or isinstance(target, str):
        return target or 'uniform'
    return np.asarray(target, dtype=np.float64).tolist()


class TransformSpec(object):
    """Ordered test-time feature rewrites, each restricted to one group or to all groups.

    Step fields: features (name, list of names, or {"flags": [...]}), group (id or "all"),
    op (sqrt | scale | recode), factor (scale), from/to (recode).
    """

    def __init__(self, steps):
        out = []
        for step in steps:
            if isinstance(step, TransformStep):
                out.append(step)
                continue
            op = step['op']
            if op not in TRANSFORM_OPS:
                raise ValueError('Invalid transform op: %s - should be one of %s' % (op, ', '.join(TRANSFORM_OPS)))
            factor = step.get('factor')
            if op == 'scale' and not (factor is not None and factor > 0):
                raise ValueError('Invalid scale factor: %r - should be > 0' % factor)
            if op == 'recode' and ('from' not in step or 'to' not in step):
                raise ValueError('recode needs "from" and "to"')
            out.append(TransformStep(step['features'], str(step.get('group', ALL_GROUPS)), op, factor,
                                     step.get('from'), step.get('to')))
        self.steps = out

    def __len__(self):
        return len(self.steps)

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['steps'])

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, 'r') as reader:
            return cls.from_dict(json.load(reader))

    def to_dict(self):
        steps = []
        for s in self.steps:
            step = {'features': s.features, 'group': s.group, 'op': s.op}
            if s.op == 'scale':
                step['factor'] = s.factor
            if s.op == 'recode':
                step['from'] = s.recode_from
                step['to'] = s.recode_to
            steps.append(step)
        return {'steps': steps}

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


SERIOUS_PRIORS = {'flags': ['serious_prior']}


def sqrt_serious_priors(group):
    return TransformSpec([{'features': SERIOUS_PRIORS, 'group': group, 'op': 'sqrt'}])


def halve_serious_priors(group):
    return TransformSpec([{'features': SERIOUS_PRIORS, 'group': group, 'op': 'scale', 'factor': 0.5}])


def halve_then_recode(group):
    return TransformSpec([{'features': SERIOUS_PRIORS, 'group': group, 'op': 'scale', 'factor': 0.5},
                          {'features': SERIOUS_PRIORS, 'group': group, 'op': 'recode', 'from': 1, 'to': 0}])


TRANSFORM_PRESETS = {
    'sqrt_serious_priors': sqrt_serious_priors,
    'halve_serious_priors': halve_serious_priors,
    'halve_then_recode': halve_then_recode,
}


def apply_transform(test, spec):
    """Applies the steps in order to matching rows and features; labels, weights and groups are kept."""
    features = np.array(test.features, dtype=np.float64)
    for step in spec.steps:
        columns = test.schema.resolve(step.features)
        if step.group == ALL_GROUPS:
            rows = np.arange(len(test))
        else:
            rows = np.flatnonzero(test.groups == step.group)
            if rows.size == 0:
                raise EmptySelectionError('Transform targets group %r, absent from the data' % step.group)
        for j in columns:
            values = features[rows, j]
            if step.op == 'sqrt':
                negative = np.flatnonzero(values < 0)
                if negative.size:
                    row = int(test.row_ids[rows[negative[0]]])
                    name = test.schema.names[j]
                    raise DomainError('sqrt of negative value %r in feature %s at row %d' %
                                      (float(values[negative[0]]), name, row), row=row, feature=name)
                features[rows, j] = np.sqrt(values)
            elif step.op == 'scale':
                features[rows, j] = values * step.factor
            else:
                features[rows, j] = np.where(values == step.recode_from, step.recode_to, values)
        logger.info("Applied %s to %d features for %d rows (group %s)", step.op, len(columns), rows.size, step.group)
    return test.replace(features=features)
