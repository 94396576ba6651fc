"""Seeded synthetic offender population standing in for confidential arraignment data.

Group shares and per-group outcome base rates are published marginals; every feature distribution and
outcome coefficient here is declared synthetic configuration.
"""
import collections
import copy
import hashlib
import json
import logging

import numpy as np

from data import Dataset, Schema, make_rng

logger = logging.getLogger(__name__)

CLASS_NAMES = ['no_arrest', 'nonviolent_arrest', 'violent_arrest']
FAMILIES = ('negbin', 'poisson', 'bernoulli', 'age', 'fraction_of', 'uniform', 'normal')
SHAPES = ('linear', 'log1p', 'first_charge', 'age_peak')
AGE_RANGE = (16.0, 90.0)
PUBLISHED_BASE_RATES = {'W': (0.58, 0.35, 0.07), 'B': (0.56, 0.32, 0.11)}

GenerationDetails = collections.namedtuple('GenerationDetails', ['scores', 'uniforms', 'intercepts', 'achieved'])


class CalibrationError(RuntimeError):
    def __init__(self, message, achieved=None):
        super(CalibrationError, self).__init__(message)
        self.achieved = achieved


def shape_value(shape, x):
    """Outcome shape functions on a feature column.

    first_charge: declines until 22, flat to 40, then rises mildly.
    age_peak: flat top through 23, declining to 0 at 40, flat after.
    """
    x = np.asarray(x, dtype=np.float64)
    if shape == 'linear':
        return x
    if shape == 'log1p':
        return np.log1p(x)
    if shape == 'first_charge':
        return np.maximum(22.0 - x, 0.0) / 6.0 + 0.03 * np.maximum(x - 40.0, 0.0)
    if shape == 'age_peak':
        return np.clip((40.0 - x) / 17.0, 0.0, 1.0)
    raise ValueError('Unknown shape: %s - should be one of %s' % (shape, ', '.join(SHAPES)))


class GeneratorSpec(object):
    """Population size, group shares, per-group base rates, feature generators and outcome model.

    Feature entries: {name, kind, flags, family, params, group_params: {group: params overrides}}.
    Outcome terms: {feature, shape, coef: K reals}; class intercepts are calibrated per group.
    """

    def __init__(self, n, group_proportions, base_rates, features, terms, seed=0, class_names=None,
                 tolerance=0.001, max_sweeps=30):
        self.n = int(n)
        if self.n < 0:
            raise ValueError('Invalid n: %d - should be >= 0' % self.n)
        self.group_proportions = collections.OrderedDict((str(g), float(p)) for g, p in group_proportions.items())
        if abs(sum(self.group_proportions.values()) - 1.0) > 1e-9:
            raise ValueError('Group proportions sum to %r, not 1' % sum(self.group_proportions.values()))
        if any(p < 0 for p in self.group_proportions.values()):
            raise ValueError('Group proportions must be nonnegative')
        self.base_rates = collections.OrderedDict((str(g), [float(v) for v in r]) for g, r in base_rates.items())
        n_classes = None
        for group in self.group_proportions:
            if group not in self.base_rates:
                raise ValueError('No base rates for group %s' % group)
            rates = self.base_rates[group]
            if abs(sum(rates) - 1.0) > 1e-9 or any(r <= 0 for r in rates):
                raise ValueError('Base rates for %s must be positive and sum to 1: %r' % (group, rates))
            if n_classes is not None and len(rates) != n_classes:
                raise ValueError('Every group needs the same number of classes')
            n_classes = len(rates)
        self.n_classes = n_classes
        self.features = copy.deepcopy(list(features))
        names = []
        for f in self.features:
            if f['family'] not in FAMILIES:
                raise ValueError('Unknown family for %s: %s' % (f['name'], f['family']))
            if f['family'] == 'fraction_of' and f['params']['base'] not in names:
                raise ValueError('%s depends on %s, which must come earlier' % (f['name'], f['params']['base']))
            names.append(f['name'])
        self.terms = copy.deepcopy(list(terms))
        for t in self.terms:
            if t['feature'] not in names:
                raise ValueError('Outcome term on unknown feature %s' % t['feature'])
            if t['shape'] not in SHAPES:
                raise ValueError('Unknown shape: %s' % t['shape'])
            if len(t['coef']) != n_classes:
                raise ValueError('Term on %s needs %d coefficients' % (t['feature'], n_classes))
        self.seed = int(seed)
        self.class_names = list(class_names) if class_names is not None else None
        self.tolerance = float(tolerance)
        self.max_sweeps = int(max_sweeps)

    @property
    def schema(self):
        return Schema([(f['name'], f['kind'], f.get('flags', ())) for f in self.features])

    def replace(self, **overrides):
        params = self.to_dict()
        params.update(overrides)
        return GeneratorSpec.from_dict(params)

    def spec_hash(self):
        return hashlib.sha256(self.to_json_string().encode('utf-8')).hexdigest()

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['n'], json_object['group_proportions'], json_object['base_rates'],
                   json_object['features'], json_object['terms'], json_object.get('seed', 0),
                   json_object.get('class_names'), json_object.get('tolerance', 0.001),
                   json_object.get('max_sweeps', 30))

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, 'r') as reader:
            return cls.from_dict(json.load(reader))

    def to_dict(self):
        return {
            'n': self.n,
            'group_proportions': dict(self.group_proportions),
            'base_rates': dict(self.base_rates),
            'features': copy.deepcopy(self.features),
            'terms': copy.deepcopy(self.terms),
            'seed': self.seed,
            'class_names': self.class_names,
            'tolerance': self.tolerance,
            'max_sweeps': self.max_sweeps,
        }

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def default(cls, n=100000, seed=0, include_other=True):
        return default_spec(n, seed, include_other)


def _negbin(mean, black_mean, dispersion=0.5):
    return {'params': {'mean': mean, 'dispersion': dispersion},
            'group_params': {'B': {'mean': black_mean}}}


def close_rounding_gap(rates):
    """Spreads the shortfall of rounded shares evenly over the classes so they sum to 1."""
    rates = [float(r) for r in rates]
    gap = (1.0 - sum(rates)) / len(rates)
    out = [r + gap for r in rates[:-1]]
    return out + [1.0 - sum(out)]


def default_spec(n=100000, seed=0, include_other=True):
    """Groups W 0.32 / B 0.67 / other 0.01 with base rates W (.58,.35,.07), B (.56,.32,.11).

    The published B rates sum to .99; the missing .01 is spread evenly, giving B about
    (.5633,.3233,.1133), within 1/300 of every published value.

    Black rows carry stochastically longer serious-prior records. `include_other=False` drops the
    unassigned 1% and renormalises W and B.
    """
    proportions = collections.OrderedDict([('W', 0.32), ('B', 0.67), ('other', 0.01)])
    base_rates = collections.OrderedDict([('W', list(PUBLISHED_BASE_RATES['W'])),
                                          ('B', close_rounding_gap(PUBLISHED_BASE_RATES['B'])),
                                          ('other', [0.57, 0.33, 0.10])])
    if not include_other:
        del proportions['other']
        del base_rates['other']
        total = sum(proportions.values())
        proportions = collections.OrderedDict((g, p / total) for g, p in proportions.items())
        # keep the shares summing to exactly 1
        proportions['B'] = 1.0 - proportions['W']

    def feature(name, kind, flags, family, params, group_params=None):
        return {'name': name, 'kind': kind, 'flags': flags, 'family': family, 'params': params,
                'group_params': group_params or {}}

    def counts(name, flags, mean, black_mean, dispersion=0.5):
        spec = _negbin(mean, black_mean, dispersion)
        return feature(name, 'count', flags, 'negbin', spec['params'], spec['group_params'])

    features = [
        feature('age', 'years', ['biographical'], 'age', {'loc': 18.0, 'shape': 2.0, 'scale': 7.0}),
        feature('age_first_adult', 'years', ['biographical'], 'fraction_of', {'base': 'age', 'a': 1.2, 'b': 2.5}),
        feature('male', 'binary', ['biographical'], 'bernoulli', {'p': 0.8}),
        counts('Aproperty', ['serious_prior'], 2.0, 3.2),
        counts('Aviolent', ['serious_prior'], 0.6, 1.1),
        counts('Aweapons', ['serious_prior'], 0.3, 0.7),
        counts('Apetty', ['discretionary_prior'], 1.5, 3.0, 0.7),
        counts('Adrugposs', ['discretionary_prior'], 1.0, 2.0, 0.7),
        counts('Jfelony', ['juvenile_prior'], 0.3, 0.6),
        counts('Jmisdemeanor', ['juvenile_prior'], 0.6, 1.2),
        feature('iproperty', 'count', ['instant_charge'], 'poisson', {'mean': 0.5}),
        feature('iviolent', 'count', ['instant_charge'], 'poisson', {'mean': 0.3}, {'B': {'mean': 0.4}}),
        feature('iweapons', 'count', ['instant_charge'], 'poisson', {'mean': 0.15}, {'B': {'mean': 0.25}}),
    ]
    terms = [
        {'feature': 'age_first_adult', 'shape': 'first_charge', 'coef': [0.0, 0.6, 1.0]},
        {'feature': 'Aproperty', 'shape': 'log1p', 'coef': [0.0, 0.45, 0.55]},
        {'feature': 'age', 'shape': 'age_peak', 'coef': [0.0, 0.5, 0.8]},
        {'feature': 'Aviolent', 'shape': 'log1p', 'coef': [0.0, 0.15, 0.6]},
        {'feature': 'Aweapons', 'shape': 'log1p', 'coef': [0.0, 0.1, 0.4]},
        {'feature': 'male', 'shape': 'linear', 'coef': [0.0, 0.2, 0.45]},
        {'feature': 'iviolent', 'shape': 'linear', 'coef': [0.0, 0.0, 0.35]},
        {'feature': 'iproperty', 'shape': 'linear', 'coef': [0.0, 0.25, 0.0]},
        {'feature': 'Apetty', 'shape': 'log1p', 'coef': [0.0, 0.15, 0.05]},
    ]
    return GeneratorSpec(n, proportions, base_rates, features, terms, seed, CLASS_NAMES)


def _allocate(n, proportions):
    """Largest-remainder group counts, so shares are exact to within 1/n."""
    raw = np.array(list(proportions.values())) * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:remainder]] += 1
    return counts


def _draw(rng, family, params, size, columns):
    if family == 'negbin':
        r = params['dispersion']
        return rng.negative_binomial(r, r / (r + params['mean']), size=size).astype(np.float64)
    if family == 'poisson':
        return rng.poisson(params['mean'], size=size).astype(np.float64)
    if family == 'bernoulli':
        return (rng.random(size) < params['p']).astype(np.float64)
    if family == 'age':
        age = np.floor(params['loc'] + rng.gamma(params['shape'], params['scale'], size=size))
        return np.clip(age, *AGE_RANGE)
    if family == 'fraction_of':
        base = columns[params['base']]
        low = AGE_RANGE[0]
        value = np.floor(low + (base - low) * rng.beta(params['a'], params['b'], size=size))
        return np.clip(value, low, base)
    if family == 'uniform':
        return rng.uniform(params['low'], params['high'], size=size)
    if family == 'normal':
        return rng.normal(params['mean'], params['sd'], size=size)
    raise ValueError('Unknown family: %s' % family)


def labels_from_scores(scores, uniforms):
    """Inverse-CDF class draw: the first class whose cumulative softmax probability exceeds u."""
    scores = np.asarray(scores, dtype=np.float64)
    p = np.exp(scores - scores.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    cumulative = np.cumsum(p, axis=1)
    labels = (np.asarray(uniforms)[:, None] >= cumulative).sum(axis=1)
    return np.minimum(labels, scores.shape[1] - 1)


def _class_counts(linear, intercepts, uniforms, n_classes):
    return np.bincount(labels_from_scores(linear + intercepts, uniforms), minlength=n_classes)


def _count_edge(linear, intercepts, uniforms, k, count, n_classes, width=16.0, iterations=50):
    """Smallest intercept for class k, within `width` of the current one, at which class k reaches
    `count` rows. The class-k count is nondecreasing in its own intercept."""
    lo, hi = intercepts[k] - width, intercepts[k] + width

    def reached(b):
        trial = intercepts.copy()
        trial[k] = b
        return _class_counts(linear, trial, uniforms, n_classes)[k] >= count

    if reached(lo):
        return lo
    if not reached(hi):
        return hi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if reached(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _calibrate_intercepts(linear, uniforms, target, tolerance, max_sweeps, group):
    """Per-class intercepts (class 0 fixed at 0) that hit integer row counts for the target shares.

    Target counts are the largest-remainder rounding of target * n. Each sweep places every class
    intercept in the middle of the interval where that class has exactly its target count, and sweeps
    repeat until all counts match at once. Failing that, shares within `tolerance` (at least 1/n, the
    step of a realized share) are accepted.
    """
    n_rows = linear.shape[0]
    n_classes = len(target)
    target = np.asarray(target, dtype=np.float64)
    wanted = _allocate(n_rows, collections.OrderedDict(enumerate(target)))
    tolerance = max(tolerance, 1.0 / n_rows) + 1e-12
    intercepts = np.zeros(n_classes)
    intercepts[1:] = np.log(target[1:] / target[0]) - (linear[:, 1:].mean(axis=0) - linear[:, 0].mean())
    counts = _class_counts(linear, intercepts, uniforms, n_classes)
    best = (np.abs(counts - wanted).max(), intercepts.copy(), counts)
    for sweep in range(max_sweeps):
        if best[0] == 0:
            break
        for k in range(1, n_classes):
            left = _count_edge(linear, intercepts, uniforms, k, wanted[k], n_classes)
            right = _count_edge(linear, intercepts, uniforms, k, wanted[k] + 1, n_classes)
            intercepts[k] = 0.5 * (left + right)
        counts = _class_counts(linear, intercepts, uniforms, n_classes)
        logger.debug("Group %s sweep %d: counts %s, wanted %s", group, sweep + 1, counts.tolist(), wanted.tolist())
        if np.abs(counts - wanted).max() < best[0]:
            best = (np.abs(counts - wanted).max(), intercepts.copy(), counts)
    _, intercepts, counts = best
    shares = counts / float(n_rows)
    if np.max(np.abs(shares - target)) <= tolerance:
        return intercepts, shares
    raise CalibrationError('Could not calibrate base rates for group %s: achieved %s, target %s' %
                           (group, np.round(shares, 4).tolist(), target.tolist()),
                           achieved={group: shares.tolist()})


def generate(spec, return_details=False):
    """Draws groups, features, then labels from the group-calibrated multinomial logit. Deterministic
    given spec.seed."""
    schema = spec.schema
    n_classes = spec.n_classes
    if spec.n == 0:
        empty = Dataset(schema, np.zeros((0, len(schema))), [], [], [], [], n_classes, spec.class_names)
        if return_details:
            return empty, GenerationDetails(np.zeros((0, n_classes)), np.zeros(0), {}, {})
        return empty

    rng = make_rng(spec.seed)
    group_names = list(spec.group_proportions)
    counts = _allocate(spec.n, spec.group_proportions)
    group_index = rng.permutation(np.repeat(np.arange(len(group_names)), counts))
    groups = np.array(group_names, dtype=object)[group_index]

    columns = collections.OrderedDict()
    for f in spec.features:
        column = np.zeros(spec.n)
        for g, group in enumerate(group_names):
            rows = np.flatnonzero(group_index == g)
            if rows.size == 0:
                continue
            params = dict(f['params'])
            params.update(f.get('group_params', {}).get(group, {}))
            sub_columns = {name: values[rows] for name, values in columns.items()}
            column[rows] = _draw(rng, f['family'], params, rows.size, sub_columns)
        columns[f['name']] = column
    features = np.column_stack([columns[name] for name in schema.names])
    uniforms = rng.random(spec.n)

    linear = np.zeros((spec.n, n_classes))
    for term in spec.terms:
        linear += np.outer(shape_value(term['shape'], columns[term['feature']]), term['coef'])

    scores = np.zeros_like(linear)
    labels = np.zeros(spec.n, dtype=np.int64)
    intercepts = {}
    achieved = {}
    for g, group in enumerate(group_names):
        rows = np.flatnonzero(group_index == g)
        if rows.size == 0:
            continue
        b, shares = _calibrate_intercepts(linear[rows], uniforms[rows], spec.base_rates[group], spec.tolerance,
                                          spec.max_sweeps, group)
        scores[rows] = linear[rows] + b
        labels[rows] = labels_from_scores(scores[rows], uniforms[rows])
        intercepts[group] = b.tolist()
        achieved[group] = shares.tolist()
        logger.info("Group %s: %d rows, base rates %s", group, rows.size, np.round(shares, 4).tolist())

    data = Dataset(schema, features, labels, groups, None, None, n_classes, spec.class_names)
    if return_details:
        return data, GenerationDetails(scores, uniforms, intercepts, achieved)
    return data
