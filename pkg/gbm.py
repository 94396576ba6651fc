"""Multi-class stochastic gradient boosting with second-order (Newton) regression trees."""
import copy
import json
import logging

import numpy as np
from scipy.special import logsumexp
from scipy.special import softmax as _softmax
from tqdm import tqdm as tqdm_

from data import RNG_ALGORITHM, Schema, SchemaError, make_rng

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'risk-boost-model'
MODEL_VERSION = 1
# Relative margin a candidate split must win by; closer gains count as ties and keep the earlier candidate.
GAIN_TOL = 1e-12


def tqdm(*args, mininterval=5.0, **kwargs):
    return tqdm_(*args, mininterval=mininterval, **kwargs)


class NumericError(ValueError):
    pass


class FitError(ValueError):
    pass


class DegenerateClassError(ValueError):
    pass


class GbmConfig(object):
    """Configuration of the boosted ensemble.

    Args:
        n_classes: number of outcome classes K (>= 2).
        n_rounds: boosting rounds; each round fits K trees.
        learning_rate: shrinkage applied to every leaf value, in (0, 1].
        max_depth: maximum number of splits on any root-to-leaf path.
        min_child_weight: minimum summed hessian in each child of an accepted split.
        subsample: fraction of rows drawn (without replacement) per round, in (0, 1].
        seed: seed of the row-subsampling stream.
        reg_lambda: L2 penalty on leaf values.
    """

    def __init__(self,
                 n_classes=3,
                 n_rounds=300,
                 learning_rate=0.1,
                 max_depth=4,
                 min_child_weight=1.0,
                 subsample=0.8,
                 seed=0,
                 reg_lambda=1.0):
        if int(n_classes) < 2:
            raise ValueError("Invalid n_classes: {} - should be >= 2".format(n_classes))
        if int(n_rounds) < 0:
            raise ValueError("Invalid n_rounds: {} - should be >= 0".format(n_rounds))
        if not 0.0 < learning_rate <= 1.0:
            raise ValueError("Invalid learning_rate: {} - should be in (0, 1]".format(learning_rate))
        if int(max_depth) < 1:
            raise ValueError("Invalid max_depth: {} - should be >= 1".format(max_depth))
        if not min_child_weight >= 0.0:
            raise ValueError("Invalid min_child_weight: {} - should be >= 0".format(min_child_weight))
        if not 0.0 < subsample <= 1.0:
            raise ValueError("Invalid subsample: {} - should be in (0, 1]".format(subsample))
        if not reg_lambda >= 0.0:
            raise ValueError("Invalid reg_lambda: {} - should be >= 0".format(reg_lambda))
        self.n_classes = int(n_classes)
        self.n_rounds = int(n_rounds)
        self.learning_rate = float(learning_rate)
        self.max_depth = int(max_depth)
        self.min_child_weight = float(min_child_weight)
        self.subsample = float(subsample)
        self.seed = int(seed)
        self.reg_lambda = float(reg_lambda)

    def replace(self, **overrides):
        params = self.to_dict()
        params.update(overrides)
        return GbmConfig.from_dict(params)

    @classmethod
    def from_dict(cls, json_object):
        """Constructs a `GbmConfig` from a Python dictionary of parameters."""
        params = copy.deepcopy(json_object)
        unknown = set(params) - set(cls().__dict__)
        if unknown:
            raise ValueError("Unknown GbmConfig parameters: {}".format(", ".join(sorted(unknown))))
        return cls(**params)

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, "r") as reader:
            text = reader.read()
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return copy.deepcopy(self.__dict__)

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class Tree(object):
    """Flat binary regression tree; node 0 is the root and `feature == -1` marks a leaf.

    Routing: value < threshold goes left, value >= threshold goes right.
    """

    def __init__(self, feature, threshold, left, right, value, gain, cover):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.gain = np.asarray(gain, dtype=np.float64)
        self.cover = np.asarray(cover, dtype=np.float64)

    def __len__(self):
        return self.feature.shape[0]

    @property
    def n_leaves(self):
        return int(np.sum(self.feature < 0))

    def is_leaf(self, node):
        return self.feature[node] < 0

    def predict(self, features):
        features = np.asarray(features, dtype=np.float64)
        node = np.zeros(features.shape[0], dtype=np.int64)
        while True:
            split_feature = self.feature[node]
            active = np.flatnonzero(split_feature >= 0)
            if active.size == 0:
                break
            at = node[active]
            go_left = features[active, split_feature[active]] < self.threshold[at]
            node[active] = np.where(go_left, self.left[at], self.right[at])
        return self.value[node]

    def splits(self):
        """(node, feature, threshold, gain) for every internal node in preorder."""
        return [(i, int(self.feature[i]), float(self.threshold[i]), float(self.gain[i]))
                for i in range(len(self)) if self.feature[i] >= 0]

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['feature'], json_object['threshold'], json_object['left'], json_object['right'],
                   json_object['value'], json_object['gain'], json_object['cover'])

    def to_dict(self):
        return {
            'feature': self.feature.tolist(),
            'threshold': self.threshold.tolist(),
            'left': self.left.tolist(),
            'right': self.right.tolist(),
            'value': self.value.tolist(),
            'gain': self.gain.tolist(),
            'cover': self.cover.tolist(),
        }


def softmax(scores):
    """Overflow-safe softmax over the last axis: exp(s - max) / sum exp(s - max)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError('Non-finite score in %r' % (scores,))
    return _softmax(scores, axis=-1)


def deviance_grad_hess(label, p, weight):
    """Gradient and diagonal hessian of the weighted multinomial deviance w.r.t. the K scores."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[0]:
        raise ValueError('Invalid label: %d - should be in 0..%d' % (label, p.shape[0] - 1))
    if weight < 0:
        raise ValueError('Invalid weight: %r - should be >= 0' % weight)
    target = np.zeros_like(p)
    target[label] = 1.0
    return weight * (p - target), weight * p * (1.0 - p)


def multinomial_deviance(scores, labels, weights):
    """Weighted negative log-likelihood of softmax(scores) at the observed labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    nll = logsumexp(scores, axis=1) - scores[np.arange(scores.shape[0]), labels]
    return float(np.dot(np.asarray(weights, dtype=np.float64), nll))


class _TreeBuilder(object):
    def __init__(self, features, grads, hess, config):
        self.features = features
        self.grads = grads
        self.hess = hess
        self.reg_lambda = config.reg_lambda
        self.min_child_weight = config.min_child_weight
        self.max_depth = config.max_depth
        self.nodes = []

    def leaf_value(self, g_sum, h_sum):
        denom = h_sum + self.reg_lambda
        return -g_sum / denom if denom > 0 else 0.0

    def best_split(self, orders, g_sum, h_sum):
        lam = self.reg_lambda
        parent = g_sum * g_sum / (h_sum + lam) if h_sum + lam > 0 else 0.0
        best = None
        best_gain = 0.0
        for j, order in enumerate(orders):
            xs = self.features[order, j]
            if xs[0] == xs[-1]:
                continue
            g_left = np.cumsum(self.grads[order])[:-1]
            h_left = np.cumsum(self.hess[order])[:-1]
            g_right = g_sum - g_left
            h_right = h_sum - h_left
            valid = (xs[1:] > xs[:-1]) & (h_left >= self.min_child_weight) & (h_right >= self.min_child_weight)
            if not valid.any():
                continue
            with np.errstate(divide='ignore', invalid='ignore'):
                gain = 0.5 * (g_left * g_left / (h_left + lam) + g_right * g_right / (h_right + lam) - parent)
            gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
            top = gain.max()
            # lowest threshold among the (near-)maximal gains
            i = int(np.flatnonzero(gain >= top - GAIN_TOL * max(1.0, abs(top)))[0])
            if gain[i] > best_gain + GAIN_TOL * max(1.0, abs(best_gain)):
                threshold = 0.5 * (xs[i] + xs[i + 1])
                if not xs[i] < threshold:
                    threshold = xs[i + 1]
                best_gain = float(gain[i])
                best = (j, float(threshold), best_gain)
        return best

    def grow(self, rows, orders, depth):
        g_sum = float(np.sum(self.grads[rows]))
        h_sum = float(np.sum(self.hess[rows]))
        node = len(self.nodes)
        self.nodes.append([-1, 0.0, -1, -1, self.leaf_value(g_sum, h_sum), 0.0, h_sum])
        if depth >= self.max_depth or rows.shape[0] < 2:
            return node
        split = self.best_split(orders, g_sum, h_sum)
        if split is None:
            return node
        j, threshold, gain = split
        go_left = self.features[:, j] < threshold
        left_rows = rows[go_left[rows]]
        right_rows = rows[~go_left[rows]]
        left_orders = [order[go_left[order]] for order in orders]
        right_orders = [order[~go_left[order]] for order in orders]
        self.nodes[node][0:2] = [j, threshold]
        self.nodes[node][5] = gain
        self.nodes[node][2] = self.grow(left_rows, left_orders, depth + 1)
        self.nodes[node][3] = self.grow(right_rows, right_orders, depth + 1)
        return node

    def build(self):
        columns = list(zip(*self.nodes))
        return Tree(*columns)


def fit_tree(features, grads, hess, config, sorted_index=None):
    """Greedy depth-first exact split search over midpoints between distinct sorted values.

    Gain = 1/2 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)]; a split needs gain > 0 and
    min_child_weight on both sides. Equal gains resolve to the lower feature index, then the
    lower threshold. Leaf value = -G/(H+l).
    """
    features = np.asarray(features, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise FitError('fit_tree needs at least one row')
    if grads.shape[0] != features.shape[0] or hess.shape[0] != features.shape[0]:
        raise FitError('Gradient/hessian length does not match number of rows')
    if np.any(hess < 0):
        raise FitError('Hessians must be nonnegative')
    if sorted_index is None:
        sorted_index = np.argsort(features, axis=0, kind='stable')
    orders = [sorted_index[:, j] for j in range(features.shape[1])]
    builder = _TreeBuilder(features, grads, hess, config)
    builder.grow(np.arange(features.shape[0]), orders, 0)
    return builder.build()


class BoostModel(object):
    """K-class additive tree ensemble: scores = base_scores + learning_rate * sum of leaf values."""

    def __init__(self, config, base_scores, rounds, schema, training_group=None,
                 training_rows_fingerprint=None, train_trace=None):
        self.config = config
        self.base_scores = np.asarray(base_scores, dtype=np.float64)
        self.rounds = rounds
        self.schema = schema
        self.training_group = training_group
        self.training_rows_fingerprint = training_rows_fingerprint
        self.train_trace = train_trace or []
        if self.base_scores.shape[0] != config.n_classes:
            raise ValueError('Need %d base scores, got %d' % (config.n_classes, self.base_scores.shape[0]))
        for trees in rounds:
            if len(trees) != config.n_classes:
                raise ValueError('Every round must hold exactly %d trees' % config.n_classes)

    @property
    def n_classes(self):
        return self.config.n_classes

    @property
    def n_rounds(self):
        return len(self.rounds)

    def _check(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        if features.shape[1] != len(self.schema):
            raise SchemaError('Feature vector length %d does not match trained schema length %d' %
                              (features.shape[1], len(self.schema)))
        return features

    def raw_scores(self, features):
        features = self._check(features)
        scores = np.tile(self.base_scores, (features.shape[0], 1))
        lr = self.config.learning_rate
        for trees in self.rounds:
            for k, tree in enumerate(trees):
                scores[:, k] += lr * tree.predict(features)
        return scores

    def predict_proba_matrix(self, features):
        return softmax(self.raw_scores(features))

    def predict_class_matrix(self, features):
        return np.argmax(self.predict_proba_matrix(features), axis=1)

    def deviance(self, data):
        return multinomial_deviance(self.raw_scores(data.features), data.labels, data.weights)

    def schema_fingerprint(self):
        return self.schema.fingerprint()

    @classmethod
    def from_dict(cls, json_object):
        if json_object.get('format') != MODEL_FORMAT:
            raise ValueError('Not a model artifact: format=%r' % json_object.get('format'))
        if json_object.get('version') != MODEL_VERSION:
            raise ValueError('Unsupported model version: %r' % json_object.get('version'))
        schema = Schema.from_dict(json_object['schema'])
        if schema.fingerprint() != json_object['schema_fingerprint']:
            raise SchemaError('Schema fingerprint mismatch in model artifact')
        rounds = [[Tree.from_dict(t) for t in trees] for trees in json_object['trees']]
        return cls(GbmConfig.from_dict(json_object['config']), json_object['base_scores'], rounds, schema,
                   json_object.get('training_group'), json_object.get('training_rows_fingerprint'),
                   json_object.get('train_trace'))

    def to_dict(self):
        return {
            'format': MODEL_FORMAT,
            'version': MODEL_VERSION,
            'rng': RNG_ALGORITHM,
            'config': self.config.to_dict(),
            'base_scores': self.base_scores.tolist(),
            'trees': [[tree.to_dict() for tree in trees] for trees in self.rounds],
            'schema': self.schema.to_dict(),
            'schema_fingerprint': self.schema.fingerprint(),
            'training_group': self.training_group,
            'training_rows_fingerprint': self.training_rows_fingerprint,
            'train_trace': list(self.train_trace),
        }


def save_model(model, path):
    with open(path, 'w') as fp:
        json.dump(model.to_dict(), fp, indent=1, sort_keys=True)
        fp.write("\n")


def load_model(path):
    with open(path, 'r') as fp:
        return BoostModel.from_dict(json.load(fp))


def predict_proba(model, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise SchemaError('predict_proba takes a single feature vector')
    return model.predict_proba_matrix(features)[0]


def predict_class(model, features):
    """Argmax of the class probabilities; ties go to the lowest class index."""
    return int(np.argmax(predict_proba(model, features)))


def train(data, config, training_group=None, callback=None):
    """Fits K trees per round on the gradients/hessians of the weighted multinomial deviance.

    Base scores are the log weighted class proportions. With subsample < 1 each round draws
    round(subsample * n) rows without replacement from the seeded stream. `callback(round, deviance)`
    runs after every round.
    """
    n = len(data)
    if n == 0:
        raise FitError('Cannot train on an empty dataset')
    n_classes = config.n_classes
    if data.n_classes > n_classes:
        raise ValueError('Data has %d classes but config.n_classes is %d' % (data.n_classes, n_classes))
    totals = np.bincount(data.labels, weights=data.weights, minlength=n_classes)
    for k in range(n_classes):
        if not totals[k] > 0:
            raise DegenerateClassError('Class %d has zero total weight in the training data' % k)

    features = data.features
    weights = data.weights
    base_scores = np.log(totals / totals.sum())
    scores = np.tile(base_scores, (n, 1))
    target = np.zeros((n, n_classes))
    target[np.arange(n), data.labels] = 1.0
    rng = make_rng(config.seed)
    full_index = np.argsort(features, axis=0, kind='stable') if config.subsample >= 1.0 else None
    sample_size = max(1, int(round(config.subsample * n)))

    logger.info("***** Running training *****")
    logger.info("  Num rows = %d", n)
    logger.info("  Num features = %d", features.shape[1])
    logger.info("  Num classes = %d", n_classes)
    logger.info("  Num rounds = %d", config.n_rounds)
    if training_group is not None:
        logger.info("  Training group = %s", training_group)

    trace = [multinomial_deviance(scores, data.labels, weights)]
    rounds = []
    for _ in tqdm(range(config.n_rounds), desc='Boosting'):
        p = softmax(scores)
        grads = weights[:, None] * (p - target)
        hess = weights[:, None] * p * (1.0 - p)
        if full_index is None:
            sample = np.sort(rng.choice(n, size=sample_size, replace=False))
            sample_features = features[sample]
            sample_index = np.argsort(sample_features, axis=0, kind='stable')
        trees = []
        for k in range(n_classes):
            if full_index is None:
                tree = fit_tree(sample_features, grads[sample, k], hess[sample, k], config, sample_index)
            else:
                tree = fit_tree(features, grads[:, k], hess[:, k], config, full_index)
            trees.append(tree)
        for k, tree in enumerate(trees):
            scores[:, k] += config.learning_rate * tree.predict(features)
        rounds.append(trees)
        trace.append(multinomial_deviance(scores, data.labels, weights))
        if callback is not None:
            callback(len(rounds), trace[-1])

    logger.info("  Final training deviance = %.4f", trace[-1])
    return BoostModel(config, base_scores, rounds, data.schema, training_group, data.rows_fingerprint(), trace)
