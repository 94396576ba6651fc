"""Tabular offender data: schema, weighted rows, CSV/JSON ingestion, exclusions and splits."""
import collections
import hashlib
import json
import logging

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

KINDS = ('count', 'years', 'binary', 'category')
FLAGS = ('discretionary_prior', 'juvenile_prior', 'serious_prior', 'instant_charge', 'biographical')
ALL_GROUPS = 'all'

# Every random draw in the package goes through this bit generator; its name is written to manifests.
RNG_ALGORITHM = 'PCG64'

DATASET_FORMAT = 'risk-dataset'
DATASET_VERSION = 1

Feature = collections.namedtuple('Feature', ['name', 'kind', 'flags'])
SplitPair = collections.namedtuple('SplitPair', ['train', 'test', 'seed'])


class SchemaError(ValueError):
    pass


class EmptySchemaError(SchemaError):
    pass


class ParseError(ValueError):
    def __init__(self, message, row=None, column=None):
        super(ParseError, self).__init__(message)
        self.row = row
        self.column = column


class LabelError(ValueError):
    pass


class SplitSizeError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


def make_rng(seed, *stream):
    """Seeded PCG64 generator; `stream` derives an independent child stream, e.g. (cell index,)."""
    if stream:
        seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    else:
        seq = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.PCG64(seq))


def _sha256(*chunks):
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk if isinstance(chunk, bytes) else str(chunk).encode('utf-8'))
    return h.hexdigest()


def _readonly(array):
    array.setflags(write=False)
    return array


class Schema(object):
    """Ordered feature list with a semantic kind and policy flags per feature."""

    def __init__(self, features):
        out = []
        seen = set()
        for feature in features:
            if isinstance(feature, dict):
                feature = (feature['name'], feature['kind'], feature.get('flags', ()))
            name, kind, flags = feature
            if not name:
                raise SchemaError('Feature names must be nonempty')
            if name in seen:
                raise SchemaError('Duplicate feature name: %s' % name)
            if kind not in KINDS:
                raise SchemaError('Invalid kind for %s: %s - should be one of %s' % (name, kind, ', '.join(KINDS)))
            flags = frozenset(flags)
            unknown = flags - set(FLAGS)
            if unknown:
                raise SchemaError('Unknown flags for %s: %s' % (name, ', '.join(sorted(unknown))))
            seen.add(name)
            out.append(Feature(name, kind, flags))
        self.features = tuple(out)
        self._index = {f.name: i for i, f in enumerate(self.features)}

    def __len__(self):
        return len(self.features)

    def __eq__(self, other):
        return isinstance(other, Schema) and self.features == other.features

    def __ne__(self, other):
        return not self == other

    def __repr__(self):
        return 'Schema(%s)' % ', '.join(f.name for f in self.features)

    @property
    def names(self):
        return [f.name for f in self.features]

    def index(self, name):
        if name not in self._index:
            raise SchemaError('Feature not in schema: %s' % name)
        return self._index[name]

    def kind(self, name):
        return self.features[self.index(name)].kind

    def with_flags(self, flags):
        """Names of features carrying any of `flags`."""
        flags = set(flags)
        return [f.name for f in self.features if f.flags & flags]

    def resolve(self, selector):
        """Resolves a feature name, a list of names or a set of flags to feature indices.

        A dict selector `{"flags": [...]}` selects by flag; a string or list selects by name.
        """
        if isinstance(selector, dict):
            names = self.with_flags(selector['flags'])
        elif isinstance(selector, str):
            names = [selector]
        else:
            names = list(selector)
        if not names:
            raise SchemaError('Selector %r matches no feature' % (selector,))
        return [self.index(name) for name in names]

    def project(self, keep):
        return Schema([self.features[i] for i in keep])

    def fingerprint(self):
        return _sha256(self.to_json_string())

    @classmethod
    def from_dict(cls, json_object):
        return cls(json_object['features'])

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, 'r') as reader:
            return cls.from_dict(json.load(reader))

    def to_dict(self):
        return {'features': [{'name': f.name, 'kind': f.kind, 'flags': sorted(f.flags)} for f in self.features]}

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class Dataset(object):
    """Immutable weighted rows governed by a Schema.

    The group tag is row metadata and is never part of the feature matrix.
    """

    def __init__(self, schema, features, labels, groups, weights=None, row_ids=None, n_classes=None,
                 class_names=None):
        features = np.array(features, dtype=np.float64).reshape(-1, len(schema)) if len(schema) else None
        if features is None:
            raise EmptySchemaError('Dataset needs at least one feature')
        n = features.shape[0]
        labels = np.array(labels, dtype=np.int64).reshape(-1)
        groups = np.array([str(g) for g in groups], dtype=object).reshape(-1)
        weights = np.ones(n) if weights is None else np.array(weights, dtype=np.float64).reshape(-1)
        row_ids = np.arange(n, dtype=np.int64) if row_ids is None else np.array(row_ids, dtype=np.int64).reshape(-1)

        for name, array in (('labels', labels), ('groups', groups), ('weights', weights), ('row_ids', row_ids)):
            if array.shape[0] != n:
                raise SchemaError('Length of %s (%d) does not match number of rows (%d)' % (name, array.shape[0], n))
        if class_names is not None:
            class_names = [str(c) for c in class_names]
            if n_classes is None:
                n_classes = len(class_names)
        if n_classes is None:
            n_classes = int(labels.max()) + 1 if n else 0
        if n and (labels.min() < 0 or labels.max() >= n_classes):
            raise LabelError('Labels must lie in 0..%d' % (n_classes - 1))
        if not np.all(np.isfinite(features)):
            raise ParseError('Feature matrix holds non-finite values')
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError('Row weights must be finite and nonnegative')
        if n and not np.any(weights > 0):
            raise ValueError('At least one row must have positive weight')
        if ALL_GROUPS in set(groups):
            raise SchemaError('Group id %r is reserved' % ALL_GROUPS)

        self.schema = schema
        self.features = _readonly(features)
        self.labels = _readonly(labels)
        self.groups = _readonly(groups)
        self.weights = _readonly(weights)
        self.row_ids = _readonly(row_ids)
        self.n_classes = int(n_classes)
        self.class_names = class_names

    def __len__(self):
        return self.features.shape[0]

    def __repr__(self):
        return 'Dataset(n=%d, features=%d, classes=%d, groups=%s)' % (
            len(self), len(self.schema), self.n_classes, ','.join(self.group_ids()))

    @property
    def n(self):
        return len(self)

    def group_ids(self):
        return sorted(set(self.groups))

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.schema, self.features[index], self.labels[index], self.groups[index],
                       self.weights[index], self.row_ids[index], self.n_classes, self.class_names)

    def replace(self, schema=None, features=None, weights=None, groups=None):
        """Copy with some parts swapped; labels, row ids and classes are kept."""
        return Dataset(self.schema if schema is None else schema,
                       self.features if features is None else features,
                       self.labels,
                       self.groups if groups is None else groups,
                       self.weights if weights is None else weights,
                       self.row_ids, self.n_classes, self.class_names)

    def class_weight_totals(self):
        return np.bincount(self.labels, weights=self.weights, minlength=self.n_classes)

    def column(self, name):
        return self.features[:, self.schema.index(name)]

    def fingerprint(self):
        return _sha256(self.schema.to_json_string(), self.features.tobytes(), self.labels.tobytes(),
                       '\x1f'.join(self.groups), self.weights.tobytes(), self.row_ids.tobytes())

    def rows_fingerprint(self):
        return _sha256(np.sort(self.row_ids).tobytes())

    @classmethod
    def from_dict(cls, json_object):
        if json_object.get('format') != DATASET_FORMAT:
            raise ValueError('Not a dataset container: format=%r' % json_object.get('format'))
        if json_object.get('version') != DATASET_VERSION:
            raise ValueError('Unsupported dataset version: %r' % json_object.get('version'))
        schema = Schema.from_dict(json_object['schema'])
        features = json_object['features']
        if not features:
            features = np.zeros((0, len(schema)))
        return cls(schema, features, json_object['labels'], json_object['groups'], json_object['weights'],
                   json_object['row_ids'], json_object['n_classes'], json_object.get('class_names'))

    def to_dict(self):
        return {
            'format': DATASET_FORMAT,
            'version': DATASET_VERSION,
            'schema': self.schema.to_dict(),
            'n_classes': self.n_classes,
            'class_names': self.class_names,
            'features': self.features.tolist(),
            'labels': self.labels.tolist(),
            'groups': list(self.groups),
            'weights': self.weights.tolist(),
            'row_ids': self.row_ids.tolist(),
        }


def save_json(data, path):
    with open(path, 'w') as fp:
        json.dump(data.to_dict(), fp, sort_keys=True)
        fp.write("\n")


def load_json(path):
    with open(path, 'r') as fp:
        return Dataset.from_dict(json.load(fp))


def _parse_float_column(values, column):
    try:
        out = np.asarray(values, dtype=np.float64)
    except ValueError:
        for row, cell in enumerate(values, start=1):
            if cell.strip() == '':
                raise ParseError('Missing value in column %s at row %d' % (column, row), row=row, column=column)
            try:
                float(cell)
            except ValueError:
                raise ParseError('Non-numeric value %r in column %s at row %d' % (cell, column, row),
                                 row=row, column=column)
        raise
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        row = int(bad[0]) + 1
        raise ParseError('Non-finite value in column %s at row %d' % (column, row), row=row, column=column)
    return out


def _parse_labels(values, class_names):
    labels = np.empty(len(values), dtype=np.int64)
    lookup = {name: i for i, name in enumerate(class_names)} if class_names is not None else None
    for row, cell in enumerate(values, start=1):
        cell = cell.strip()
        if lookup is not None:
            if cell not in lookup:
                raise LabelError('Unknown label %r at row %d' % (cell, row))
            labels[row - 1] = lookup[cell]
            continue
        try:
            label = int(cell)
        except ValueError:
            raise LabelError('Unknown label %r at row %d' % (cell, row))
        if label < 0:
            raise LabelError('Unknown label %r at row %d' % (cell, row))
        labels[row - 1] = label
    return labels


def load_csv(path, schema, label_column, group_column, default_group=None, class_names=None,
             weight_column=None):
    """Reads an RFC-4180 CSV (header required, UTF-8) into a Dataset.

    Labels are class indices unless `class_names` maps names to indices. Missing values are rejected.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    columns = set(frame.columns)
    for name in schema.names + [label_column]:
        if name not in columns:
            raise SchemaError('Missing column: %s' % name)
    if group_column not in columns and default_group is None:
        raise SchemaError('Missing column: %s' % group_column)

    features = np.zeros((len(frame), len(schema)))
    for j, name in enumerate(schema.names):
        features[:, j] = _parse_float_column(frame[name].tolist(), name)
    labels = _parse_labels(frame[label_column].tolist(), class_names)
    if group_column in columns:
        groups = [g.strip() for g in frame[group_column].tolist()]
    else:
        groups = [str(default_group)] * len(frame)
    weights = None
    if weight_column is not None and weight_column in columns:
        weights = _parse_float_column(frame[weight_column].tolist(), weight_column)

    data = Dataset(schema, features, labels, groups, weights, class_names=class_names)
    logger.info("Loaded %s: %d rows, %d features, %d classes", path, len(data), len(schema), data.n_classes)
    return data


def write_csv(data, path, label_column='label', group_column='group', weight_column='weight'):
    """Writes a Dataset so that `load_csv` reproduces it exactly (floats use repr)."""
    columns = collections.OrderedDict()
    for j, name in enumerate(data.schema.names):
        columns[name] = [repr(float(v)) for v in data.features[:, j]]
    if data.class_names is not None:
        columns[label_column] = [data.class_names[k] for k in data.labels]
    else:
        columns[label_column] = [str(k) for k in data.labels]
    columns[group_column] = list(data.groups)
    columns[weight_column] = [repr(float(v)) for v in data.weights]
    pd.DataFrame(columns).to_csv(path, index=False, encoding='utf-8', lineterminator='\n')


def apply_exclusions(data, drop_flags):
    """Drops every feature carrying any of `drop_flags`, identically for all groups."""
    drop_flags = set(drop_flags)
    unknown = drop_flags - set(FLAGS)
    if unknown:
        raise SchemaError('Unknown exclusion flags: %s' % ', '.join(sorted(unknown)))
    if not drop_flags:
        return data
    keep = [i for i, f in enumerate(data.schema.features) if not (f.flags & drop_flags)]
    if not keep:
        raise EmptySchemaError('Excluding %s drops every feature' % ', '.join(sorted(drop_flags)))
    dropped = [f.name for f in data.schema.features if f.flags & drop_flags]
    if dropped:
        logger.info("Excluded %d predictors: %s", len(dropped), ', '.join(dropped))
    return data.replace(schema=data.schema.project(keep), features=data.features[:, keep])


def split_equal(data, seed):
    """Disjoint random halves; with odd n the extra row goes to test. Row order is preserved."""
    n = len(data)
    if n < 2:
        raise SplitSizeError('Cannot split %d rows; need at least 2' % n)
    perm = make_rng(seed).permutation(n)
    n_train = n // 2
    train_index = np.sort(perm[:n_train])
    test_index = np.sort(perm[n_train:])
    return SplitPair(data.subset(train_index), data.subset(test_index), seed)


def filter_group(data, group):
    mask = data.groups == str(group)
    if not np.any(mask):
        raise EmptySelectionError('No rows with group %r' % (group,))
    return data.subset(np.flatnonzero(mask))
