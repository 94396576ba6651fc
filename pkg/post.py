"""Report and artifact writers: canonical JSON, plot-ready CSV, forecasting-table markdown and HDF5
prediction dumps."""
import collections
import json
import logging
import math
import os

import numpy as np
import pandas as pd

from interpret import curve_rows

logger = logging.getLogger(__name__)


def to_native(obj):
    """Recursively converts numpy scalars/arrays and namedtuples to JSON types; NaN and inf become None."""
    if isinstance(obj, tuple) and hasattr(obj, '_asdict'):
        return to_native(obj._asdict())
    if isinstance(obj, dict):
        return collections.OrderedDict((str(k), to_native(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return [to_native(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_native(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    return obj


def dumps(obj):
    return json.dumps(to_native(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(obj, path):
    with open(path, 'w') as fp:
        fp.write(dumps(obj))
    logger.debug("Wrote %s", path)
    return path


def write_text(text, path):
    with open(path, 'w') as fp:
        fp.write(text)
    return path


def _class_labels(n_classes, class_names=None):
    if class_names is not None:
        return list(class_names)
    return ['class %d' % k for k in range(n_classes)]


def _fmt_count(value):
    return '%d' % value if float(value).is_integer() else '%.2f' % value


def _fmt_error(value):
    return '' if value is None or np.isnan(value) else '%.2f' % value


def render_confusion_md(report, class_names=None, title=None):
    """Observed classes as rows, forecasts as columns, classification error per row and prediction
    error per column; the caption line gives the predicted-class shares in percent."""
    labels = _class_labels(report.n_classes, class_names)
    lines = []
    if title:
        lines.append('### %s' % title)
        lines.append('')
    lines.append('| | ' + ' | '.join('Forecast %s' % l for l in labels) + ' | Classification Error |')
    lines.append('|' + '---|' * (report.n_classes + 2))
    for i, label in enumerate(labels):
        cells = [_fmt_count(v) for v in report.counts[i]]
        lines.append('| %s | %s | %s |' % (label, ' | '.join(cells), _fmt_error(report.row_errors[i])))
    lines.append('| Prediction Error | %s | |' % ' | '.join(_fmt_error(v) for v in report.col_errors))
    lines.append('')
    shares = ', '.join('%s %d%%' % (l, int(round(100 * s))) for l, s in zip(labels, report.predicted_shares))
    lines.append('Predicted shares (group %s, n = %s): %s' % (report.group, _fmt_count(report.n), shares))
    return '\n'.join(lines) + '\n'


def confusion_frame(report, class_names=None):
    labels = _class_labels(report.n_classes, class_names)
    frame = pd.DataFrame(report.counts, index=labels, columns=labels)
    frame['classification_error'] = report.row_errors
    frame.loc['prediction_error'] = list(report.col_errors) + [np.nan]
    frame.index.name = 'observed'
    return frame


def write_confusion(report, out_dir, class_names=None, training_group=None):
    """{group}-confusion.json|.md|.csv"""
    stem = os.path.join(out_dir, '%s-confusion' % report.group)
    payload = report.to_dict()
    payload['training_group'] = training_group
    write_json(payload, stem + '.json')
    write_text(render_confusion_md(report, class_names, 'Group %s' % report.group), stem + '.md')
    confusion_frame(report, class_names).to_csv(stem + '.csv', float_format='%r', lineterminator='\n')
    return [stem + ext for ext in ('.json', '.md', '.csv')]


def render_audit_md(bundle, class_names=None):
    lines = ['# Audit', '', 'Training group: %s' % (bundle.training_group or 'all'), '']
    for group, report in bundle.reports.items():
        lines.append(render_confusion_md(report, class_names, 'Group %s' % group))
    disparities = bundle.disparities()
    if disparities:
        labels = _class_labels(next(iter(bundle.reports.values())).n_classes, class_names)
        lines.append('### Disparities (a - b)')
        lines.append('')
        lines.append('| groups | metric | ' + ' | '.join(labels) + ' |')
        lines.append('|' + '---|' * (len(labels) + 2))
        for d in disparities:
            pair = '%s - %s' % tuple(d['groups'])
            lines.append('| %s | predicted share | %s |' % (pair, ' | '.join('%+.3f' % v for v in d['predicted_shares'])))
            lines.append('| %s | prediction error | %s |' %
                         (pair, ' | '.join('' if v is None else '%+.3f' % v for v in d['col_errors'])))
        lines.append('')
    return '\n'.join(lines)


def render_comparison_md(comparison, class_names=None):
    labels = _class_labels(comparison['n_classes'], class_names)
    lines = ['| a | b | metric | ' + ' | '.join(labels) + ' |', '|' + '---|' * (len(labels) + 3)]
    for row in comparison['comparisons']:
        a, b = row['groups']
        for metric, name in (('predicted_shares', 'predicted share'), ('col_errors', 'prediction error')):
            values = row[metric]
            for key in ('a', 'b'):
                cells = ' | '.join(_fmt_error(v) for v in _nan_list(values[key]))
                lines.append('| %s | %s | %s (%s) | %s |' % (a, b, name, key, cells))
            lines.append('| %s | %s | %s (a - b) | %s |' % (
                a, b, name, ' | '.join('' if v is None else '%+.3f' % v for v in values['diff'])))
    return '\n'.join(lines) + '\n'


def _nan_list(values):
    return [np.nan if v is None else v for v in values]


def write_importance(report, out_dir):
    """importance.json keeps schema order and adds the ranked view; importance.csv is ranked."""
    payload = report.to_dict()
    payload['ranked'] = [{'name': n, 'share': s} for n, s in report.ranked()]
    write_json(payload, os.path.join(out_dir, 'importance.json'))
    frame = pd.DataFrame(report.ranked(), columns=['feature', 'share'])
    frame.to_csv(os.path.join(out_dir, 'importance.csv'), index=False, float_format='%r', lineterminator='\n')


def write_pdp(curve, out_dir):
    stem = os.path.join(out_dir, 'pdp-%s' % curve.feature)
    write_json(curve.to_dict(), stem + '.json')
    frame = pd.DataFrame([r._asdict() for r in curve_rows(curve)])
    frame.to_csv(stem + '.csv', index=False, float_format='%r', lineterminator='\n')


def write_hdf5(hdf5_path, test, probabilities, predictions, training_group=None, schema_fingerprint=None):
    """Per-row prediction dump: row ids, groups, labels, weights, class probabilities, forecasts."""
    import h5py

    if len(test) == 0:
        raise ValueError('Nothing to dump: empty test set')
    with h5py.File(hdf5_path, 'w') as f:
        f.create_dataset('row_ids', data=np.asarray(test.row_ids))
        f.create_dataset('groups', data=np.array([g.encode('utf-8') for g in test.groups]))
        f.create_dataset('labels', data=np.asarray(test.labels))
        f.create_dataset('weights', data=np.asarray(test.weights))
        f.create_dataset('probabilities', data=np.asarray(probabilities, dtype=np.float64))
        f.create_dataset('predictions', data=np.asarray(predictions, dtype=np.int64))
        f.attrs['training_group'] = training_group or 'all'
        if schema_fingerprint is not None:
            f.attrs['schema_fingerprint'] = schema_fingerprint
        f.attrs['feature_names'] = np.array([n.encode('utf-8') for n in test.schema.names])
    logger.info("Dumped %d predictions to %s", len(test), hdf5_path)


def read_hdf5(hdf5_path):
    import h5py

    with h5py.File(hdf5_path, 'r') as f:
        out = {key: f[key][()] for key in f.keys()}
        out['groups'] = np.array([g.decode('utf-8') for g in out['groups']], dtype=object)
        out['attrs'] = dict(f.attrs)
    return out
