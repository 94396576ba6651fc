import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from post import read_hdf5  # noqa: E402

KEYS = ('row_ids', 'groups', 'labels', 'weights', 'probabilities', 'predictions')


def check_dump(args):
    print('checking %s...' % args.dump_file)
    try:
        dump = read_hdf5(args.dump_file)
    except (OSError, KeyError) as e:
        print('%s corrupted! (%s)' % (args.dump_file, e))
        return 1
    missing = [key for key in KEYS if key not in dump]
    assert not missing, 'missing datasets: %s' % ', '.join(missing)
    n = dump['row_ids'].shape[0]
    for key in KEYS:
        assert dump[key].shape[0] == n, '%s has %d rows, expected %d' % (key, dump[key].shape[0], n)
    assert np.unique(dump['row_ids']).shape[0] == n, 'duplicate row ids'
    assert np.allclose(dump['probabilities'].sum(axis=1), 1.0, atol=args.tol), 'probabilities do not sum to 1'
    assert np.array_equal(np.argmax(dump['probabilities'], axis=1), dump['predictions']), \
        'predictions are not the argmax of the probabilities'
    print('dump consistency test passed!')

    print('training group: %s' % dump['attrs'].get('training_group'))
    for group in sorted(set(dump['groups'])):
        mask = dump['groups'] == group
        weights = dump['weights'][mask]
        shares = np.bincount(dump['predictions'][mask], weights=weights,
                             minlength=dump['probabilities'].shape[1]) / weights.sum()
        print('%-8s n=%-8d predicted shares: %s' % (group, mask.sum(), ' '.join('%.3f' % s for s in shares)))
    return 0


def get_args():
    parser = argparse.ArgumentParser()
    parser.add_argument('dump_file')
    parser.add_argument('--tol', default=1e-9, type=float)

    return parser.parse_args()


def main():
    args = get_args()
    sys.exit(check_dump(args))


if __name__ == '__main__':
    main()
