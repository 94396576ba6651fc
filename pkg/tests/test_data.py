import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset, tiny_schema
from data import (Dataset, EmptySchemaError, EmptySelectionError, LabelError, ParseError, Schema, SchemaError,
                  SplitSizeError, apply_exclusions, filter_group, load_csv, load_json, make_rng, save_json,
                  split_equal, write_csv)
from synth import GeneratorSpec, generate


def test_schema_rejects_duplicates_and_unknown_kinds():
    with pytest.raises(SchemaError):
        Schema([('a', 'count', []), ('a', 'years', [])])
    with pytest.raises(SchemaError):
        Schema([('a', 'dollars', [])])
    with pytest.raises(SchemaError):
        Schema([('a', 'count', ['secret'])])


def test_schema_resolve(schema):
    assert schema.resolve('x1') == [1]
    assert schema.resolve(['x2', 'x0']) == [2, 0]
    assert schema.resolve({'flags': ['serious_prior', 'instant_charge']}) == [0, 2]
    with pytest.raises(SchemaError):
        schema.resolve({'flags': ['juvenile_prior']})


def test_dataset_invariants(schema):
    features = np.zeros((3, 3))
    with pytest.raises(LabelError):
        Dataset(schema, features, [0, 1, 3], ['W'] * 3, n_classes=3)
    with pytest.raises(ValueError):
        Dataset(schema, features, [0, 1, 2], ['W'] * 3, [1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        Dataset(schema, features, [0, 1, 2], ['W'] * 3, [0.0, 0.0, 0.0])
    with pytest.raises(SchemaError):
        Dataset(schema, features, [0, 1, 2], ['W', 'all', 'B'])
    with pytest.raises(ParseError):
        Dataset(schema, [[np.nan, 0, 0]] * 3, [0, 1, 2], ['W'] * 3)


def test_dataset_is_read_only(schema):
    data = random_dataset(0, 10)
    with pytest.raises(ValueError):
        data.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        data.weights[0] = 2.0


def test_csv_round_trip_is_exact(tmp_path):
    schema = Schema([('a', 'years', ['biographical']), ('b', 'count', ['serious_prior'])])
    data = Dataset(schema, [[0.1, 3.0], [1.0 / 3.0, 0.0], [2.5e-17, 12.0]], [0, 2, 1], ['W', 'B', 'W'],
                   [1.0, 0.7, 2.0 / 3.0], class_names=['none', 'nonviolent', 'violent'])
    path = str(tmp_path / 'rows.csv')
    write_csv(data, path)
    loaded = load_csv(path, schema, 'label', 'group', class_names=['none', 'nonviolent', 'violent'],
                      weight_column='weight')
    assert np.array_equal(loaded.features, data.features)
    assert np.array_equal(loaded.labels, data.labels)
    assert np.array_equal(loaded.weights, data.weights)
    assert list(loaded.groups) == list(data.groups)


def _write(tmp_path, text):
    path = tmp_path / 'rows.csv'
    path.write_text(text)
    return str(path)


def test_load_csv_reports_the_bad_row(tmp_path):
    schema = Schema([('a', 'count', []), ('b', 'count', [])])
    with pytest.raises(ParseError) as info:
        load_csv(_write(tmp_path, 'a,b,label,group\n1,2,0,W\n3,,1,B\n'), schema, 'label', 'group')
    assert info.value.row == 2
    assert info.value.column == 'b'
    with pytest.raises(ParseError) as info:
        load_csv(_write(tmp_path, 'a,b,label,group\n1,2,0,W\n3,4,1,B\nx,4,1,B\n'), schema, 'label', 'group')
    assert info.value.row == 3
    with pytest.raises(LabelError):
        load_csv(_write(tmp_path, 'a,b,label,group\n1,2,0,W\n3,4,-1,B\n'), schema, 'label', 'group')
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, 'a,label,group\n1,0,W\n'), schema, 'label', 'group')


def test_load_csv_default_group(tmp_path):
    schema = Schema([('a', 'count', [])])
    data = load_csv(_write(tmp_path, 'a,label\n1,0\n2,1\n'), schema, 'label', 'group', default_group='W')
    assert list(data.groups) == ['W', 'W']
    with pytest.raises(SchemaError):
        load_csv(_write(tmp_path, 'a,label\n1,0\n2,1\n'), schema, 'label', 'group')


def test_json_round_trip(tmp_path):
    data = random_dataset(3, 25)
    path = str(tmp_path / 'rows.json')
    save_json(data, path)
    assert load_json(path).fingerprint() == data.fingerprint()


def test_empty_dataset_round_trip(tmp_path):
    data = Dataset(tiny_schema(), np.zeros((0, 3)), [], [], n_classes=3)
    path = str(tmp_path / 'empty.json')
    save_json(data, path)
    loaded = load_json(path)
    assert len(loaded) == 0
    assert loaded.n_classes == 3


def test_exclusions_drop_flagged_features_for_everyone():
    data = random_dataset(1, 20)
    out = apply_exclusions(data, ['serious_prior'])
    assert out.schema.names == ['x1', 'x2']
    assert np.array_equal(out.features, data.features[:, 1:])
    assert list(out.groups) == list(data.groups)
    assert apply_exclusions(data, []) is data
    with pytest.raises(SchemaError):
        apply_exclusions(data, ['not_a_flag'])
    with pytest.raises(EmptySchemaError):
        apply_exclusions(data, ['serious_prior', 'biographical', 'instant_charge'])


def test_exclusions_on_the_generated_schema_are_idempotent():
    data = generate(GeneratorSpec.default(n=50, seed=0))
    flags = ['discretionary_prior', 'juvenile_prior']
    once = apply_exclusions(data, flags)
    assert once.schema.names == ['age', 'age_first_adult', 'male', 'Aproperty', 'Aviolent', 'Aweapons',
                                 'iproperty', 'iviolent', 'iweapons']
    assert all(f.flags <= {'serious_prior', 'instant_charge', 'biographical'} for f in once.schema.features)
    twice = apply_exclusions(once, flags)
    assert twice.schema == once.schema
    assert np.array_equal(twice.features, once.features)


@given(st.integers(2, 300), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_split_equal_partitions_rows(n, seed):
    data = random_dataset(0, n)
    split = split_equal(data, seed)
    train_ids = set(split.train.row_ids.tolist())
    test_ids = set(split.test.row_ids.tolist())
    assert not train_ids & test_ids
    assert train_ids | test_ids == set(range(n))
    assert len(split.train) == n // 2
    assert len(split.test) == n - n // 2
    again = split_equal(data, seed)
    assert np.array_equal(again.train.row_ids, split.train.row_ids)


def test_split_rejects_tiny_inputs():
    data = Dataset(tiny_schema(), np.zeros((1, 3)), [0], ['W'], n_classes=3)
    with pytest.raises(SplitSizeError):
        split_equal(data, 0)


def test_filter_group():
    data = random_dataset(2, 30)
    white = filter_group(data, 'W')
    assert set(white.groups) == {'W'}
    with pytest.raises(EmptySelectionError):
        filter_group(data, 'other')


def test_rng_streams():
    assert np.array_equal(make_rng(5).random(4), make_rng(5).random(4))
    assert not np.array_equal(make_rng(5, 0).random(4), make_rng(5, 1).random(4))
