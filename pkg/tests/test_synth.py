import collections

import numpy as np
import pytest

from synth import (CLASS_NAMES, PUBLISHED_BASE_RATES, GeneratorSpec, _allocate, _calibrate_intercepts,
                   close_rounding_gap, default_spec, generate, labels_from_scores, shape_value)


def test_generation_is_deterministic():
    spec = GeneratorSpec.default(n=800, seed=3)
    a, b = generate(spec), generate(spec)
    assert a.fingerprint() == b.fingerprint()
    assert generate(spec.replace(seed=4)).fingerprint() != a.fingerprint()
    assert a.class_names == CLASS_NAMES


def test_empty_population():
    data = generate(GeneratorSpec.default(n=0))
    assert len(data) == 0
    assert data.n_classes == 3
    assert data.schema.names == GeneratorSpec.default().schema.names


def test_group_counts_use_largest_remainder():
    proportions = collections.OrderedDict([('W', 0.32), ('B', 0.67), ('other', 0.01)])
    assert _allocate(1000, proportions).tolist() == [320, 670, 10]
    assert _allocate(7, collections.OrderedDict([('a', 0.5), ('b', 0.5)])).tolist() == [4, 3]
    assert _allocate(101, proportions).sum() == 101
    data = generate(GeneratorSpec.default(n=1000, seed=1))
    assert collections.Counter(data.groups) == {'W': 320, 'B': 670, 'other': 10}


def test_without_other_group():
    spec = GeneratorSpec.default(n=300, include_other=False)
    assert list(spec.group_proportions) == ['W', 'B']
    assert sum(spec.group_proportions.values()) == pytest.approx(1.0, abs=1e-15)
    assert set(generate(spec).groups) == {'W', 'B'}


def test_labels_follow_from_scores_and_uniforms():
    data, details = generate(GeneratorSpec.default(n=500, seed=2), return_details=True)
    assert np.array_equal(labels_from_scores(details.scores, details.uniforms), data.labels)
    assert set(details.intercepts) == {'W', 'B', 'other'}
    assert all(b[0] == 0.0 for b in details.intercepts.values())


def test_labels_from_scores_inverse_cdf():
    scores = np.log([[0.5, 0.3, 0.2]] * 4)
    assert labels_from_scores(scores, [0.1, 0.6, 0.85, 0.999]).tolist() == [0, 1, 2, 2]


def test_features_respect_their_ranges(population):
    age = population.column('age')
    assert age.min() >= 16 and age.max() <= 90
    assert np.all(population.column('age_first_adult') <= age)
    counts = population.features[:, [population.schema.kind(n) == 'count' for n in population.schema.names]]
    assert np.all(counts >= 0) and np.array_equal(counts, np.floor(counts))
    assert set(np.unique(population.column('male'))) <= {0.0, 1.0}


def test_black_rows_carry_longer_serious_records(population):
    black = population.column('Aproperty')[population.groups == 'B']
    white = population.column('Aproperty')[population.groups == 'W']
    assert black.mean() > white.mean() + 0.5


def test_population_hits_group_base_rates():
    spec = GeneratorSpec.default(n=6000, seed=7)
    data, details = generate(spec, return_details=True)
    for group, rates in spec.base_rates.items():
        rows = data.groups == group
        shares = np.bincount(data.labels[rows], minlength=3) / float(rows.sum())
        assert np.allclose(shares, details.achieved[group], atol=1e-12)
        assert np.max(np.abs(shares - rates)) <= max(spec.tolerance, 1.0 / rows.sum()) + 1e-12


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(4))
def test_full_size_population_base_rates(seed):
    spec = GeneratorSpec.default(seed=seed)
    data = generate(spec)
    assert len(data) == 100000
    for group in ('W', 'B'):
        rows = data.groups == group
        shares = np.bincount(data.labels[rows], minlength=3) / float(rows.sum())
        assert np.allclose(shares, spec.base_rates[group], atol=0.001 + 1e-12)
        assert np.allclose(shares, PUBLISHED_BASE_RATES[group], atol=0.005)
    assert collections.Counter(data.groups) == {'W': 32000, 'B': 67000, 'other': 1000}


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(10))
def test_mid_size_populations_calibrate(seed):
    spec = GeneratorSpec.default(n=20000, seed=seed)
    data, details = generate(spec, return_details=True)
    for group, rates in spec.base_rates.items():
        n_group = int((data.groups == group).sum())
        assert np.max(np.abs(np.array(details.achieved[group]) - rates)) <= max(spec.tolerance, 1.0 / n_group) + 1e-12


def test_shape_values():
    assert shape_value('first_charge', [16, 30, 50]).tolist() == pytest.approx([1.0, 0.0, 0.3])
    assert shape_value('age_peak', [20, 31.5, 60]).tolist() == pytest.approx([1.0, 0.5, 0.0])
    assert shape_value('log1p', [0.0]).tolist() == [0.0]
    with pytest.raises(ValueError):
        shape_value('cubic', [1.0])


def test_spec_round_trip():
    spec = GeneratorSpec.default(n=1234, seed=9)
    again = GeneratorSpec.from_dict(spec.to_dict())
    assert again.to_json_string() == spec.to_json_string()
    assert again.spec_hash() == spec.spec_hash()
    assert spec.replace(n=10).spec_hash() != spec.spec_hash()


def test_invalid_specs():
    spec = GeneratorSpec.default(n=10).to_dict()
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, group_proportions={'W': 0.5, 'B': 0.6}))
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, base_rates={'W': [0.5, 0.5, 0.0], 'B': [0.5, 0.3, 0.2],
                                                       'other': [0.5, 0.3, 0.2]}))
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, features=spec['features'][1:]))
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, terms=[{'feature': 'age', 'shape': 'cubic', 'coef': [0, 0, 0]}]))
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, terms=[{'feature': 'age', 'shape': 'linear', 'coef': [0, 1]}]))
    with pytest.raises(ValueError):
        GeneratorSpec.from_dict(dict(spec, n=-1))


def test_default_spec_closes_the_published_rounding_gap():
    spec = default_spec(n=1000)
    for group, rates in spec.base_rates.items():
        assert sum(rates) == pytest.approx(1.0, abs=1e-12)
    assert spec.base_rates['W'] == list(PUBLISHED_BASE_RATES['W'])
    black = np.array(spec.base_rates['B'])
    assert np.max(np.abs(black - PUBLISHED_BASE_RATES['B'])) <= 0.01 / 3 + 1e-12
    assert np.all(black > PUBLISHED_BASE_RATES['B'])
    assert close_rounding_gap([0.5, 0.5]) == [0.5, 0.5]


@pytest.mark.parametrize('seed', range(5))
def test_small_groups_calibrate_to_whole_rows(seed):
    spec = GeneratorSpec.default(n=3000, seed=seed)
    data, details = generate(spec, return_details=True)
    for group, rates in spec.base_rates.items():
        n_group = int((data.groups == group).sum())
        assert np.max(np.abs(np.array(details.achieved[group]) - rates)) <= max(spec.tolerance, 1.0 / n_group) + 1e-12


def test_calibration_lands_on_whole_rows():
    rng = np.random.default_rng(0)
    linear = np.outer(rng.normal(size=1000), [0.0, 0.5, 1.0])
    uniforms = rng.random(1000)
    intercepts, shares = _calibrate_intercepts(linear, uniforms, [0.57, 0.33, 0.10], 0.001, 30, 'other')
    counts = np.bincount(labels_from_scores(linear + intercepts, uniforms), minlength=3)
    assert np.abs(counts - [570, 330, 100]).max() <= 1
    assert np.array_equal(shares, counts / 1000.0)
    assert intercepts[0] == 0.0
