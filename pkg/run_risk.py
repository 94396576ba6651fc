import argparse
import contextlib
import copy
import hashlib
import json
import logging
import os
import sys

import numpy as np

from adjust import (TRANSFORM_PRESETS, TransformSpec, WeightPlan, apply_transform, apply_weight_plan,
                    calibrate_cost_ratios, compose_weight_plans, downweight_factor_for_share)
from audit import (POLICIES, audit_by_group, baseline_policy, bootstrap_ci, compare_reports, generalization_gain,
                   load_reports, robustness_harness)
from data import (ALL_GROUPS, RNG_ALGORITHM, Schema, apply_exclusions, filter_group, load_csv, load_json, save_json,
                  split_equal, write_csv)
from gbm import GbmConfig, load_model, save_model, train
from interpret import DegenerateImportanceError, importance, partial_dependence
from post import (render_audit_md, render_comparison_md, write_confusion, write_hdf5, write_importance,
                  write_json, write_pdp, write_text)
from synth import GeneratorSpec, generate

logging.basicConfig(format='%(asctime)s - %(levelname)s - %(name)s -   %(message)s',
                    datefmt='%m/%d/%Y %H:%M:%S',
                    level=logging.INFO)
logger = logging.getLogger(__name__)

MODES = ('gen', 'run', 'compare', 'audit', 'pdp', 'importance')
DATA_SOURCES = ('csv', 'json', 'generator')
WEIGHT_MODES = ('none', 'manual', 'calibrate')
SEED_NAMES = ('split', 'train', 'audit')
CONFIG_FIELDS = ('data', 'exclude_flags', 'seeds', 'gbm', 'training_group', 'weights', 'downweight',
                 'recalibrate_after_downweight', 'transform', 'audit', 'interpret', 'output_dir')
MANIFEST_FORMAT = 'risk-run-manifest'
MANIFEST_VERSION = 1

DEFAULT_WEIGHTS = {'mode': 'none', 'class_weights': None, 'target': 'uniform', 'max_iter': 10, 'tolerance': 0.15}
DEFAULT_AUDIT = {'baselines': True, 'bootstrap': None, 'robustness': None}
DEFAULT_BOOTSTRAP = {'B': 1000, 'level': 0.95, 'statistics': []}
DEFAULT_ROBUSTNESS = {'R': 5, 'grid': [], 'seeds': None, 'threshold': 0.05, 'workers': 1}
DEFAULT_INTERPRET = {'importance': True, 'pdp_features': [], 'target_class': None, 'bins': {}, 'reference': 'full'}
PDP_REFERENCES = ('full', 'test')


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super(StageError, self).__init__('[%s] %s' % (stage, cause))
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name):
    logger.info("***** Stage: %s *****", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def _merge(defaults, given, what):
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ValueError('Unknown %s options: %s' % (what, ', '.join(sorted(unknown))))
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


class PipelineConfig(object):
    """One experimental arm: data source, exclusions, seeds, learner, training group, weighting,
    down-weighting, test-time transform, audit and interpretation options."""

    def __init__(self,
                 data=None,
                 exclude_flags=(),
                 seeds=None,
                 gbm=None,
                 training_group=ALL_GROUPS,
                 weights=None,
                 downweight=None,
                 recalibrate_after_downweight=False,
                 transform=None,
                 audit=None,
                 interpret=None,
                 output_dir='out/'):
        data = dict(data or {})
        sources = [k for k in DATA_SOURCES if k in data]
        if len(sources) != 1 or len(data) != 1:
            raise ValueError("Invalid data: {} - should name exactly one of {}".format(sorted(data),
                                                                                        ', '.join(DATA_SOURCES)))
        self.data = copy.deepcopy(data)
        self.exclude_flags = sorted(set(exclude_flags))
        self.seeds = _merge({name: 0 for name in SEED_NAMES}, seeds, 'seed')
        self.gbm = gbm if isinstance(gbm, GbmConfig) else GbmConfig.from_dict(gbm or {})
        self.training_group = str(training_group)
        self.weights = _merge(DEFAULT_WEIGHTS, weights, 'weights')
        if self.weights['mode'] not in WEIGHT_MODES:
            raise ValueError("Invalid weights mode: {} - should be one of {}".format(self.weights['mode'],
                                                                                   ', '.join(WEIGHT_MODES)))
        if self.weights['mode'] == 'manual':
            WeightPlan(self.weights['class_weights'])
        if downweight is not None:
            downweight = dict(downweight)
            if 'class' not in downweight or len(set(downweight) & {'factor', 'match_groups'}) != 1:
                raise ValueError('downweight needs "class" and one of "factor" or "match_groups"')
            if 'match_groups' in downweight and len(downweight['match_groups']) != 2:
                raise ValueError('match_groups names [target group, source group]')
            if 'factor' in downweight and not 0.0 < downweight['factor'] <= 1.0:
                raise ValueError("Invalid downweight factor: {} - should be in (0, 1]".format(downweight['factor']))
        self.downweight = downweight
        self.recalibrate_after_downweight = bool(recalibrate_after_downweight)
        if self.recalibrate_after_downweight and (downweight is None or self.weights['mode'] != 'calibrate'):
            raise ValueError('recalibrate_after_downweight needs a downweight and weights mode "calibrate"')
        self.transform = copy.deepcopy(transform)
        if transform is not None:
            self.transform_spec()
        self.audit = _merge(DEFAULT_AUDIT, audit, 'audit')
        if self.audit['bootstrap'] is not None:
            self.audit['bootstrap'] = _merge(DEFAULT_BOOTSTRAP, self.audit['bootstrap'], 'bootstrap')
        if self.audit['robustness'] is not None:
            self.audit['robustness'] = _merge(DEFAULT_ROBUSTNESS, self.audit['robustness'], 'robustness')
            for overrides in self.audit['robustness']['grid']:
                self.gbm.replace(**overrides)
        self.interpret = _merge(DEFAULT_INTERPRET, interpret, 'interpret')
        if self.interpret['reference'] not in PDP_REFERENCES:
            raise ValueError("Invalid PDP reference: {} - should be one of {}".format(self.interpret['reference'],
                                                                                    ', '.join(PDP_REFERENCES)))
        self.output_dir = output_dir

    @property
    def train_config(self):
        return self.gbm.replace(seed=self.seeds['train'])

    def transform_spec(self):
        if self.transform is None:
            return None
        if 'preset' in self.transform:
            preset = self.transform['preset']
            if preset not in TRANSFORM_PRESETS:
                raise ValueError("Invalid transform preset: {} - should be one of {}".format(
                    preset, ', '.join(sorted(TRANSFORM_PRESETS))))
            return TRANSFORM_PRESETS[preset](self.transform['group'])
        return TransformSpec.from_dict(self.transform)

    def with_seed(self, seed):
        params = self.to_dict()
        params['seeds'] = {name: int(seed) for name in SEED_NAMES}
        return PipelineConfig.from_dict(params)

    def config_hash(self):
        return hashlib.sha256(self.to_json_string().encode('utf-8')).hexdigest()

    def run_id(self):
        return self.config_hash()[:12]

    @classmethod
    def from_dict(cls, json_object):
        """Accepts a config dict or a run manifest, whose embedded config is used."""
        if json_object.get('format') == MANIFEST_FORMAT:
            json_object = json_object['config']
        params = copy.deepcopy(json_object)
        unknown = set(params) - set(CONFIG_FIELDS)
        if unknown:
            raise ValueError("Unknown PipelineConfig parameters: {}".format(", ".join(sorted(unknown))))
        return cls(**params)

    @classmethod
    def from_json_file(cls, json_file):
        with open(json_file, "r") as reader:
            return cls.from_dict(json.load(reader))

    def to_dict(self):
        return {
            'data': copy.deepcopy(self.data),
            'exclude_flags': list(self.exclude_flags),
            'seeds': dict(self.seeds),
            'gbm': self.gbm.to_dict(),
            'training_group': self.training_group,
            'weights': copy.deepcopy(self.weights),
            'downweight': copy.deepcopy(self.downweight),
            'recalibrate_after_downweight': self.recalibrate_after_downweight,
            'transform': copy.deepcopy(self.transform),
            'audit': copy.deepcopy(self.audit),
            'interpret': copy.deepcopy(self.interpret),
            'output_dir': self.output_dir,
        }

    def to_json_string(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def generator_spec(source):
    """A full spec dict, {"spec_file": path} or {"default": {n, seed, include_other}}."""
    if 'spec_file' in source:
        return GeneratorSpec.from_json_file(source['spec_file'])
    if 'default' in source:
        return GeneratorSpec.default(**source['default'])
    return GeneratorSpec.from_dict(source)


def load_source(source):
    """Returns (dataset, provenance dict) for the configured data source."""
    if 'generator' in source:
        spec = generator_spec(source['generator'])
        data, details = generate(spec, return_details=True)
        return data, {'generator': {'spec_hash': spec.spec_hash(), 'seed': spec.seed, 'n': spec.n,
                                    'achieved_base_rates': details.achieved}}
    if 'json' in source:
        return load_json(source['json']['path']), {'json': source['json']['path']}
    csv = source['csv']
    schema = Schema.from_json_file(csv['schema_file']) if 'schema_file' in csv else Schema.from_dict(csv['schema'])
    data = load_csv(csv['path'], schema, csv.get('label_column', 'label'), csv.get('group_column', 'group'),
                    csv.get('default_group'), csv.get('class_names'), csv.get('weight_column'))
    return data, {'csv': csv['path']}


def align_schema(data, schema):
    """Projects a dataset onto a trained model's schema (e.g. after exclusions)."""
    if data.schema == schema:
        return data
    keep = [data.schema.index(name) for name in schema.names]
    projected = data.replace(schema=data.schema.project(keep), features=data.features[:, keep])
    if projected.schema != schema:
        raise ValueError('Dataset schema %r does not match model schema %r' % (data.schema, schema))
    return projected


def load_dataset(path, schema, args):
    if path.endswith('.json'):
        return align_schema(load_json(path), schema)
    class_names = args.class_names.split(',') if args.class_names else None
    return load_csv(path, schema, args.label_column, args.group_column, args.default_group, class_names,
                    args.weight_column)


def _weight_plan(config, train_data):
    weights = config.weights
    if weights['mode'] == 'manual':
        return WeightPlan(weights['class_weights'], provenance='manual')
    if weights['mode'] == 'calibrate':
        return calibrate_cost_ratios(train_data, config.train_config, weights['target'], weights['max_iter'],
                                     weights['tolerance'])
    return WeightPlan.identity(train_data.n_classes)


def _downweight_plan(config, n_classes, split_train):
    """match_groups [a, b]: the factor that brings b's share of the class down to a's share."""
    downweight = config.downweight
    klass = int(downweight['class'])
    if 'factor' in downweight:
        factor = float(downweight['factor'])
    else:
        target, source = downweight['match_groups']
        totals = filter_group(split_train, target).class_weight_totals()
        factor = downweight_factor_for_share(filter_group(split_train, source), klass, totals[klass] / totals.sum())
    weights = np.ones(n_classes)
    weights[klass] = factor
    logger.info("  Down-weighting class %d by %.4f", klass, factor)
    return WeightPlan(weights, provenance='downweight')


def _default_statistics(groups, n_classes):
    return ['%s/predicted_share:%d' % (g, k) for g in groups for k in range(n_classes)]


def cmd_run(config, out_dir=None):
    """Runs one arm end to end and writes every artifact under <out_dir>/<run_id>/."""
    run_id = config.run_id()
    out = os.path.join(out_dir or config.output_dir, run_id)
    os.makedirs(out, exist_ok=True)
    seeds = config.seeds
    gbm_config = config.train_config
    manifest = {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'run_id': run_id,
        'config_hash': config.config_hash(),
        'config': config.to_dict(),
        'seeds': dict(seeds),
        'rng': RNG_ALGORITHM,
        'training_group': config.training_group,
    }
    write_text(config.to_json_string(), os.path.join(out, 'config.json'))

    with stage('data'):
        data, provenance = load_source(config.data)
        manifest['data'] = dict(provenance, fingerprint=data.fingerprint(), n=len(data), groups=data.group_ids())
        logger.info("  Num rows = %d", len(data))

    with stage('exclusions'):
        data = apply_exclusions(data, config.exclude_flags)
        manifest['features'] = data.schema.names

    with stage('split'):
        split = split_equal(data, seeds['split'])
        train_data = split.train
        if config.training_group != ALL_GROUPS:
            train_data = filter_group(split.train, config.training_group)
        test = split.test
        logger.info("  Num train rows = %d (group %s)", len(train_data), config.training_group)
        logger.info("  Num test rows = %d", len(test))

    with stage('weights'):
        plan = _weight_plan(config, train_data)
        effective = plan
        if config.downweight is not None:
            down = _downweight_plan(config, train_data.n_classes, split.train)
            effective = compose_weight_plans(plan, down)
            if config.recalibrate_after_downweight:
                recalibrated = _weight_plan(config, apply_weight_plan(train_data, effective))
                effective = compose_weight_plans(effective, recalibrated)
        fitted = apply_weight_plan(train_data, effective)
        write_json({'plan': plan.to_dict(), 'downweight': config.downweight,
                    'effective_class_weights': effective.class_weights},
                   os.path.join(out, 'weight_plan.json'))
        manifest['effective_class_weights'] = effective.class_weights.tolist()

    with stage('train'):
        if np.intersect1d(fitted.row_ids, test.row_ids).size:
            raise RuntimeError('Training rows overlap audit rows')
        group = None if config.training_group == ALL_GROUPS else config.training_group
        model = train(fitted, gbm_config, group)
        save_model(model, os.path.join(out, 'model.json'))
        manifest['train_rows_fingerprint'] = model.training_rows_fingerprint
        manifest['n_train'] = len(fitted)

    with stage('transform'):
        spec = config.transform_spec()
        if spec is not None:
            test = apply_transform(test, spec)

    with stage('audit'):
        bundle = audit_by_group(model, test)
        manifest['test_rows_fingerprint'] = test.rows_fingerprint()
        manifest['n_test'] = len(test)
        for report in bundle.reports.values():
            write_confusion(report, out, data.class_names, model.training_group)
        write_json(bundle.to_dict(), os.path.join(out, 'audit.json'))
        write_text(render_audit_md(bundle, data.class_names), os.path.join(out, 'audit.md'))
        write_hdf5(os.path.join(out, 'predictions.hdf5'), test, bundle.probabilities, bundle.predictions,
                   model.training_group, model.schema_fingerprint())

    if config.audit['baselines']:
        with stage('baselines'):
            baselines = {}
            for g in bundle.reports:
                mask = np.ones(len(test), dtype=bool) if g == ALL_GROUPS else test.groups == g
                tables = {p: baseline_policy(p, test.labels[mask], model.n_classes, test.weights[mask],
                                             seed=seeds['audit']) for p in POLICIES}
                baselines[g] = {
                    'policies': {p: t.to_dict() for p, t in tables.items()},
                    'generalization_gain': generalization_gain(bundle[g], tables['majority_class']),
                }
            write_json(baselines, os.path.join(out, 'baselines.json'))

    if config.audit['bootstrap'] is not None:
        with stage('bootstrap'):
            options = config.audit['bootstrap']
            statistics = options['statistics'] or _default_statistics(bundle.groups, model.n_classes)
            results = [bootstrap_ci(test, model, s, options['B'], options['level'], seeds['audit'])
                       for s in statistics]
            write_json({'results': results}, os.path.join(out, 'bootstrap.json'))

    if config.audit['robustness'] is not None:
        with stage('robustness'):
            options = config.audit['robustness']
            grid = [gbm_config.replace(**o) for o in options['grid']] or [gbm_config]
            split_seeds = options['seeds'] or [seeds['split'] + r for r in range(options['R'])]
            summary = robustness_harness(
                data, grid, options['R'], split_seeds, group, options['threshold'],
                prepare_train=lambda d: apply_weight_plan(d, effective),
                prepare_test=(lambda d: apply_transform(d, spec)) if spec is not None else None,
                n_workers=options['workers'])
            write_json(summary, os.path.join(out, 'robustness.json'))

    with stage('interpret'):
        options = config.interpret
        if options['importance']:
            try:
                write_importance(importance(model), out)
            except DegenerateImportanceError as e:
                logger.warning("Importance skipped: %s", e)
        target_class = options['target_class']
        if target_class is None:
            target_class = model.n_classes - 1
        # full: every row after exclusions, untransformed; test: the audited test half
        reference = data if options['reference'] == 'full' else test
        for feature in options['pdp_features']:
            curve = partial_dependence(model, reference, feature, target_class, options['bins'].get(feature),
                                       options['reference'])
            write_pdp(curve, out)

    manifest['outputs'] = sorted(name for name in os.listdir(out) if name != 'manifest.json')
    write_json(manifest, os.path.join(out, 'manifest.json'))
    logger.info("Run %s written to %s", run_id, out)
    return out


def cmd_gen(spec, out_dir):
    """dataset.csv and dataset.json plus generation.json (seed, spec hash, achieved base rates)."""
    os.makedirs(out_dir, exist_ok=True)
    with stage('gen'):
        data, details = generate(spec, return_details=True)
        write_csv(data, os.path.join(out_dir, 'dataset.csv'))
        save_json(data, os.path.join(out_dir, 'dataset.json'))
        write_text(spec.to_json_string(), os.path.join(out_dir, 'spec.json'))
        write_json({'seed': spec.seed, 'spec_hash': spec.spec_hash(), 'n': spec.n, 'rng': RNG_ALGORITHM,
                    'dataset_fingerprint': data.fingerprint(), 'achieved_base_rates': details.achieved,
                    'intercepts': details.intercepts},
                   os.path.join(out_dir, 'generation.json'))
    logger.info("Generated %d rows into %s", len(data), out_dir)
    return data


def cmd_compare(report_a, report_b, out_dir=None):
    with stage('compare'):
        with open(report_a) as fa, open(report_b) as fb:
            comparison = compare_reports(load_reports(json.load(fa)), load_reports(json.load(fb)))
        text = render_comparison_md(comparison)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            write_json(comparison, os.path.join(out_dir, 'comparison.json'))
            write_text(text, os.path.join(out_dir, 'comparison.md'))
    print(text)
    return comparison


def cmd_audit(args):
    """Re-audits a saved model on a dataset, optionally after a test-time transform."""
    os.makedirs(args.out_dir, exist_ok=True)
    with stage('load'):
        model = load_model(args.model_file)
        test = load_dataset(args.data_file, model.schema, args)
    with stage('transform'):
        if args.transform_file:
            test = apply_transform(test, TransformSpec.from_json_file(args.transform_file))
    with stage('audit'):
        bundle = audit_by_group(model, test)
        for report in bundle.reports.values():
            write_confusion(report, args.out_dir, test.class_names, model.training_group)
        write_json(bundle.to_dict(), os.path.join(args.out_dir, 'audit.json'))
        write_text(render_audit_md(bundle, test.class_names), os.path.join(args.out_dir, 'audit.md'))
    return bundle


def cmd_pdp(args):
    os.makedirs(args.out_dir, exist_ok=True)
    with stage('load'):
        model = load_model(args.model_file)
        data = load_dataset(args.data_file, model.schema, args)
    with stage('pdp'):
        target_class = model.n_classes - 1 if args.target_class is None else args.target_class
        features = args.features.split(',') if args.features else model.schema.names
        curves = [partial_dependence(model, data, f, target_class, reference=args.data_file) for f in features]
        for curve in curves:
            write_pdp(curve, args.out_dir)
    return curves


def cmd_importance(args):
    os.makedirs(args.out_dir, exist_ok=True)
    with stage('importance'):
        report = importance(load_model(args.model_file))
        write_importance(report, args.out_dir)
    for name, share in report.ranked():
        logger.info("  %-20s %6.2f", name, share)
    return report


def get_args(argv=None):
    parser = argparse.ArgumentParser()

    ## Required parameters
    parser.add_argument('mode', choices=MODES, help='gen | run | compare | audit | pdp | importance')

    # Config and data paths
    parser.add_argument('--config', default=None, type=str, help='Pipeline config or run manifest (run mode).')
    parser.add_argument('--spec_file', default=None, type=str, help='Generator spec (gen mode); default spec if unset.')
    parser.add_argument('--n', default=None, type=int, help='Overrides the generator population size.')
    parser.add_argument('--model_file', default=None, type=str)
    parser.add_argument('--data_file', default=None, type=str, help='Dataset as .json container or .csv.')
    parser.add_argument('--transform_file', default=None, type=str)
    parser.add_argument('--report_a', default=None, type=str)
    parser.add_argument('--report_b', default=None, type=str)

    # CSV columns
    parser.add_argument('--label_column', default='label', type=str)
    parser.add_argument('--group_column', default='group', type=str)
    parser.add_argument('--weight_column', default='weight', type=str)
    parser.add_argument('--default_group', default=None, type=str)
    parser.add_argument('--class_names', default=None, type=str, help='Comma-separated label names.')

    # PDP options
    parser.add_argument('--features', default=None, type=str, help='Comma-separated; all features if unset.')
    parser.add_argument('--target_class', default=None, type=int)

    # Output and overrides
    parser.add_argument('--out_dir', default=None, type=str)
    parser.add_argument('--seed', default=None, type=int, help='Overrides the split, train and audit seeds.')
    parser.add_argument('--verbose_logging', default=False, action='store_true')

    return parser.parse_args(argv)


def main(argv=None):
    args = get_args(argv)
    if args.verbose_logging:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        if args.mode == 'gen':
            with stage('spec'):
                spec = GeneratorSpec.from_json_file(args.spec_file) if args.spec_file else GeneratorSpec.default()
                if args.n is not None:
                    spec = spec.replace(n=args.n)
                if args.seed is not None:
                    spec = spec.replace(seed=args.seed)
            cmd_gen(spec, args.out_dir or 'data/')
        elif args.mode == 'run':
            if not args.config:
                raise StageError('config', '--config is required in run mode')
            with stage('config'):
                config = PipelineConfig.from_json_file(args.config)
                if args.seed is not None:
                    config = config.with_seed(args.seed)
            cmd_run(config, args.out_dir)
        elif args.mode == 'compare':
            if not (args.report_a and args.report_b):
                raise StageError('compare', '--report_a and --report_b are required')
            cmd_compare(args.report_a, args.report_b, args.out_dir)
        else:
            if not args.model_file or (args.mode != 'importance' and not args.data_file):
                raise StageError(args.mode, '--model_file (and --data_file) are required')
            args.out_dir = args.out_dir or 'out/'
            {'audit': cmd_audit, 'pdp': cmd_pdp, 'importance': cmd_importance}[args.mode](args)
    except StageError as e:
        logger.error("%s", e)
        sys.stderr.write('%s\n' % e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
