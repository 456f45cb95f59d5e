import os
import sys
from argparse import (
    ArgumentParser,
    Namespace,
    RawDescriptionHelpFormatter,
)
from typing import (
    Dict,
    List,
    NoReturn,
    Optional,
)

from src.config import (
    TrainConfig,
    apply_overrides,
    load_config,
)
from src.errors import (
    FormatError,
    InternalConsistencyError,
    InvalidArgumentError,
    NumericalFailureError,
    UsageError,
)
from src.hierarchy import build_hierarchy
from src.index import (
    encode_database,
    map_at_n,
    search_features,
)
from src.logger import logger
from src.persist import (
    load_codes,
    load_model,
    read_features,
    read_labels,
    save_codes,
    save_model,
)
from src.report import (
    read_results_csv,
    write_hierarchy_csv,
    write_results_csv,
)
from src.trainer import (
    Trainer,
    embed_all,
)

_ACTION_TRAIN = 'train'
_ACTION_ENCODE = 'encode'
_ACTION_SEARCH = 'search'
_ACTION_EVAL = 'eval'
_ACTION_EXPORT_HIERARCHY = 'export-hierarchy'

_EXIT_OK = 0
_EXIT_USAGE = 1
_EXIT_DATA = 2
_EXIT_NUMERICAL = 3

_EPILOG = """
results CSV columns: query_id (row of the query file), rank (1-based), item_id, distance
hierarchy CSV columns: item_id, level (0 is the finest), cluster
exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure
"""


class UsageArgumentParser(ArgumentParser):
    """Argument parser raising `UsageError` instead of exiting."""

    def error(self, message: str) -> NoReturn:
        """Report a command line error."""
        raise UsageError(f'{self.format_usage()}{self.prog}: error: {message}')


def _parse_arguments(argv: Optional[List[str]]) -> Namespace:
    """Command line arguments parsing."""
    parser = UsageArgumentParser(
        prog='hyperbolic-pq',
        description='Hyperbolic product quantization for image retrieval.',
        epilog=_EPILOG,
        formatter_class=RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        'action',
        type=str,
        choices=[
            _ACTION_TRAIN,
            _ACTION_ENCODE,
            _ACTION_SEARCH,
            _ACTION_EVAL,
            _ACTION_EXPORT_HIERARCHY,
        ],
    )

    train_group = parser.add_argument_group('train')
    train_group.add_argument(
        '--config',
        type=str,
        required=False,
        help='key=value configuration file',
    )
    train_group.add_argument(
        '--metrics',
        type=str,
        required=False,
        help='per-epoch metrics CSV (defaults next to the model file)',
    )
    train_group.add_argument(
        '--epochs',
        type=str,
        required=False,
        help='number of epochs (overrides the configuration file)',
    )
    train_group.add_argument(
        '--batch-size',
        type=str,
        required=False,
        help='batch size (overrides the configuration file)',
    )
    train_group.add_argument(
        '--seed',
        type=str,
        required=False,
        help='random seed (overrides the configuration file)',
    )
    train_group.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='override any configuration key (repeatable)',
    )

    search_group = parser.add_argument_group('search')
    search_group.add_argument(
        '--codes',
        type=str,
        required=False,
        help='code file of the database',
    )
    search_group.add_argument(
        '--queries',
        type=str,
        required=False,
        help='feature file of the queries',
    )
    search_group.add_argument(
        '--topn',
        type=int,
        required=False,
        default=100,
        help='number of results per query',
    )

    eval_group = parser.add_argument_group('eval')
    eval_group.add_argument(
        '--results',
        type=str,
        required=False,
        help='results CSV written by search',
    )
    eval_group.add_argument(
        '--query-labels',
        type=str,
        required=False,
        help='label file of the queries',
    )
    eval_group.add_argument(
        '--db-labels',
        type=str,
        required=False,
        help='label file of the database items',
    )
    eval_group.add_argument(
        '--n',
        type=int,
        required=False,
        default=100,
        help='cut-off of MAP@N',
    )

    parser.add_argument(
        '--features',
        type=str,
        required=False,
        help='feature file (train, encode, export-hierarchy)',
    )
    parser.add_argument(
        '--model',
        type=str,
        required=False,
        help='model file (encode, search, export-hierarchy)',
    )
    parser.add_argument(
        '--levels',
        type=str,
        required=False,
        help='comma-separated cluster counts of the hierarchy, finest first (train, export-hierarchy)',
    )
    parser.add_argument(
        '--out',
        type=str,
        required=False,
        help='output file',
    )

    return parser.parse_args(argv)


_REQUIRED = {
    _ACTION_TRAIN: ('features', 'out'),
    _ACTION_ENCODE: ('model', 'features', 'out'),
    _ACTION_SEARCH: ('model', 'codes', 'queries', 'out'),
    _ACTION_EVAL: ('results', 'query_labels', 'db_labels'),
    _ACTION_EXPORT_HIERARCHY: ('model', 'features', 'out'),
}


def _check_arguments(args: Namespace) -> None:
    for name in _REQUIRED[args.action]:
        if getattr(args, name) is None:
            raise UsageError(f'--{name.replace("_", "-")} is required by `{args.action}`')
    if args.topn < 1:
        raise UsageError('--topn must be >= 1')
    if args.n < 1:
        raise UsageError('--n must be >= 1')


def _overrides(args: Namespace) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for key in ('epochs', 'batch_size', 'seed', 'levels'):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    for pair in args.set:
        if '=' not in pair:
            raise UsageError(f'--set expects KEY=VALUE, got `{pair}`')
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()

    return overrides


def _train(args: Namespace) -> None:
    overrides = _overrides(args)
    if args.config:
        config = load_config(args.config, overrides)
    else:
        config = apply_overrides(TrainConfig(), overrides).validate()
    metrics_path = args.metrics or f'{os.path.splitext(args.out)[0]}.metrics.csv'

    logger.info(f'Train on `{args.features}` (metrics in `{metrics_path}`)')
    features = read_features(args.features)
    model = Trainer(config, metrics_path=metrics_path).train(features)
    save_model(args.out, model)
    logger.info(f'Model saved to `{args.out}`')


def _encode(args: Namespace) -> None:
    logger.info(f'Encode `{args.features}` with `{args.model}`')
    model = load_model(args.model)
    db = encode_database(model, read_features(args.features))
    save_codes(args.out, db)


def _search(args: Namespace) -> None:
    logger.info(f'Search `{args.queries}` in `{args.codes}`')
    model = load_model(args.model)
    db = load_codes(args.codes)
    rankings = search_features(model, db, read_features(args.queries), args.topn)
    write_results_csv(args.out, rankings)


def _eval(args: Namespace) -> float:
    results = read_results_csv(args.results)
    query_labels = read_labels(args.query_labels)
    db_labels = read_labels(args.db_labels)

    rankings = [results.get(query_id, []) for query_id in range(len(query_labels))]
    unknown = [item for ranking in rankings for item in ranking if not 0 <= item < len(db_labels)]
    if unknown:
        raise FormatError(f'`{args.results}` retrieves item {unknown[0]}, absent from `{args.db_labels}`')
    if set(results) - set(range(len(query_labels))):
        raise FormatError(f'`{args.results}` has queries absent from `{args.query_labels}`')

    return map_at_n(rankings, query_labels, db_labels, args.n)


def _export_hierarchy(args: Namespace) -> None:
    model = load_model(args.model)
    levels = apply_overrides(model.config, {'levels': args.levels}).levels if args.levels else model.config.levels

    logger.info(f'Export hierarchy {list(levels)} of `{args.features}`')
    tangents, _ = embed_all(model, read_features(args.features))
    hierarchy = build_hierarchy(
        tangents.numpy(),
        levels,
        model.curvatures.detach(),
        seed=model.config.seed,
        iters=model.config.kmeans_iters,
    )
    write_hierarchy_csv(args.out, hierarchy)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run a command line.

    Args:
        argv (Optional[List[str]]): The arguments, `sys.argv[1:]` by default.

    Returns:
        int: The exit code.
    """
    try:
        args = _parse_arguments(argv)
        _check_arguments(args)

        if args.action == _ACTION_TRAIN:
            _train(args)
        elif args.action == _ACTION_ENCODE:
            _encode(args)
        elif args.action == _ACTION_SEARCH:
            _search(args)
        elif args.action == _ACTION_EVAL:
            print(f'{_eval(args):.4f}')
        elif args.action == _ACTION_EXPORT_HIERARCHY:
            _export_hierarchy(args)
    except SystemExit as stop:
        # --help
        return stop.code if isinstance(stop.code, int) else _EXIT_OK
    except UsageError as error:
        print(error, file=sys.stderr)
        return _EXIT_USAGE
    except InvalidArgumentError as error:
        logger.error(f'Invalid argument: {error}')
        return _EXIT_USAGE
    except (FormatError, InternalConsistencyError, OSError) as error:
        logger.error(f'Data error: {error}')
        return _EXIT_DATA
    except NumericalFailureError as error:
        logger.error(f'Numerical failure: {error}')
        return _EXIT_NUMERICAL

    return _EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
