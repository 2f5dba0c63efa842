# cli.py
import sys
import logging
import argparse
from typing import List, Optional

import numpy as np
import pandas as pd

from gapscore.config import SENTINEL_VALUE, Config, MiceConfig, SynthConfig, build, load_experiment_config
from gapscore.data.models import LabeledDataset
from gapscore.data.repository import dataset_repo, model_repo
from gapscore.data.rng import SeededRng
from gapscore.services.egmm_service import egmm_service
from gapscore.services.experiment_service import experiment_service
from gapscore.services.iforest_service import iforest_service
from gapscore.services.impute_service import impute_service
from gapscore.services.loda_service import loda_service
from gapscore.services.synth_service import (
    DAMAGED_ROW_FRACTION,
    INJECTION_MODES,
    INSTANCE_FEATURE_RATE,
    synth_service,
)
from gapscore.utils.decorators import EXIT_CONFIG, exit_codes, require_seed
from gapscore.utils.errors import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

ALGORITHMS = ("iforest", "loda", "egmm")
SCORE_STRATEGIES = ("baseline", "proportional", "reduced", "marginal", "tail")


def setup_logging(level: str = Config.LOG_LEVEL, log_file: Optional[str] = None) -> None:
    if level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigurationError(f"Unknown log level '{level}'")
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level.upper(), format=Config.LOG_FORMAT, handlers=handlers, force=True)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors surface as one-line ConfigurationErrors"""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _load(path: str, label_column: Optional[str], sentinel: Optional[float]) -> LabeledDataset:
    """Load a CSV, treating the label column as optional"""
    try:
        header = pd.read_csv(path, nrows=0).columns
    except pd.errors.EmptyDataError as e:
        raise FormatError(f"{path} is empty; a header row is required") from e
    label = label_column if label_column and label_column in header else None
    return dataset_repo.load_csv(path, label_column=label, sentinel=sentinel)


def _single_column(path: str, name: str) -> np.ndarray:
    features = dataset_repo.load_csv(path).features
    if name in features.columns:
        j = features.columns.index(name)
    elif features.n_cols == 1:
        j = 0
    else:
        raise ConfigurationError(f"{path} has no '{name}' column and more than one column")
    if not features.mask[:, j].all():
        raise FormatError(f"{path} has missing values in column '{features.columns[j]}'")
    return features.values[:, j]


def _mice_config(args) -> MiceConfig:
    return build(MiceConfig, {"passes": args.passes, "burn_in": args.burnin, "lambda": args.ridge_lambda,
                              "corpus": args.corpus})


@require_seed
def cmd_synth(args) -> None:
    overrides = {key: getattr(args, key) for key in ("n", "d", "anomaly_frac", "rho_corr", "c", "b", "n_noise")
                 if getattr(args, key) is not None}
    cfg = build(SynthConfig, overrides, config=args.config)
    data = synth_service.generate(cfg, SeededRng(args.seed))
    dataset_repo.write_csv(data, args.out, label_column=args.label_column)


@require_seed
def cmd_inject(args) -> None:
    data = _load(args.input, args.label_column, args.sentinel)
    damaged = synth_service.inject(data.features, args.rho, SeededRng(args.seed), mode=args.mode,
                                   feature_rate=args.feature_rate, row_fraction=args.row_fraction)
    dataset_repo.write_csv(LabeledDataset(damaged, data.labels, data.name), args.out, label_column=args.label_column)


@require_seed
def cmd_fit(args) -> None:
    train = _load(args.train, args.label_column, args.sentinel).features
    rng = SeededRng(args.seed)
    if args.algo == "iforest":
        model = iforest_service.fit_iforest(train, args.trees, args.subsample, reduced=args.reduced,
                                            rng=rng, n_jobs=args.jobs)
    elif args.algo == "loda":
        n_projections = args.projections
        if args.compensate_rho is not None:
            n_projections = loda_service.enlarged_projection_count(args.projections, train.n_cols, args.compensate_rho)
            logger.info(f"Enlarged LODA ensemble to {n_projections} projections for rho={args.compensate_rho}")
        model = loda_service.fit_loda(train, n_projections, rng=rng, n_jobs=args.jobs)
    else:
        model = egmm_service.fit_egmm(train, args.ks, args.reps, rng=rng, n_jobs=args.jobs)
    model_repo.save(model, args.out)


def cmd_score(args) -> None:
    model = model_repo.load(args.model)
    data = _load(args.input, args.label_column, args.sentinel).features
    needs_seed = args.impute == "mice" or args.strategy == "tail"
    if needs_seed and args.seed is None:
        raise ConfigurationError("MICE imputation and tail scoring are stochastic and require --seed")
    rng = SeededRng(args.seed) if args.seed is not None else None

    strategy = args.strategy
    if args.impute:
        if args.train is None and args.impute != "sentinel":
            raise ConfigurationError(f"--impute {args.impute} needs --train")
        if strategy != "baseline":
            raise ConfigurationError(f"--impute scores with the baseline strategy, not '{strategy}'")
        train = _load(args.train, args.label_column, args.sentinel).features if args.train else None
        if args.impute == "mean":
            data = impute_service.mean_impute_matrix(impute_service.column_stats(train), data)
        elif args.impute == "sentinel":
            data = impute_service.sentinel_impute(data, args.sentinel_value)
        else:
            data = impute_service.mice_impute(data, train, _mice_config(args), rng.fork(0))

    if model.ALGORITHM == "iforest":
        result = iforest_service.score_matrix(model, data, strategy, args.min_members)
    elif model.ALGORITHM == "loda":
        result = loda_service.score_matrix(model, data, strategy, args.min_members)
    else:
        result = egmm_service.score_matrix(model, data, strategy, allow_fallback=True,
                                           n_samples=args.samples, rng=rng.fork(1) if rng else None)
    dataset_repo.write_csv({"score": result.scores, "not_scored": result.not_scored.astype(int)}, args.out)
    logger.info(f"Scored {len(result.scores)} row(s) with {model.ALGORITHM}/{strategy}; "
                f"{result.n_not_scored} fell back")


def cmd_impute(args) -> None:
    train = _load(args.train, args.label_column, args.sentinel).features
    test = _load(args.test, args.label_column, args.sentinel)
    if args.method == "mean":
        filled = impute_service.mean_impute_matrix(impute_service.column_stats(train), test.features)
    else:
        if args.seed is None:
            raise ConfigurationError("'impute --method mice' is stochastic and requires --seed")
        filled = impute_service.mice_impute(test.features, train, _mice_config(args), SeededRng(args.seed))
    dataset_repo.write_csv(LabeledDataset(filled, test.labels, test.name), args.out, label_column=args.label_column)


def cmd_auc(args) -> None:
    scores = _single_column(args.scores, args.score_column)
    labels = _single_column(args.labels, args.label_column)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise FormatError(f"{args.labels} must contain only 0/1 labels")
    print(repr(experiment_service.auc(scores, labels.astype(int))))


def cmd_experiment(args) -> None:
    cfg = load_experiment_config(args.config).with_overrides(
        seed=args.seed, jobs=args.jobs, replicates=args.replicates, rho=args.rho, output=args.out)
    if cfg.output is None:
        raise ConfigurationError("No output directory: pass --out or set output in the config")
    records = experiment_service.run_experiment(cfg)
    paths = experiment_service.write_outputs(records, cfg.output)
    logger.info(f"Wrote {', '.join(str(p) for p in paths.values())}")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="gapscore", description="Anomaly detection with missing values")
    parser.add_argument("--log-level", default=Config.LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-file", default=None, help="also write the log to this file")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, seed=True):
        p.add_argument("--sentinel", type=float, default=None, help="numeric value to treat as NA on input")
        p.add_argument("--label-column", default="label", help="label column name (ignored when absent)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="master seed (required for stochastic work)")

    def mice_flags(p):
        p.add_argument("--passes", type=int, default=110)
        p.add_argument("--burnin", type=int, default=10)
        p.add_argument("--lambda", dest="ridge_lambda", type=float, default=0.01)
        p.add_argument("--corpus", choices=("train+test", "test-only"), default="train+test")

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", required=True, help="uncorrelated, noise, correlated or mixture")
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--anomaly-frac", type=float)
    p.add_argument("--rho-corr", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--n-noise", type=int)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("inject", help="hide cells completely at random")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--mode", choices=INJECTION_MODES, default="mcar",
                   help="mcar: every row loses rho; instances: rho of the rows are damaged; "
                        "features: row-fraction of the rows lose rho")
    p.add_argument("--feature-rate", type=float, default=INSTANCE_FEATURE_RATE,
                   help="share of features a damaged row loses in instances mode")
    p.add_argument("--row-fraction", type=float, default=DAMAGED_ROW_FRACTION,
                   help="share of rows damaged in features mode")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(handler=cmd_inject)

    p = sub.add_parser("fit", help="fit a detector on complete training data")
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True, help="model JSON file")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--subsample", type=int, default=256)
    p.add_argument("--reduced", action="store_true", help="grow iforest trees on sqrt(d) feature subsets")
    p.add_argument("--projections", type=int, default=100)
    p.add_argument("--compensate-rho", type=float, default=None,
                   help="enlarge the LODA ensemble so ~projections stay applicable at this rho")
    p.add_argument("--ks", type=_int_list, default=[3, 4, 5])
    p.add_argument("--reps", type=int, default=15)
    p.add_argument("--jobs", type=int, default=Config.JOBS)
    common(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("score", help="score rows with a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=SCORE_STRATEGIES, default="baseline")
    p.add_argument("--impute", choices=("mean", "mice", "sentinel"), default=None)
    p.add_argument("--train", default=None, help="training CSV for --impute mean/mice")
    p.add_argument("--sentinel-value", type=float, default=SENTINEL_VALUE,
                   help="fill value for --impute sentinel")
    p.add_argument("--samples", type=int, default=2000, help="Monte-Carlo samples for tail scoring")
    p.add_argument("--min-members", type=int, default=None,
                   help="fewest applicable trees/projections for a reduced score (default 5%% of the ensemble)")
    mice_flags(p)
    common(p)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("impute", help="fill missing cells of a test CSV")
    p.add_argument("--method", choices=("mean", "mice"), required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    mice_flags(p)
    common(p)
    p.set_defaults(handler=cmd_impute)

    p = sub.add_parser("auc", help="ROC AUC of scores against 0/1 labels")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--score-column", default="score")
    p.add_argument("--label-column", default="label")
    p.set_defaults(handler=cmd_auc)

    p = sub.add_parser("experiment", help="run the missing-value decay experiment")
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--rho", type=_float_list, default=None)
    p.set_defaults(handler=cmd_experiment)
    return parser


@exit_codes
def _run(args) -> Optional[int]:
    setup_logging(args.log_level, args.log_file)
    return args.handler(args)


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigurationError as e:
        print(f"gapscore: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        # --help
        return EXIT_CONFIG if e.code not in (0, None) else 0
    return _run(args)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
