"""Conformal prediction sets for label streams, built around a bootstrap
ensemble with a sliding calibration window, plus split-calibration and
probability-mass baselines."""

from .classifiers import (ClassifierSpec, FittedClassifier,
                          TrainingDivergenceError, fit, gradient_check)
from .conformal import (EnsembleModel, ErapsState, build_set,
                        calibration_threshold, class_conditional_thresholds,
                        eraps_fit, eraps_predict_stream, eraps_rescore,
                        eraps_test_aggregates, naive_set, sraps, sraps_parts,
                        sraps_sets_from_parts)
from .core import (LabeledSeries, PredictionSet, ProbVector, RandomSource,
                   RegParams, ScoreWindow, derive_seed)
from .evaluation import (EvalReport, build_report, class_conditional_metrics,
                         default_reg_grid, default_strata_edges,
                         marginal_metrics, regularizer_sweep,
                         reports_from_json, reports_to_csv, reports_to_json,
                         set_stratified_metrics)
from .scores import (ScoredLabel, descending_order, mass_above, rank_of,
                     raps_score, score_all_labels, scores_at_labels)
from .synth import (SyntheticDGP, TheoryReport, coverage_gap_experiment,
                    dkw_bound, dkw_experiment, generate, make_dgp,
                    oracle_set, set_convergence_experiment,
                    uniform_ks_distance)

__version__ = "0.1.0"
