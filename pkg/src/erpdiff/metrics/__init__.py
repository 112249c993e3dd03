from .distances import fid, fid_from_features, frechet_distance, swd
from .erp import EvokedResponse, evoked, pad, pld, sd_md, select_p300_channel
from .extractor import ExtractorConfig, FeatureExtractor, train_feature_extractor
from .lda import AbaResult, LdaModel, aba, balanced_accuracy, lda_features, lda_fit, lda_predict
from .suite import (
    ALL_METRICS,
    MetricOptions,
    MetricReport,
    baseline_report,
    between_session_baseline,
    between_session_values,
    evaluate,
    fid_references,
)

__all__ = [
    "ALL_METRICS", "AbaResult", "EvokedResponse", "ExtractorConfig", "FeatureExtractor", "LdaModel",
    "MetricOptions", "MetricReport", "aba", "balanced_accuracy", "baseline_report",
    "between_session_baseline", "between_session_values", "evaluate", "evoked", "fid", "fid_from_features",
    "fid_references", "frechet_distance", "lda_features", "lda_fit", "lda_predict", "pad", "pld", "sd_md",
    "select_p300_channel", "swd", "train_feature_extractor",
]
