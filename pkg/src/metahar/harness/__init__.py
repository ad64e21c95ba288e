from .config import ExperimentConfig, dump_config, load_config, parse_overrides
from .demo import HeterogeneityDemo, PcaPoint, TracePoint, demo_heterogeneity, user_silhouette
from .experiment import (ExperimentError, ExperimentReport, build_split, centroid_accuracy, federate,
                         load_users, prepare_seed, run_experiment, weighted_accuracy)
