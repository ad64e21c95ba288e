"""Dataset ingestion, partitioning and synthetic users."""
from .loaders import (DatasetFormatError, load_canonical, load_dataset, load_hhar, load_uschad,
                      resample, write_canonical)
from .partition import (apply_manifest, balance_test, drop_activities, make_clients, merge_datasets, non_iid_partition,
                        rename_activities, shuffle_redistribute, split_meta, stratified_split,
                        vocabulary_of, write_manifest)
from .synthetic import (ACTIVITY_NAMES, ActivityProfile, SyntheticUserSpec, default_profiles,
                        random_user_specs, synth_generate, synth_sample, synth_samples)
from .types import ClientDataset, FederationSplit

__all__ = [
    "ACTIVITY_NAMES", "ActivityProfile", "ClientDataset", "DatasetFormatError", "FederationSplit",
    "SyntheticUserSpec", "apply_manifest", "balance_test", "default_profiles", "drop_activities", "load_canonical",
    "load_dataset", "load_hhar", "load_uschad", "make_clients", "merge_datasets", "non_iid_partition",
    "random_user_specs", "rename_activities", "resample", "shuffle_redistribute", "split_meta",
    "stratified_split", "synth_generate", "synth_sample", "synth_samples", "vocabulary_of",
    "write_canonical", "write_manifest",
]
