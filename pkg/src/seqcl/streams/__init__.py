"""Benchmark streams: data formats, synthetic generators and scenario builders."""
from .formats import (
    LabeledImages,
    convert_sketchrnn_npz,
    read_feature_sequences,
    read_idx,
    read_idx_file,
    read_strokes,
    write_feature_sequences,
    write_idx,
    write_idx_file,
    write_strokes,
)
from .scenarios import (
    Dataset,
    Scenario,
    Step,
    apply_fixed_permutation,
    build_class_incremental,
    build_domain_incremental,
    check_disjoint_steps,
    check_no_leakage,
    holdout_split,
    load_manifest,
    rebuild,
    save_manifest,
)
from .synth import synth_sequences, synth_split, template_classifier_accuracy

__all__ = [
    "Dataset", "LabeledImages", "Scenario", "Step", "apply_fixed_permutation", "build_class_incremental",
    "build_domain_incremental", "check_disjoint_steps", "check_no_leakage", "convert_sketchrnn_npz",
    "holdout_split", "load_manifest", "read_feature_sequences", "read_idx", "read_idx_file", "read_strokes",
    "rebuild", "save_manifest", "synth_sequences", "synth_split", "template_classifier_accuracy",
    "write_feature_sequences", "write_idx", "write_idx_file", "write_strokes",
]
