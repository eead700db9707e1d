"""Assistive radiology report completion toolkit.

Quantitative radiomics evidence from segmentation masks, informative prompt
rendering, streaming completion sessions against pluggable backends, dataset
construction, and BLEU/ROUGE evaluation.
"""

from .completion import (
    AcceptMode,
    BackendParams,
    CompletionSession,
    RuleBackend,
    RemoteBackend,
    Suggestion,
)
from .imaging import LabelMask, VoxelVolume, parse_nifti, parse_raw
from .metrics import bleu, evaluate_dataset, rouge_l, tokenize_eval
from .promptgen import InformativePrompt, render_input_payload, render_prompt
from .radiomics import LateralityRatio, OrganFeatureSet, compute_features, paired_ratio
from .router import KeywordHit, RouteDecision, StudyDescriptor, detect_keywords, route

__version__ = "0.1.0"

__all__ = [
    "AcceptMode",
    "BackendParams",
    "CompletionSession",
    "InformativePrompt",
    "KeywordHit",
    "LabelMask",
    "LateralityRatio",
    "OrganFeatureSet",
    "RemoteBackend",
    "RouteDecision",
    "RuleBackend",
    "StudyDescriptor",
    "Suggestion",
    "VoxelVolume",
    "bleu",
    "compute_features",
    "detect_keywords",
    "evaluate_dataset",
    "paired_ratio",
    "parse_nifti",
    "parse_raw",
    "render_input_payload",
    "render_prompt",
    "rouge_l",
    "route",
    "tokenize_eval",
]
