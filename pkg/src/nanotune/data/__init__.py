from .acquisition import AcquisitionError, FinetuneSetSpec, acquire_finetune_set, split_indices
from .augment import AugmentConfig, augment, flip_image, flip_pair, maybe_time_reverse, time_reverse
from .records import FlightRecord, IngestionError, images_array, load_sequence, relative_array, save_sequence
from .still import detect_still, still_mask
from .synth import DomainSpec, DomainSpecError, SubjectSpec, default_domains, synth_generate

__all__ = [
    "AcquisitionError",
    "AugmentConfig",
    "DomainSpec",
    "DomainSpecError",
    "FinetuneSetSpec",
    "FlightRecord",
    "IngestionError",
    "SubjectSpec",
    "acquire_finetune_set",
    "augment",
    "default_domains",
    "detect_still",
    "flip_image",
    "flip_pair",
    "images_array",
    "load_sequence",
    "maybe_time_reverse",
    "relative_array",
    "save_sequence",
    "split_indices",
    "still_mask",
    "synth_generate",
    "time_reverse",
]
