from .atlas import AtlasSpec, extract_roi_patches, insert_roi_patches, synthetic_atlas
from .cohort import (
    SCHEMA_VERSION,
    Cohort,
    ManifestError,
    SubjectRecord,
    load_cohort,
    load_manifest,
    save_cohort,
)
from .generator import GeneratorConfig, generate_cohort, simulate_cohort

__all__ = [
    "AtlasSpec", "Cohort", "GeneratorConfig", "ManifestError", "SCHEMA_VERSION", "SubjectRecord",
    "extract_roi_patches", "generate_cohort", "insert_roi_patches", "load_cohort", "load_manifest", "save_cohort",
    "simulate_cohort", "synthetic_atlas",
]
