"""Tag taxonomy, cluster extraction and prompt construction."""

from .clusters import (
    EmptyIdentityError,
    FilterResult,
    SemanticClusters,
    extract_clusters,
    filter_entry,
    framing_conflicts,
)
from .manifest import ManifestEntry, ManifestError, emit_manifest, read_manifest
from .prompts import (
    EDIT_TASKS,
    REFERENCE_KINDS,
    TASK_REFERENCE,
    EditPrompt,
    EmptyPoolError,
    MissingClusterError,
    PromptBundle,
    build_edit_prompt,
    build_prompt_bundle,
    build_reference_prompt,
    build_training_prompt,
    render,
    substitute_motion_tags,
)
from .records import RecordError, TagRecord, read_metadata, split_tag_string
from .table import (
    Classification,
    Cluster,
    PromptConstants,
    SubGroup,
    Taxonomy,
    TaxonomyError,
    classify_tag,
    dump_taxonomy,
    load_constants,
    load_taxonomy,
)
