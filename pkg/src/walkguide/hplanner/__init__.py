"""Hierarchical prompt construction, structured reply parsing and VLM backends."""

from .backends import (
    BackendAuthError,
    BackendConfigError,
    BackendDescriptor,
    BackendError,
    BackendHttpError,
    BackendReplyError,
    BackendTimeout,
    FALLBACK_REPLY,
    HttpBackend,
    MockBackend,
    make_backend,
    query_backend,
    request_key,
)
from .prompts import (
    WALK_FIELDS,
    EncodedImage,
    HierarchicalResponse,
    PromptRequest,
    StructuredResponseError,
    build_danger_prompt,
    build_decision_prompt,
    build_normalization_prompt,
    build_perception_prompt,
    build_qa_prompt,
    build_walk_prompt,
    load_template,
    parse_structured_response,
    render_structured_response,
)
