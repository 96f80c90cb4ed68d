"""Topology-prompted response generation."""

from topotrace.genclient.cache import CacheKey, ResponseCache
from topotrace.genclient.client import ChatClient, GenConfig, Generator, RunSummary, parse_topologies
from topotrace.genclient.templates import (
    DEFAULT_TEMPLATES,
    SENTINEL,
    PromptTemplate,
    render_prompt,
    strip_topology_instructions,
)

__all__ = [
    "CacheKey",
    "ChatClient",
    "DEFAULT_TEMPLATES",
    "GenConfig",
    "Generator",
    "PromptTemplate",
    "ResponseCache",
    "RunSummary",
    "SENTINEL",
    "parse_topologies",
    "render_prompt",
    "strip_topology_instructions",
]
