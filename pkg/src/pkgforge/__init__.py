"""Product knowledge graph pipeline: prompt rendering, LLM completion,
graph assembly, judge-based validation, catalog mapping, and a compiled
serving cache behind a small HTTP service."""

__version__ = "0.1.0"
