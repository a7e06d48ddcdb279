"""Toolkit for building fine-grained negative-query benchmarks, preference
data, and paired-accuracy evaluations for multimodal chat models.

All model inference is delegated to OpenAI-compatible chat-completion
endpoints; every endpoint call goes through a record/replay cache so that
pipelines are reproducible offline.
"""

__version__ = "0.1.0"
