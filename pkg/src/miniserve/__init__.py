"""miniserve: a desk-scale serverless model-inference platform.

Declarative inference services with request-based autoscaling and
scale-to-zero, canary/shadow routing, dynamic batching, transformer and
explainer pipelines, and payload logging.  Runs either as a real networked
service or entirely in-process on a deterministic virtual clock.
"""

__version__ = "0.1.0"
