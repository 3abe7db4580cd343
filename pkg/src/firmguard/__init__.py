"""firmguard: an iterative LLM firmware hardening pipeline.

Generate firmware with an LLM, build and exercise it (fuzzing, static
analysis, runtime timing), triage the results with rule-based agents, score
the iteration, and feed the open findings back as a patch request.
"""

__version__ = "0.1.0"
