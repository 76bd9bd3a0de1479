"""Consistency-driven fine-tuning of paired recognizers.

Rules and groundings are parsed by :mod:`consistency_ft.rules_dsl`, checked
by :mod:`consistency_ft.consistency_engine` and drive the selection loop in
:mod:`consistency_ft.ft_orchestrator`.
"""

__version__ = "0.3.0"
