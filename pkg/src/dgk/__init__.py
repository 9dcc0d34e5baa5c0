"""Dense scene-graph generation at toy scale: graph-aware queries, sub-graph matching, relation distillation."""

__version__ = "0.1.0"
