"""Gated mixture of edge-deployed language-model experts with cost-aware subset selection."""

__version__ = "0.1.0"
