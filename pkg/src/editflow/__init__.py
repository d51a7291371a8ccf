"""editflow: a desk-scale lab for training a flow-matching video editor
against its own yes/no critic, scoring the results with analytic or remote
judges, and curating clip-pair datasets."""

__version__ = "0.1.0"
