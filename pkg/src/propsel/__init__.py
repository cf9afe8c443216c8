"""Select among competing issue-fix proposals, synthesize a golden proposal, and score the results."""

__version__ = "0.1.0"
