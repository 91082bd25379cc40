"""Database exploration and question-to-SQL synthesis over a deduplicated schema graph."""

__version__ = "0.1.0"
